import time
from dataclasses import dataclass

import numpy as np
import pytest

from sepspot.encoder import EncoderConfig, RepVGGBlock
from sepspot.model import Model
from sepspot.synth import Corpus, SynthCorpusSpec, synthesize
from sepspot.tensor import ConvSpec
from sepspot.training import TrainConfig, retrain_embedding, train

# Small enough to train in about a minute on one CPU core.
TINY = EncoderConfig(blocks=(1, 1, 1, 1), channels=(8, 16, 16, 32))
TINY_FRAMES = 96
TINY_HEADS = 4
TINY_DIM = 64
SEED = 0


def randomize_bn(bn, rng):
    c = bn.gamma.shape[0]
    bn.gamma.data = rng.uniform(0.5, 1.5, c).astype(np.float32)
    bn.beta.data = rng.normal(0, 0.3, c).astype(np.float32)
    bn.running_mean = rng.normal(0, 0.3, c).astype(np.float32)
    bn.running_var = rng.uniform(0.5, 2.0, c).astype(np.float32)


def random_block(rng, cin, cout, stride=(1, 1), pad_time="same"):
    block = RepVGGBlock(ConvSpec(cin, cout, (3, 3), stride, pad_time, "same"), rng)
    for bn in (block.bn3, block.bn1, block.bn_id):
        if bn is not None:
            randomize_bn(bn, rng)
    return block


def randomize_encoder(encoder, rng):
    for b in encoder.blocks:
        for bn in (b.bn3, b.bn1, b.bn_id):
            if bn is not None:
                randomize_bn(bn, rng)
    return encoder


def tiny_model(seed=SEED, frames=TINY_FRAMES, config=TINY):
    return Model.init(config, frames=frames, n_heads=TINY_HEADS, dim=TINY_DIM, seed=seed)


def pad_free(model):
    """Fused copy of ``model`` with time padding switched off."""
    fused = model.fuse()
    return fused.with_encoder(fused.encoder.with_pad_time("none"))


@dataclass
class TrainedSystem:
    corpus: Corpus
    model: Model
    fused: Model
    retrained: Model
    history: list
    seconds: float


@pytest.fixture(scope="session")
def trained_system() -> TrainedSystem:
    """Default synthetic corpus, tiny encoder trained, fused and retrained pad-free (seed 0)."""
    t0 = time.perf_counter()
    corpus = synthesize(SynthCorpusSpec(seed=SEED))
    model = tiny_model()
    result = train(corpus["train"], model, TrainConfig(frames=TINY_FRAMES, epochs=10, seed=SEED))
    fused = model.fuse()
    retrained = retrain_embedding(fused, corpus["train"], TrainConfig(frames=TINY_FRAMES, epochs=10, seed=SEED))
    return TrainedSystem(corpus, model, fused, retrained.model, result.history, time.perf_counter() - t0)


# (criterion, passed, detail) lines collected by test_acceptance, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
