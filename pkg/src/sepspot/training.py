"""Cosine-margin training of the window embedder and pad-free head retraining."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .features import SegmentRef, temporal_context_pad
from .head import EmbeddingHead, penalization
from .model import Model
from .synth import Split
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    margin: float = 0.2
    scale: float = 30.0
    lambda_pen: float = 1.0
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 32
    frames: int = 160
    clip: float = 5.0
    valid_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.margin < 1:
            raise ValueError("margin must be in [0, 1)")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.lambda_pen < 0:
            raise ValueError("lambda_pen must be >= 0")
        if self.batch_size < 1 or self.epochs < 0 or self.frames < 1:
            raise ValueError("batch_size and frames must be >= 1, epochs >= 0")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    train_acc: float
    valid_acc: float


@dataclass
class TrainResult:
    model: Model
    history: list[EpochStats] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"history": [asdict(h) for h in self.history]}


# --- losses ------------------------------------------------------------------------


def cosine_logits(f, classifier) -> Tensor:
    """Cosine similarity between each embedding row and each class column."""
    return T.matmul(T.l2_normalize(f, axis=1), T.l2_normalize(classifier, axis=0))


def amsoftmax_loss(f, labels, classifier, scale: float = 30.0, margin: float = 0.2) -> Tensor:
    """Additive-margin softmax over cosine logits.

    The target logit is ``s * (cos - m)``, the others ``s * cos``; embeddings
    and class columns are L2-normalised here.
    """
    f = T.as_tensor(f)
    classifier = T.as_tensor(classifier, like=f)
    labels = np.asarray(labels)
    n_classes = classifier.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    onehot = np.zeros((labels.size, n_classes), dtype=f.dtype)
    onehot[np.arange(labels.size), labels] = margin
    logits = (cosine_logits(f, classifier) - onehot) * scale
    return T.softmax_cross_entropy(logits, labels)


def total_loss(f, labels, classifier, attention, cfg: TrainConfig) -> Tensor:
    loss = amsoftmax_loss(f, labels, classifier, cfg.scale, cfg.margin)
    if cfg.lambda_pen:
        loss = loss + penalization(attention) * cfg.lambda_pen
    return loss


# --- optimiser -----------------------------------------------------------------------


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# --- data -----------------------------------------------------------------------------


def make_examples(split: Split, frames: int) -> tuple[np.ndarray, np.ndarray]:
    """Context-padded keyword windows ``[N, 1, frames, D]`` and their word ids."""
    xs = [
        temporal_context_pad(SegmentRef(split.audios[l.audio_id], l.start_frame, l.end_frame), frames).frames
        for l in split.labels
    ]
    return np.stack(xs)[:, None], np.array([l.word_id for l in split.labels])


def split_indices(n: int, valid_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_valid = int(round(n * valid_fraction))
    return np.sort(perm[n_valid:]), np.sort(perm[:n_valid])


def embed_batched(fn, x: np.ndarray, batch: int = 64) -> np.ndarray:
    return np.concatenate([fn(x[i : i + batch]).data for i in range(0, len(x), batch)])


def accuracy(embeddings: np.ndarray, labels: np.ndarray, classifier: np.ndarray) -> float:
    if not len(labels):
        return float("nan")
    logits = cosine_logits(Tensor(embeddings), Tensor(classifier)).data
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def model_accuracy(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    return accuracy(embed_batched(model.embed, x), y, model.classifier.data)


def _run_epochs(
    params: dict[str, Tensor],
    forward,
    attention: Tensor,
    classifier: Tensor,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
    evaluate,
) -> list[EpochStats]:
    opt = Adam(params, lr=cfg.lr)
    names = list(params)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(x))
        losses, correct = [], 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            with Tape() as tape:
                f = forward(x[idx])
                loss = total_loss(f, y[idx], classifier, attention, cfg)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"loss became {value} at epoch {epoch}, batch starting {start}"
                )
            grads = dict(zip(names, tape.gradient(loss, [params[k] for k in names])))
            clip_by_global_norm(grads, cfg.clip)
            opt.step(grads)
            losses.append(value * len(idx))
            pred = np.argmax(cosine_logits(Tensor(f.data), Tensor(classifier.data)).data, axis=1)
            correct += int(np.sum(pred == y[idx]))
        stats = EpochStats(epoch, float(np.sum(losses) / len(x)), correct / len(x), evaluate())
        log.info("epoch %d loss %.4f train %.3f valid %.3f", *asdict(stats).values())
        history.append(stats)
    return history


def train(split: Split, model: Model, cfg: TrainConfig) -> TrainResult:
    """Train encoder, head and classifier in place on keyword windows of ``cfg.frames``."""
    if model.encoder.form != "train":
        raise ValueError("train() needs a train-form (multi-branch) encoder")
    n_classes = len({l.word_id for l in split.labels})
    if n_classes < 2:
        raise ValueError("corpus needs at least 2 classes")
    if model.classifier is None:
        rng = np.random.default_rng(cfg.seed)
        model.classifier = Tensor(
            rng.standard_normal((model.head.dim, max(l.word_id for l in split.labels) + 1)).astype(np.float32),
            requires_grad=True,
        )
    model.frames = cfg.frames
    x, y = make_examples(split, cfg.frames)
    tr, va = split_indices(len(x), cfg.valid_fraction, cfg.seed)
    params = dict(model.encoder.parameters())
    params.update(model.head.parameters())
    params["classifier"] = model.classifier
    history = _run_epochs(
        params,
        lambda xb: model.embed(xb, training=True),
        model.head.attention,
        model.classifier,
        x[tr],
        y[tr],
        cfg,
        np.random.default_rng(cfg.seed + 1),
        lambda: model_accuracy(model, x[va], y[va]),
    )
    return TrainResult(model, history)


def encoder_digest(model: Model) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(model.encoder.state().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


@dataclass
class RetrainResult(TrainResult):
    method: int = 2
    encoder_digest: str = ""


def retrain_embedding(
    model: Model,
    split: Split,
    cfg: TrainConfig,
    method: int = 2,
    frames: int | None = None,
    head_dim: int | None = None,
) -> RetrainResult:
    """Fit a fresh copy of the head for the time-pad-free version of a fused encoder.

    The encoder weights are reused untouched with time padding switched off.
    Method 1 trains on longer windows (``frames``, which must exceed the
    original window); method 2 keeps the original window length. The head and
    classifier start from the pretrained values unless ``head_dim`` asks for a
    wider projection, in which case they are re-initialised at that width.
    """
    if model.encoder.form != "deploy":
        raise ValueError("retrain_embedding needs a fused (deploy-form) encoder")
    if method not in (1, 2):
        raise ValueError("method must be 1 or 2")
    if method == 2:
        if frames not in (None, model.frames):
            raise ValueError("method 2 keeps the original window length")
        frames = model.frames
    elif frames is None or frames <= model.frames:
        raise ValueError("method 1 needs a longer window than the original")

    encoder = model.encoder.with_pad_time("none")
    before = encoder_digest(model)
    if head_dim is None or head_dim == model.head.dim:
        head = model.head.copy()
        classifier = model.classifier.data.copy() if model.classifier is not None else None
    else:
        head = EmbeddingHead.init(model.head.hidden, model.head.n_heads, head_dim, cfg.seed)
        classifier = None
    if classifier is None:
        n = max(l.word_id for l in split.labels) + 1
        classifier = np.random.default_rng(cfg.seed).standard_normal((head.dim, n))
    new = Model(encoder, head, frames, classifier)

    x, y = make_examples(split, frames)
    hidden = embed_batched(encoder, x)
    tr, va = split_indices(len(x), cfg.valid_fraction, cfg.seed)
    params = dict(head.parameters())
    params["classifier"] = new.classifier
    history = _run_epochs(
        params,
        head.embed,
        head.attention,
        new.classifier,
        hidden[tr],
        y[tr],
        cfg,
        np.random.default_rng(cfg.seed + 1),
        lambda: accuracy(embed_batched(head.embed, hidden[va]), y[va], new.classifier.data),
    )
    after = encoder_digest(new)
    if after != before:
        raise AssertionError("encoder weights changed during head retraining")
    return RetrainResult(new, history, method=method, encoder_digest=after)
