"""Synthetic keyword corpus built directly in the filterbank domain.

Every keyword class owns a smooth random spectro-temporal template. Instances
are time-warped, gain-shifted and perturbed copies of it. Fillers are fresh
random templates that never repeat, so they look like speech from no class.
An "audio" is ``filler, keyword, filler, keyword, ..., filler`` with
frame-accurate labels.

``extra_train_classes`` adds words that only occur in the train split, the
way a real embedder is trained on a vocabulary much larger than the keyword
list it is later queried with.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .features import FeatureMatrix, load_features, save_features
from .metrics import LabelSpan

SPLITS = ("train", "queries", "test")


@dataclass
class SynthCorpusSpec:
    n_classes: int = 10
    samples_per_class: int = 50
    extra_train_classes: int = 20
    extra_samples_per_class: int = 25
    templates_per_class: int = 50
    n_test_audios: int = 20
    keywords_per_audio: int = 6
    keywords_per_train_audio: int = 5
    duration: tuple[int, int] = (56, 88)
    gap: tuple[int, int] = (40, 100)
    warp: float = 0.15
    jitter: float = 0.35
    noise: float = 0.5
    bins: int = 60
    seed: int = 0

    def __post_init__(self):
        self.duration = tuple(self.duration)
        self.gap = tuple(self.gap)
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.samples_per_class < 2:
            raise ValueError("need at least 2 samples per class")
        if self.extra_train_classes < 0 or self.extra_samples_per_class < 1:
            raise ValueError("extra_train_classes must be >= 0 and extra_samples_per_class >= 1")
        if not 1 <= self.duration[0] <= self.duration[1]:
            raise ValueError(f"bad duration range {self.duration}")
        if not 1 <= self.gap[0] <= self.gap[1]:
            raise ValueError(f"bad gap range {self.gap}")


@dataclass
class Split:
    audios: dict[str, FeatureMatrix] = field(default_factory=dict)
    labels: list[LabelSpan] = field(default_factory=list)


@dataclass
class Corpus:
    spec: SynthCorpusSpec
    splits: dict[str, Split]

    def __getitem__(self, name: str) -> Split:
        return self.splits[name]


def _interp_matrix(n_out: int, n_knots: int) -> np.ndarray:
    """Linear interpolation from ``n_knots`` evenly spaced knots to ``n_out`` points."""
    pos = np.linspace(0, n_knots - 1, n_out)
    lo = np.clip(np.floor(pos).astype(int), 0, n_knots - 2)
    frac = pos - lo
    m = np.zeros((n_out, n_knots))
    m[np.arange(n_out), lo] = 1 - frac
    m[np.arange(n_out), lo + 1] = frac
    return m


def render(knots: np.ndarray, length: int, bins: int) -> np.ndarray:
    return _interp_matrix(length, knots.shape[0]) @ knots @ _interp_matrix(bins, knots.shape[1]).T


class _Generator:
    FREQ_KNOTS = 12

    def __init__(self, spec: SynthCorpusSpec):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        lo, hi = spec.duration
        n = spec.n_classes + spec.extra_train_classes
        self.lengths = self.rng.integers(lo, hi + 1, size=n)
        self.templates = [self._knots(int(n)) for n in self.lengths]

    def _knots(self, length: int) -> np.ndarray:
        n_t = max(3, length // 8)
        return self.rng.standard_normal((n_t, self.FREQ_KNOTS)) * 1.5

    def keyword(self, word: int) -> np.ndarray:
        s = self.spec
        base = self.templates[word]
        length = int(round(self.lengths[word] * self.rng.uniform(1 - s.warp, 1 + s.warp)))
        knots = base + self.rng.standard_normal(base.shape) * s.jitter
        gain = self.rng.normal(0.0, 0.3)
        return render(knots, max(length, 2), s.bins) + gain

    def filler(self) -> np.ndarray:
        s = self.spec
        length = int(self.rng.integers(s.gap[0], s.gap[1] + 1))
        return render(self._knots(length), length, s.bins)

    def audio(self, words: list[int], audio_id: str) -> tuple[FeatureMatrix, list[LabelSpan]]:
        parts = [self.filler()]
        labels = []
        pos = parts[0].shape[0]
        for w in words:
            kw = self.keyword(w)
            labels.append(LabelSpan(audio_id, int(w), pos, pos + kw.shape[0]))
            pos += kw.shape[0]
            parts.append(kw)
            gap = self.filler()
            parts.append(gap)
            pos += gap.shape[0]
        frames = np.concatenate(parts, axis=0)
        frames = frames + self.rng.standard_normal(frames.shape) * self.spec.noise
        return FeatureMatrix(frames.astype(np.float32)), labels

    def split(self, prefix: str, words: list[int], per_audio: int) -> Split:
        out = Split()
        for k, start in enumerate(range(0, len(words), per_audio)):
            audio_id = f"{prefix}{k:04d}"
            fm, labels = self.audio(words[start : start + per_audio], audio_id)
            out.audios[audio_id] = fm
            out.labels.extend(labels)
        return out


def synthesize(spec: SynthCorpusSpec) -> Corpus:
    """Deterministic corpus for ``spec.seed``: train, queries and test splits."""
    gen = _Generator(spec)
    n = spec.n_classes
    extra = np.repeat(np.arange(n, n + spec.extra_train_classes), spec.extra_samples_per_class)
    train_words = list(gen.rng.permutation(np.concatenate([np.repeat(np.arange(n), spec.samples_per_class), extra])))
    query_words = list(gen.rng.permutation(np.repeat(np.arange(n), spec.templates_per_class)))
    test_words = list(gen.rng.integers(0, n, size=spec.n_test_audios * spec.keywords_per_audio))
    return Corpus(
        spec,
        {
            "train": gen.split("train", train_words, spec.keywords_per_train_audio),
            "queries": gen.split("query", query_words, spec.keywords_per_train_audio),
            "test": gen.split("test", test_words, spec.keywords_per_audio),
        },
    )


def save_corpus(root: str | Path, corpus: Corpus) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "corpus.json").write_text(json.dumps(asdict(corpus.spec), indent=1))
    for name, split in corpus.splits.items():
        save_split(root / name, split)


def save_split(root: str | Path, split: Split) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for audio_id, fm in split.audios.items():
        save_features(root / f"{audio_id}.f32", fm)
    (root / "labels.json").write_text(json.dumps([asdict(l) for l in split.labels], indent=1))


def load_split(root: str | Path) -> Split:
    root = Path(root)
    labels = [LabelSpan(**d) for d in json.loads((root / "labels.json").read_text())]
    audios = {}
    for path in sorted(root.glob("*.f32")):
        audios[path.name[: -len(".f32")]] = load_features(path)
    missing = {l.audio_id for l in labels} - audios.keys()
    if missing:
        raise FileNotFoundError(f"{root}: labels reference missing audio {sorted(missing)[:3]}")
    return Split(audios, labels)


def load_corpus(root: str | Path) -> Corpus:
    root = Path(root)
    spec = SynthCorpusSpec(**json.loads((root / "corpus.json").read_text()))
    return Corpus(spec, {name: load_split(root / name) for name in SPLITS if (root / name).exists()})
