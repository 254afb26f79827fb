"""Query enrollment and sliding-window keyword search.

Two scoring schemes produce the same score matrix for a fused, time-pad-free
model:

* basic: cut the fbank matrix into ``frames``-long windows every ``stride``
  frames and embed each window from scratch;
* fast: run the encoder once over the whole matrix and slide a
  ``hidden_frames``-long window over the hidden map every ``stride / C_r``
  hidden frames, running only the embedding head per window.

Scores are ``0.5 * cos + 0.5`` in [0, 1]. Post-processing runs in the fixed
order row z-normalisation -> per-row NMS -> threshold + cross-word argmax,
each stage switchable.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .features import FeatureMatrix, SegmentRef, temporal_context_pad
from .model import Model

CHUNK = 64


class EnrollmentError(ValueError):
    pass


class SearchConfigError(ValueError):
    pass


class AudioTooShortError(ValueError):
    pass


class FastSchemeError(ValueError):
    pass


@dataclass
class QueryEntry:
    word_id: int
    embedding: np.ndarray
    count: int
    avg_length: float


@dataclass
class QueryEmbeddingSet:
    entries: list[QueryEntry]

    def __post_init__(self):
        for e in self.entries:
            if e.avg_length <= 0:
                raise EnrollmentError(f"word {e.word_id}: average template length must be positive")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def word_ids(self) -> list[int]:
        return [e.word_id for e in self.entries]

    @property
    def avg_lengths(self) -> np.ndarray:
        return np.array([e.avg_length for e in self.entries])

    def matrix(self) -> np.ndarray:
        return np.stack([np.asarray(e.embedding, np.float64) for e in self.entries])

    def to_dict(self) -> dict:
        return {
            "words": [
                {
                    "word_id": e.word_id,
                    "embedding": np.asarray(e.embedding, float).tolist(),
                    "count": e.count,
                    "avg_length": e.avg_length,
                }
                for e in self.entries
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QueryEmbeddingSet":
        return cls(
            [
                QueryEntry(w["word_id"], np.asarray(w["embedding"], np.float64), w["count"], w["avg_length"])
                for w in d["words"]
            ]
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "QueryEmbeddingSet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def average_unit(embeddings: np.ndarray, word_id: int | None = None) -> np.ndarray:
    """Mean of the row-normalised embeddings, computed in float64."""
    e = np.asarray(embeddings, np.float64)
    norms = np.linalg.norm(e, axis=1)
    bad = np.nonzero(norms == 0)[0]
    if bad.size:
        raise EnrollmentError(f"word {word_id}: template {int(bad[0])} has a zero-norm embedding")
    avg = (e / norms[:, None]).mean(axis=0)
    if np.linalg.norm(avg) < 1e-6:
        raise EnrollmentError(f"word {word_id}: averaged template embeddings have (near) zero norm")
    return avg


def enroll(templates: dict[int, Sequence[SegmentRef]], model: Model) -> QueryEmbeddingSet:
    """Average unit embeddings of each word's context-padded templates."""
    entries = []
    for word_id in sorted(templates):
        segs = list(templates[word_id])
        if not segs:
            raise EnrollmentError(f"word {word_id} has no templates")
        x = np.stack([temporal_context_pad(s, model.frames).frames for s in segs])[:, None]
        emb = np.concatenate([model.embed(x[i : i + CHUNK]).data for i in range(0, len(x), CHUNK)])
        entries.append(
            QueryEntry(
                word_id,
                average_unit(emb, word_id),
                len(segs),
                float(np.mean([s.length for s in segs])),
            )
        )
    return QueryEmbeddingSet(entries)


@dataclass
class ScoreMatrix:
    values: np.ndarray
    word_ids: list[int]
    stride: int
    frames: int
    c_r: int
    num_frames: int
    normalized: bool = False

    @property
    def num_windows(self) -> int:
        return self.values.shape[1]

    @property
    def tail(self) -> int:
        """Frames after the last full window that no window covers."""
        return self.num_frames - ((self.num_windows - 1) * self.stride + self.frames)

    def start_frame(self, i: int) -> int:
        return i * self.stride

    def replace(self, values: np.ndarray, **kw) -> "ScoreMatrix":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(kw, values=values)
        return ScoreMatrix(**d)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        self.values.astype("<f4").tofile(path)
        header = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "values"}
        header["rows"], header["cols"] = self.values.shape
        path.with_name(path.name + ".json").write_text(json.dumps(header))


@dataclass
class SearchConfig:
    scheme: str = "basic"
    stride: int = 4
    threshold: float = 0.8
    tnorm: bool = False
    nms: bool = True
    compete: bool = True

    def __post_init__(self):
        if self.scheme not in ("basic", "fast"):
            raise SearchConfigError(f"scheme must be 'basic' or 'fast', got {self.scheme!r}")
        if self.stride < 1:
            raise SearchConfigError("stride must be >= 1")
        if not self.tnorm and not 0 <= self.threshold <= 1:
            raise SearchConfigError("threshold must lie in [0, 1] when tnorm is off")


@dataclass
class Detection:
    word_id: int
    start_frame: int
    end_frame: int
    score: float
    audio_id: str = ""
    det_id: int | None = None

    def __post_init__(self):
        if self.end_frame <= self.start_frame:
            raise ValueError("detection needs start < end")
        if not np.isfinite(self.score):
            raise ValueError("detection score must be finite")

    def to_json(self) -> str:
        d = {k: v for k, v in asdict(self).items() if k != "det_id"}
        return json.dumps(d)


def num_windows(num_frames: int, frames: int, stride: int) -> int:
    if num_frames < frames:
        raise AudioTooShortError(f"audio shorter than window: {num_frames} < {frames} frames")
    return (num_frames - frames) // stride + 1


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("SEPSPOT_THREADS", "1")))
    except ValueError:
        return 1


def _map_chunks(fn, n: int, chunk: int = CHUNK) -> np.ndarray:
    """Apply ``fn(start, stop)`` over ``range(n)`` in chunks; results kept in index order."""
    bounds = [(i, min(i + chunk, n)) for i in range(0, n, chunk)]
    workers = min(_workers(), len(bounds))
    if workers <= 1:
        return np.concatenate([fn(a, b) for a, b in bounds])
    with ThreadPoolExecutor(workers) as pool:
        return np.concatenate(list(pool.map(lambda ab: fn(*ab), bounds)))


def remap_cosine(windows: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """``0.5 * cos + 0.5`` for every (query, window) pair, shape [M, W].

    Evaluated as ``|u + v|^2 / 4`` on unit vectors, which equals the cosine
    remap and hits 0, 0.5 and 1 exactly for opposite, orthogonal and equal
    directions.
    """
    u = np.asarray(windows, np.float64)
    u = u / np.linalg.norm(u, axis=1, keepdims=True)
    v = np.asarray(queries, np.float64)
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    out = np.empty((v.shape[0], u.shape[0]))
    for i in range(0, u.shape[0], 1024):
        s = u[None, i : i + 1024, :] + v[:, None, :]
        out[:, i : i + 1024] = np.einsum("mwd,mwd->mw", s, s) / 4
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _scores(emb: np.ndarray, queries: QueryEmbeddingSet, model: Model, stride: int, n_frames: int) -> ScoreMatrix:
    return ScoreMatrix(
        remap_cosine(emb, queries.matrix()),
        queries.word_ids,
        stride,
        model.frames,
        model.c_r,
        n_frames,
    )


def score_basic(h: FeatureMatrix, queries: QueryEmbeddingSet, model: Model, stride: int) -> ScoreMatrix:
    """Embed every ``model.frames``-long window of ``h`` independently."""
    n = num_windows(h.num_frames, model.frames, stride)
    wins = sliding_window_view(h.frames, model.frames, axis=0)[::stride][:n]

    def run(a, b):
        x = np.ascontiguousarray(wins[a:b].transpose(0, 2, 1))[:, None]
        return model.embed(x).data

    return _scores(_map_chunks(run, n), queries, model, stride, h.num_frames)


def hidden_windows(hidden: np.ndarray, width: int, step: int, count: int) -> np.ndarray:
    """View of ``count`` windows of ``width`` hidden frames every ``step``: [W, C, width, F]."""
    if (count - 1) * step + width > hidden.shape[2]:
        raise AssertionError(
            f"hidden map of {hidden.shape[2]} frames cannot hold {count} windows of {width} every {step}"
        )
    v = sliding_window_view(hidden[0], width, axis=1)[:, ::step][:, :count]
    return v.transpose(1, 0, 3, 2)


def score_fast(
    h: FeatureMatrix,
    queries: QueryEmbeddingSet,
    model: Model,
    stride: int,
    allow_padded: bool = False,
) -> ScoreMatrix:
    """Run the encoder once, then slide the embedding head over the hidden map.

    ``allow_padded`` lets a time-padded encoder through for diagnostics; its
    scores then differ from :func:`score_basic` near every window edge.
    """
    enc = model.encoder
    if not allow_padded and (enc.form != "deploy" or enc.pad_time != "none"):
        raise FastSchemeError("fast scheme requires pad-free encoder (fused, pad_time=none)")
    if stride % enc.c_r:
        raise SearchConfigError(f"fast scheme needs stride a multiple of C_r={enc.c_r}, got {stride}")
    n = num_windows(h.num_frames, model.frames, stride)
    if enc.pad_time == "none":
        hidden = enc.forward_chunked(h.frames[None, None]).data
    else:
        hidden = enc(h.frames[None, None]).data
    wins = hidden_windows(hidden, model.hidden_frames, stride // enc.c_r, n)

    def run(a, b):
        return model.head(np.ascontiguousarray(wins[a:b])).data

    return _scores(_map_chunks(run, n), queries, model, stride, h.num_frames)


def score(h: FeatureMatrix, queries: QueryEmbeddingSet, model: Model, cfg: SearchConfig) -> ScoreMatrix:
    if cfg.scheme == "fast":
        return score_fast(h, queries, model, cfg.stride)
    return score_basic(h, queries, model, cfg.stride)


def tnorm_rows(c: ScoreMatrix) -> ScoreMatrix:
    """Z-score each word's row over the window axis (population std, floored at 1e-6)."""
    v = c.values.astype(np.float64)
    mu = v.mean(axis=1, keepdims=True)
    sd = np.sqrt(((v - mu) ** 2).mean(axis=1, keepdims=True))
    return c.replace(((v - mu) / np.maximum(sd, 1e-6)).astype(np.float32), normalized=True)


def nms_radius(avg_length: float, c_r: int) -> int:
    """Suppression radius in windows: average template length / C_r, half-up, at least 1."""
    return max(1, int(np.floor(avg_length / c_r + 0.5)))


def nms_row(row: np.ndarray, radius: int) -> np.ndarray:
    """Greedy 1-D NMS: keep the largest live value, zero everything closer than ``radius``."""
    out = np.zeros_like(row)
    alive = np.ones(row.size, dtype=bool)
    for i in np.lexsort((np.arange(row.size), -row)):
        if not alive[i]:
            continue
        out[i] = row[i]
        alive[max(0, i - radius + 1) : i + radius] = False
    return out


def nms(c: ScoreMatrix, queries: QueryEmbeddingSet) -> ScoreMatrix:
    lengths = dict(zip(queries.word_ids, queries.avg_lengths))
    out = np.stack(
        [nms_row(row, nms_radius(lengths[w], c.c_r)) for row, w in zip(c.values, c.word_ids)]
    ) if len(c.word_ids) else c.values.copy()
    return c.replace(out)


def detect(c: ScoreMatrix, threshold: float, compete: bool = True, audio_id: str = "") -> list[Detection]:
    """Detections for cells above ``threshold``.

    With ``compete`` only the best word per window survives (ties go to the
    earlier row); without it every word above threshold is reported.
    """
    active = c.values > threshold
    dets = []
    for i in np.nonzero(active.any(axis=0))[0]:
        rows = np.nonzero(active[:, i])[0]
        if compete:
            rows = rows[[int(np.argmax(c.values[rows, i]))]]
        start = c.start_frame(int(i))
        for r in rows:
            dets.append(
                Detection(c.word_ids[r], start, start + c.frames, float(c.values[r, i]), audio_id)
            )
    return dets


def postprocess(c: ScoreMatrix, queries: QueryEmbeddingSet, cfg: SearchConfig) -> ScoreMatrix:
    if cfg.tnorm:
        c = tnorm_rows(c)
    if cfg.nms:
        c = nms(c, queries)
    return c


def search(
    h: FeatureMatrix, queries: QueryEmbeddingSet, model: Model, cfg: SearchConfig, audio_id: str = ""
) -> list[Detection]:
    c = postprocess(score(h, queries, model, cfg), queries, cfg)
    return detect(c, cfg.threshold, cfg.compete, audio_id)


def write_detections(path: str | Path, dets: Iterable[Detection]) -> None:
    with open(path, "w") as fh:
        for d in dets:
            fh.write(d.to_json() + "\n")


def read_detections(path: str | Path) -> list[Detection]:
    out = []
    for i, line in enumerate(Path(path).read_text().splitlines()):
        if line.strip():
            out.append(Detection(**json.loads(line), det_id=i))
    return out
