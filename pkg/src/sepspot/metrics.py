"""Detection scoring: centre-distance overlap, overlap ratio, TP/FP/FN, MAO.

A prediction is eligible for a label when it has the same audio and word,
its centre lies within ``t`` frames of the label centre, and the two spans
actually intersect. Labels and predictions are then paired one-to-one: the
pairing maximises the number of true positives first and the summed overlap
ratio second, so each label keeps at most its best available prediction and a
prediction can only ever count once. Predictions left unpaired are false
positives, unpaired labels are false negatives.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass(frozen=True)
class LabelSpan:
    audio_id: str
    word_id: int
    start_frame: int
    end_frame: int

    def __post_init__(self):
        if self.end_frame <= self.start_frame:
            raise ValueError(f"label span must have start < end, got [{self.start_frame}, {self.end_frame})")


class SpanLike(Protocol):
    audio_id: str
    word_id: int
    start_frame: int
    end_frame: int


@dataclass
class EvalConfig:
    t: float | None = None

    def __post_init__(self):
        if self.t is not None and self.t < 0:
            raise ValueError("t must be >= 0")

    def threshold_for(self, label: SpanLike) -> float:
        """Fixed ``t`` if configured, otherwise half the label's own length."""
        if self.t is not None:
            return self.t
        return (label.end_frame - label.start_frame) / 2


def center(span: SpanLike) -> float:
    return (span.start_frame + span.end_frame) / 2


def overlap(label: SpanLike, pred: SpanLike, cfg: EvalConfig | None = None) -> bool:
    cfg = cfg or EvalConfig()
    return abs(center(label) - center(pred)) <= cfg.threshold_for(label)


def intersection(a: SpanLike, b: SpanLike) -> int:
    return max(0, min(a.end_frame, b.end_frame) - max(a.start_frame, b.start_frame))


def overlap_ratio(label: SpanLike, pred: SpanLike) -> float:
    return intersection(label, pred) / (label.end_frame - label.start_frame)


def eligible(label: SpanLike, pred: SpanLike, cfg: EvalConfig) -> bool:
    return (
        label.audio_id == pred.audio_id
        and label.word_id == pred.word_id
        and intersection(label, pred) > 0
        and overlap(label, pred, cfg)
    )


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    overlap_sum: float = 0.0

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    @property
    def mao(self) -> float:
        n = self.tp + self.fn
        return self.overlap_sum / n if n else 0.0

    def summary(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "mao": self.mao,
        }


@dataclass
class EvalReport(Counts):
    per_word: dict[int, Counts] = field(default_factory=dict)
    pairs: list[tuple[int, int, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = self.summary()
        d["per_word"] = {str(w): c.summary() for w, c in sorted(self.per_word.items())}
        return d


def _assign(labels: list[tuple[int, SpanLike]], preds: list[tuple[int, SpanLike]], cfg: EvalConfig):
    """Max-cardinality, then max total overlap-ratio pairing within one (audio, word) group."""
    nl, npred = len(labels), len(preds)
    ratio = np.zeros((nl, npred))
    ok = np.zeros((nl, npred), dtype=bool)
    for a, (_, l) in enumerate(labels):
        for b, (_, p) in enumerate(preds):
            if eligible(l, p, cfg):
                ok[a, b] = True
                ratio[a, b] = overlap_ratio(l, p)
    if not ok.any():
        return []
    rows, cols = np.nonzero(ok.any(axis=1))[0], np.nonzero(ok.any(axis=0))[0]
    sub_ok, sub_ratio = ok[np.ix_(rows, cols)], ratio[np.ix_(rows, cols)]
    # earlier-starting predictions win exact ratio ties
    order = np.argsort(np.argsort([preds[c][1].start_frame for c in cols], kind="stable"))
    tie = 1e-12 * (len(cols) - order) / max(len(cols), 1)
    weight = np.where(sub_ok, (nl + 1.0) + sub_ratio + tie[None, :], 0.0)
    r, c = linear_sum_assignment(weight, maximize=True)
    return [
        (labels[rows[i]][0], preds[cols[j]][0], float(sub_ratio[i, j]))
        for i, j in zip(r, c)
        if sub_ok[i, j]
    ]


def match(
    labels: Sequence[SpanLike], detections: Sequence[SpanLike], cfg: EvalConfig | None = None
) -> EvalReport:
    cfg = cfg or EvalConfig()
    ids = [getattr(d, "det_id", None) for d in detections]
    seen = [i for i in ids if i is not None]
    if len(seen) != len(set(seen)):
        raise ValueError("duplicate detection ids")

    groups: dict[tuple[str, int], tuple[list, list]] = defaultdict(lambda: ([], []))
    for i, l in enumerate(labels):
        groups[(l.audio_id, l.word_id)][0].append((i, l))
    for j, p in enumerate(detections):
        groups[(p.audio_id, p.word_id)][1].append((j, p))

    report = EvalReport()
    for (_, word), (gl, gp) in sorted(groups.items()):
        pairs = _assign(gl, gp, cfg) if gl and gp else []
        c = report.per_word.setdefault(word, Counts())
        c.tp += len(pairs)
        c.fn += len(gl) - len(pairs)
        c.fp += len(gp) - len(pairs)
        c.overlap_sum += sum(r for _, _, r in pairs)
        report.pairs.extend(pairs)
    for c in report.per_word.values():
        report.tp += c.tp
        report.fp += c.fp
        report.fn += c.fn
        report.overlap_sum += c.overlap_sum
    report.pairs.sort()
    return report


def format_table(rows: Iterable[tuple[float, Counts]], title: str = "") -> str:
    """Fixed-width threshold/precision/recall/F1/MAO table (values in percent)."""
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'Threshold':>10} {'Precision':>10} {'Recall':>8} {'F1':>6} {'MAO':>6}")
    for thr, c in rows:
        lines.append(
            f"{thr:>10.4g} {100 * c.precision:>10.1f} {100 * c.recall:>8.1f} "
            f"{100 * c.f1:>6.1f} {100 * c.mao:>6.1f}"
        )
    return "\n".join(lines)


def label_dicts(labels: Iterable[LabelSpan]) -> list[dict]:
    return [asdict(l) for l in labels]
