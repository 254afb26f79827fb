"""Corpus-level glue: enroll from a split, score a split, sweep thresholds."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .features import SegmentRef
from .metrics import Counts, EvalConfig, EvalReport, match
from .model import Model
from .search import (
    Detection,
    QueryEmbeddingSet,
    ScoreMatrix,
    SearchConfig,
    detect,
    enroll,
    postprocess,
    score,
)
from .synth import Split


def templates_from_split(split: Split) -> dict[int, list[SegmentRef]]:
    out: dict[int, list[SegmentRef]] = defaultdict(list)
    for l in split.labels:
        out[l.word_id].append(SegmentRef(split.audios[l.audio_id], l.start_frame, l.end_frame))
    return dict(out)


def enroll_split(split: Split, model: Model) -> QueryEmbeddingSet:
    return enroll(templates_from_split(split), model)


def score_split(
    split: Split, queries: QueryEmbeddingSet, model: Model, cfg: SearchConfig
) -> dict[str, ScoreMatrix]:
    """Post-processed score matrix per audio (threshold not yet applied)."""
    return {
        audio_id: postprocess(score(fm, queries, model, cfg), queries, cfg)
        for audio_id, fm in sorted(split.audios.items())
    }


def detections_at(scores: dict[str, ScoreMatrix], threshold: float, compete: bool = True) -> list[Detection]:
    dets = []
    for audio_id, c in scores.items():
        dets.extend(detect(c, threshold, compete, audio_id))
    return dets


@dataclass
class SweepRow:
    threshold: float
    report: EvalReport


def sweep(
    split: Split,
    scores: dict[str, ScoreMatrix],
    thresholds,
    eval_cfg: EvalConfig | None = None,
    compete: bool = True,
) -> list[SweepRow]:
    return [
        SweepRow(float(t), match(split.labels, detections_at(scores, float(t), compete), eval_cfg))
        for t in thresholds
    ]


def best_row(rows: list[SweepRow]) -> SweepRow:
    """Highest F1; ties go to the lower threshold."""
    return max(rows, key=lambda r: (r.report.f1, -r.threshold))


def default_thresholds(tnorm: bool) -> np.ndarray:
    if tnorm:
        return np.round(np.arange(0.0, 12.0001, 0.1), 4)
    return np.round(np.arange(0.5, 1.0, 0.0025), 4)


def table_rows(rows: list[SweepRow]) -> list[tuple[float, Counts]]:
    return [(r.threshold, r.report) for r in rows]
