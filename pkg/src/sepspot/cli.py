"""``sepspot`` command line: synth, train, fuse, retrain, enroll, search, eval, bench.

Every command reads one JSON run config (``--config``); flags override the
matching config values. Artifacts live under ``paths.workdir`` unless a
command gets ``--out``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import statistics
import sys
import time
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, create_model

from .encoder import EncoderConfig
from .features import FeatureMatrix
from .metrics import EvalConfig, format_table, match
from .model import Model, load_model, save_model
from .search import (
    QueryEmbeddingSet,
    QueryEntry,
    SearchConfig,
    detect,
    num_windows,
    postprocess,
    read_detections,
    score,
    search,
    write_detections,
)
from .synth import SynthCorpusSpec, load_split, save_corpus, synthesize
from .training import TrainConfig, retrain_embedding, train
from .pipeline import enroll_split

log = logging.getLogger("sepspot")

SECONDS_TO_FRAMES = 100  # 10 ms frame shift


class CliError(RuntimeError):
    pass


# --- run config -----------------------------------------------------------------------


@dataclass
class ModelSection:
    n_heads: int = 4
    dim: int = 128


@dataclass
class RetrainSection:
    method: int = 2
    frames: int | None = None
    head_dim: int | None = None
    epochs: int = 10
    lr: float = 1e-3


@dataclass
class BenchSection:
    f_h: tuple[int, ...] = (5 * SECONDS_TO_FRAMES, 30 * SECONDS_TO_FRAMES, 120 * SECONDS_TO_FRAMES)
    stride_multiples: tuple[int, ...] = (1, 2, 4, 8)
    reps: int = 3
    n_queries: int = 10

    def __post_init__(self):
        if self.reps < 3:
            raise ValueError("bench needs at least 3 repetitions per cell")
        if not self.f_h or not self.stride_multiples or min(self.stride_multiples) < 1:
            raise ValueError("bench grid must be non-empty with stride multiples >= 1")


@dataclass
class PathsSection:
    workdir: str = "run"
    corpus: str = "corpus"
    model: str = "model.json"
    fused: str = "fused.json"
    retrained: str = "retrained.json"
    queries: str = "queries.json"
    detections: str = "detections.jsonl"
    report: str = "report.json"
    bench: str = "bench.json"

    def resolve(self, name: str) -> Path:
        p = Path(getattr(self, name))
        return p if p.is_absolute() else Path(self.workdir) / p


SECTIONS = {
    "corpus": SynthCorpusSpec,
    "encoder": EncoderConfig,
    "model": ModelSection,
    "train": TrainConfig,
    "retrain": RetrainSection,
    "search": SearchConfig,
    "eval": EvalConfig,
    "bench": BenchSection,
    "paths": PathsSection,
}
# the run-level seed feeds these fields, so they are not settable per section
SEEDED = {"corpus": "seed", "train": "seed"}


def _schema(name: str, cls) -> type[BaseModel]:
    hints = typing.get_type_hints(cls)
    fields = {
        f.name: (hints[f.name], f.default)
        for f in dataclasses.fields(cls)
        if f.name != SEEDED.get(name)
    }
    return create_model(f"{cls.__name__}Schema", __config__=ConfigDict(extra="forbid", strict=False), **fields)


RunSchema = create_model(
    "RunSchema",
    __config__=ConfigDict(extra="forbid"),
    seed=(int, 0),
    **{name: (_schema(name, cls), None) for name, cls in SECTIONS.items()},
)


@dataclass
class RunConfig:
    seed: int = 0
    corpus: SynthCorpusSpec = field(default_factory=SynthCorpusSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    retrain: RetrainSection = field(default_factory=RetrainSection)
    search: SearchConfig = field(default_factory=SearchConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchSection = field(default_factory=BenchSection)
    paths: PathsSection = field(default_factory=PathsSection)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        """Validate against the schema (unknown keys rejected), then build."""
        try:
            parsed = RunSchema.model_validate(d)
        except ValidationError as e:
            raise CliError(f"invalid config: {e}") from None
        kw = {"seed": parsed.seed}
        for name, klass in SECTIONS.items():
            section = getattr(parsed, name)
            values = section.model_dump() if section is not None else {}
            if name in SEEDED:
                values[SEEDED[name]] = parsed.seed
            try:
                kw[name] = klass(**values)
            except (TypeError, ValueError) as e:
                raise CliError(f"invalid config section {name!r}: {e}") from None
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls.from_dict({})
        path = Path(path)
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as e:
            raise CliError(f"{path}: not valid JSON: {e}") from None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for name, key in SEEDED.items():
            d[name].pop(key)
        return d


def apply_flags(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Flags win over config values."""
    if args.seed is not None:
        cfg = RunConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    overrides = {
        k: v
        for k, v in {
            "scheme": args.scheme,
            "stride": args.stride,
            "threshold": args.threshold,
            "tnorm": _on_off(args.tnorm),
            "nms": _on_off(args.nms),
            "compete": _on_off(args.compete),
        }.items()
        if v is not None
    }
    if overrides:
        cfg = replace(cfg, search=replace(cfg.search, **overrides))
    return cfg


def _on_off(v: str | None) -> bool | None:
    return None if v is None else v == "on"


# --- commands -----------------------------------------------------------------------------


def _out(cfg: RunConfig, args, name: str) -> Path:
    path = Path(args.out) if args.out else cfg.paths.resolve(name)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError(f"{what} not found: {path}")
    return path


def _load_model(cfg: RunConfig, args, default: str) -> tuple[Model, Path]:
    path = Path(args.model) if getattr(args, "model", None) else cfg.paths.resolve(default)
    return load_model(_require(path, "model")), path


def _search_model_name(cfg: RunConfig) -> str:
    return "retrained" if cfg.search.scheme == "fast" else "fused"


def cmd_synth(cfg: RunConfig, args) -> dict:
    root = Path(args.out) if args.out else cfg.paths.resolve("corpus")
    corpus = synthesize(cfg.corpus)
    save_corpus(root, corpus)
    return {"corpus": str(root), **{k: len(s.labels) for k, s in corpus.splits.items()}}


def cmd_train(cfg: RunConfig, args) -> dict:
    split = load_split(_require(cfg.paths.resolve("corpus") / "train", "train split"))
    model = Model.init(
        cfg.encoder, frames=cfg.train.frames, n_heads=cfg.model.n_heads, dim=cfg.model.dim, seed=cfg.seed
    )
    result = train(split, model, cfg.train)
    out = _out(cfg, args, "model")
    save_model(out, model, {"history": result.to_dict()["history"]})
    last = result.history[-1] if result.history else None
    return {"model": str(out), "epochs": len(result.history), "valid_acc": last.valid_acc if last else None}


def cmd_fuse(cfg: RunConfig, args) -> dict:
    model, _ = _load_model(cfg, args, "model")
    out = _out(cfg, args, "fused")
    save_model(out, model.fuse())
    return {"model": str(out)}


def cmd_retrain(cfg: RunConfig, args) -> dict:
    model, _ = _load_model(cfg, args, "fused")
    split = load_split(_require(cfg.paths.resolve("corpus") / "train", "train split"))
    r = cfg.retrain
    tc = replace(cfg.train, epochs=r.epochs, lr=r.lr, frames=r.frames or model.frames)
    result = retrain_embedding(model, split, tc, method=r.method, frames=r.frames, head_dim=r.head_dim)
    out = _out(cfg, args, "retrained")
    save_model(out, result.model, {"method": r.method, "encoder_digest": result.encoder_digest})
    return {"model": str(out), "method": r.method, "encoder_digest": result.encoder_digest}


def cmd_enroll(cfg: RunConfig, args) -> dict:
    model, model_path = _load_model(cfg, args, _search_model_name(cfg))
    split = load_split(_require(cfg.paths.resolve("corpus") / "queries", "queries split"))
    queries = enroll_split(split, model)
    out = _out(cfg, args, "queries")
    out.write_text(json.dumps({"model": str(model_path), **queries.to_dict()}))
    return {"queries": str(out), "words": len(queries)}


def cmd_search(cfg: RunConfig, args) -> dict:
    model, model_path = _load_model(cfg, args, _search_model_name(cfg))
    qpath = _require(cfg.paths.resolve("queries"), "query embeddings")
    qdict = json.loads(qpath.read_text())
    if qdict.get("model") not in (None, str(model_path)):
        raise CliError(f"queries were enrolled with {qdict['model']}, searching with {model_path}")
    queries = QueryEmbeddingSet.from_dict(qdict)
    split = load_split(_require(cfg.paths.resolve("corpus") / "test", "test split"))
    dets = []
    for audio_id, fm in sorted(split.audios.items()):
        dets.extend(search(fm, queries, model, cfg.search, audio_id))
    out = _out(cfg, args, "detections")
    write_detections(out, dets)
    return {"detections": str(out), "count": len(dets), "scheme": cfg.search.scheme}


def cmd_eval(cfg: RunConfig, args) -> dict:
    split = load_split(_require(cfg.paths.resolve("corpus") / "test", "test split"))
    dets = read_detections(_require(cfg.paths.resolve("detections"), "detections"))
    report = match(split.labels, dets, cfg.eval)
    out = _out(cfg, args, "report")
    d = report.to_dict()
    d["threshold"] = cfg.search.threshold
    out.write_text(json.dumps(d, indent=1))
    print(format_table([(cfg.search.threshold, report)]), file=sys.stderr)
    return {"report": str(out), **report.summary()}


# --- bench ----------------------------------------------------------------------------------


@dataclass
class BenchCell:
    f_h: int
    stride: int
    windows: int
    tail: int
    basic_s: float
    fast_s: float

    @property
    def speedup(self) -> float:
        return self.basic_s / self.fast_s

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["speedup"] = self.speedup
        d["basic_windows_per_s"] = self.windows / self.basic_s
        d["fast_windows_per_s"] = self.windows / self.fast_s
        return d


@dataclass
class BenchReport:
    c_r: int
    frames: int
    reps: int
    cells: list[BenchCell]

    def cell(self, f_h: int, stride: int) -> BenchCell:
        return next(c for c in self.cells if c.f_h == f_h and c.stride == stride)

    def to_dict(self) -> dict:
        return {
            "c_r": self.c_r,
            "frames": self.frames,
            "reps": self.reps,
            "cells": [c.to_dict() for c in self.cells],
        }


class BenchMismatchError(RuntimeError):
    pass


def random_queries(model: Model, n: int, seed: int) -> QueryEmbeddingSet:
    rng = np.random.default_rng(seed)
    return QueryEmbeddingSet(
        [QueryEntry(w, rng.standard_normal(model.head.dim), 1, model.frames / 2) for w in range(n)]
    )


def _spans(dets) -> list[tuple[int, int, int]]:
    return [(d.word_id, d.start_frame, d.end_frame) for d in dets]


def _median_times(fns, reps: int) -> list[float]:
    """Median wall time of each callable.

    Repetitions run round-robin over all callables so that slow phases of the
    machine hit every cell alike instead of skewing whichever cell was running.
    """
    times = [[] for _ in fns]
    for _ in range(reps):
        for fn, out in zip(fns, times):
            t0 = time.perf_counter()
            fn()
            out.append(time.perf_counter() - t0)
    return [statistics.median(t) for t in times]


def run_bench(
    model: Model,
    queries: QueryEmbeddingSet,
    search_cfg: SearchConfig,
    f_h: typing.Sequence[int],
    stride_multiples: typing.Sequence[int],
    reps: int = 3,
    seed: int = 0,
    audios: dict[int, FeatureMatrix] | None = None,
) -> BenchReport:
    """Median search time of both schemes over an (F_H, s_t) grid.

    Every cell is first checked for agreement between the two schemes (scores
    within 1e-4, identical detections); any disagreement aborts the bench
    before a single timing is taken. Timing then sweeps the whole grid once
    per repetition.
    """
    rng = np.random.default_rng(seed)
    bins = model.encoder.config.in_bins
    prev = os.environ.get("SEPSPOT_THREADS")
    os.environ["SEPSPOT_THREADS"] = "1"
    grid = []
    try:
        for n in f_h:
            fm = (audios or {}).get(n)
            if fm is None:
                fm = FeatureMatrix(rng.standard_normal((n, bins)).astype(np.float32))
            for k in stride_multiples:
                stride = k * model.c_r
                basic = replace(search_cfg, scheme="basic", stride=stride)
                fast = replace(search_cfg, scheme="fast", stride=stride)
                cb, cf = score(fm, queries, model, basic), score(fm, queries, model, fast)
                diff = float(np.max(np.abs(cb.values - cf.values)))
                db = detect(postprocess(cb, queries, basic), basic.threshold, basic.compete)
                df = detect(postprocess(cf, queries, fast), fast.threshold, fast.compete)
                if diff > 1e-4 or _spans(db) != _spans(df):
                    raise BenchMismatchError(
                        f"schemes disagree at F_H={n}, stride={stride}: max score diff {diff:.3g}, "
                        f"{len(db)} vs {len(df)} detections"
                    )
                grid.append((n, stride, cb, fm, basic, fast))
        fns = []
        for _, _, _, fm, basic, fast in grid:
            fns.append(lambda fm=fm, cfg=basic: search(fm, queries, model, cfg))
            fns.append(lambda fm=fm, cfg=fast: search(fm, queries, model, cfg))
        medians = _median_times(fns, reps)
    finally:
        if prev is None:
            os.environ.pop("SEPSPOT_THREADS", None)
        else:
            os.environ["SEPSPOT_THREADS"] = prev
    cells = []
    for i, (n, stride, cb, _, _, _) in enumerate(grid):
        cell = BenchCell(n, stride, cb.num_windows, cb.tail, medians[2 * i], medians[2 * i + 1])
        log.info("F_H=%d stride=%d basic %.3fs fast %.3fs speedup %.1fx", n, stride, cell.basic_s, cell.fast_s, cell.speedup)
        cells.append(cell)
    return BenchReport(model.c_r, model.frames, reps, cells)


def cmd_bench(cfg: RunConfig, args) -> dict:
    model, _ = _load_model(cfg, args, "retrained")
    qpath = cfg.paths.resolve("queries")
    if qpath.exists():
        queries = QueryEmbeddingSet.from_dict(json.loads(qpath.read_text()))
    else:
        queries = random_queries(model, cfg.bench.n_queries, cfg.seed)
    for n in cfg.bench.f_h:
        num_windows(n, model.frames, model.c_r)
    report = run_bench(
        model, queries, cfg.search, cfg.bench.f_h, cfg.bench.stride_multiples, cfg.bench.reps, cfg.seed
    )
    out = _out(cfg, args, "bench")
    out.write_text(json.dumps(report.to_dict(), indent=1))
    for c in report.cells:
        print(
            f"F_H={c.f_h:>6} stride={c.stride:>3} windows={c.windows:>5} tail={c.tail:>3} "
            f"basic={c.basic_s:.4f}s fast={c.fast_s:.4f}s speedup={c.speedup:.1f}x",
            file=sys.stderr,
        )
    return {"bench": str(out), "cells": len(report.cells)}


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "fuse": cmd_fuse,
    "retrain": cmd_retrain,
    "enroll": cmd_enroll,
    "search": cmd_search,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--scheme", choices=("basic", "fast"))
    common.add_argument("--stride", type=int)
    common.add_argument("--threshold", type=float)
    common.add_argument("--tnorm", choices=("on", "off"))
    common.add_argument("--nms", choices=("on", "off"))
    common.add_argument("--compete", choices=("on", "off"))
    common.add_argument("--out", help="output path (overrides paths.* for this command)")
    common.add_argument("--seed", type=int)
    common.add_argument("--model", help="model manifest to read instead of the configured one")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="sepspot", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=fn.__name__[4:])
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = apply_flags(RunConfig.load(args.config), args)
        result = COMMANDS[args.command](cfg, args)
    except Exception as e:  # every failure becomes a one-line diagnostic and exit 1
        print(f"sepspot {args.command}: error: {e}", file=sys.stderr)
        return 1
    print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
