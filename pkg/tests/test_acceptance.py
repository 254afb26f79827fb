"""Acceptance criteria, one test per criterion.

Every test prints a single ``criterion N PASS|FAIL: ...`` line (also repeated in
the terminal summary) and then asserts at the stated tolerance.
"""

import time

import numpy as np

from conftest import ACCEPTANCE_LINES, random_block, randomize_encoder
from test_metrics import brute_force_match, random_case
from test_search import greedy_oracle

from sepspot.cli import run_bench
from sepspot.encoder import Encoder, EncoderConfig, fuse_block
from sepspot.features import FeatureMatrix
from sepspot.gradcheck import check_grad
from sepspot.head import attention_pool, penalization
from sepspot.metrics import EvalConfig, format_table, match
from sepspot.pipeline import best_row, default_thresholds, enroll_split, score_split, sweep
from sepspot.search import (
    ScoreMatrix,
    SearchConfig,
    detect,
    nms,
    nms_row,
    postprocess,
    remap_cosine,
    score_basic,
    score_fast,
    tnorm_rows,
)
from sepspot.tensor import ConvSpec, Tensor
from sepspot import tensor as T
from sepspot.training import amsoftmax_loss

FRAMES_PER_SECOND = 100


def verdict(n, ok, detail):
    line = f"criterion {n} {'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def spans(dets):
    return [(d.word_id, d.start_frame, d.end_frame) for d in dets]


def spliced_audio(split, n, rng):
    """``n`` frames stitched from random pieces of the split's recordings."""
    audios = list(split.audios.values())
    pieces, total = [], 0
    while total < n:
        src = audios[int(rng.integers(len(audios)))].frames
        a = int(rng.integers(0, src.shape[0] - 50))
        piece = src[a : a + int(rng.integers(50, 400))]
        pieces.append(piece)
        total += piece.shape[0]
    return FeatureMatrix(np.concatenate(pieces)[:n])


def test_criterion_1_fusion_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(100)
    worst_block = 0.0
    for i in range(100):
        cin = int(rng.integers(1, 6))
        cout = cin if i % 3 == 0 else int(rng.integers(1, 6))
        stride = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
        block = random_block(rng, cin, cout, stride, ["same", "none"][i % 2])
        x = Tensor(rng.standard_normal((2, cin, int(rng.integers(9, 20)), int(rng.integers(6, 12)))).astype(np.float32))
        worst_block = max(worst_block, float(np.max(np.abs(block(x).data - fuse_block(block)(x).data))))
    worst_enc = 0.0
    for i in range(10):
        n = int(rng.integers(2, 5))
        cfg = EncoderConfig(
            blocks=tuple(int(b) for b in rng.integers(1, 3, n)),
            channels=tuple(int(c) for c in rng.integers(2, 9, n)),
            time_strides=tuple(int(s) for s in rng.integers(1, 3, n)),
            freq_strides=(2,) + (1,) * (n - 1),
            pad_time=["same", "none"][i % 2],
        )
        enc = randomize_encoder(Encoder.init(cfg, seed=i), rng)
        x = rng.standard_normal((2, 1, 80, 60)).astype(np.float32)
        worst_enc = max(worst_enc, float(np.max(np.abs(enc(x).data - enc.fuse()(x).data))))
    seconds = time.perf_counter() - t0
    ok = worst_block <= 1e-4 and worst_enc <= 1e-4 and seconds < 60
    assert verdict(1, ok, f"max diff blocks {worst_block:.2e}, encoders {worst_enc:.2e} (<= 1e-4), {seconds:.1f}s")


def test_criterion_2_basic_fast_equivalence(trained_system):
    model = trained_system.retrained
    split = trained_system.corpus["test"]
    queries = enroll_split(trained_system.corpus["queries"], model)
    rng = np.random.default_rng(200)
    lengths = [model.frames, 120 * FRAMES_PER_SECOND] + [int(n) for n in rng.integers(model.frames, 12001, 18)]
    thresholds = (0.7, 0.8, 0.9)
    t0 = time.perf_counter()
    worst, same = 0.0, True
    for n in lengths:
        h = spliced_audio(split, n, rng)
        for stride in (model.c_r, 2 * model.c_r) if n <= 3000 else (model.c_r,):
            cb, cf = score_basic(h, queries, model, stride), score_fast(h, queries, model, stride)
            worst = max(worst, float(np.max(np.abs(cb.values - cf.values))))
            for cfg in (SearchConfig(stride=stride), SearchConfig(stride=stride, tnorm=True, threshold=3.0)):
                pb, pf = postprocess(cb, queries, cfg), postprocess(cf, queries, cfg)
                for thr in thresholds if not cfg.tnorm else (cfg.threshold,):
                    same &= spans(detect(pb, thr)) == spans(detect(pf, thr))
    seconds = time.perf_counter() - t0
    ok = worst <= 1e-4 and same and seconds < 120
    assert verdict(
        2, ok, f"{len(lengths)} audios up to {max(lengths)} frames: max cell diff {worst:.2e}, "
        f"detections identical {same}, {seconds:.1f}s"
    )


def test_criterion_3_padding_counterexample(trained_system):
    model = trained_system.fused
    h = spliced_audio(trained_system.corpus["test"], 600, np.random.default_rng(300))
    queries = enroll_split(trained_system.corpus["queries"], model)
    diff = np.abs(
        score_fast(h, queries, model, model.c_r, allow_padded=True).values
        - score_basic(h, queries, model, model.c_r).values
    ).max()
    assert verdict(3, diff > 1e-3, f"pad-same encoder: basic vs sliced-hidden scores differ by {diff:.3g} (> 1e-3)")


def test_criterion_4_gradient_checks():
    t0 = time.perf_counter()
    rng = np.random.default_rng(400)
    conv = ConvSpec(2, 3, (3, 3), (2, 1), "none", "same")
    labels = np.array([1, 0, 2])
    m_conv, m_bn, m_lin, m_pool = (rng.standard_normal(s) for s in ((2, 3, 3, 5), (4, 3, 2, 2), (3, 4), (2, 16)))
    checks = {
        "conv": check_grad(
            lambda x, w, b: T.conv2d(x, conv, w, b) * m_conv,
            [rng.standard_normal(s) for s in ((2, 2, 7, 5), (3, 2, 3, 3), (3,))],
        ),
        "batchnorm": check_grad(
            lambda x, g, b: T.batchnorm(x, g, b)[0] * m_bn,
            [rng.standard_normal(s) for s in ((4, 3, 2, 2), (3,), (3,))],
        ),
        "linear": check_grad(
            lambda x, w, b: T.linear(x, w, b) * m_lin,
            [rng.standard_normal(s) for s in ((3, 5), (4, 5), (4,))],
        ),
        "pooling": check_grad(
            lambda y, a: attention_pool(y, a) * m_pool,
            [rng.standard_normal((2, 4, 5, 2)), rng.standard_normal((2, 4))],
        ),
        "penalization": check_grad(penalization, [rng.standard_normal((3, 5))]),
        "am-softmax": check_grad(
            lambda f, w: amsoftmax_loss(f, labels, w, 30.0, 0.2),
            [rng.standard_normal((3, 6)), rng.standard_normal((6, 4))],
        ),
    }
    seconds = time.perf_counter() - t0
    ok = all(v <= 1e-3 for v in checks.values()) and seconds < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in checks.items())
    assert verdict(4, ok, f"worst relative error {detail} (<= 1e-3), {seconds:.1f}s")


def test_criterion_5_metric_and_nms_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(500)
    match_bad = 0
    for _ in range(1000):
        labels, preds = random_case(rng)
        cfg = EvalConfig(t=None if rng.random() < 0.5 else float(rng.integers(0, 40)))
        r = match(labels, preds, cfg)
        tp, fp, fn, s = brute_force_match(labels, preds, cfg)
        match_bad += (r.tp, r.fp, r.fn) != (tp, fp, fn) or abs(r.overlap_sum - s) > 1e-9
    nms_bad = 0
    for _ in range(1000):
        row = np.round(rng.uniform(0, 1, int(rng.integers(1, 40))), 2).astype(np.float32)
        radius = int(rng.integers(1, 8))
        nms_bad += not np.array_equal(nms_row(row, radius), greedy_oracle(row, radius))
    seconds = time.perf_counter() - t0
    ok = match_bad == 0 and nms_bad == 0 and seconds < 60
    assert verdict(5, ok, f"match mismatches {match_bad}/1000, NMS mismatches {nms_bad}/1000, {seconds:.1f}s")


def test_criterion_6_end_to_end_detection(trained_system):
    corpus = trained_system.corpus
    t0 = time.perf_counter()
    results = {}
    for scheme, model in (("basic", trained_system.fused), ("fast", trained_system.retrained)):
        cfg = SearchConfig(scheme=scheme, stride=4, tnorm=False, nms=True, compete=True)
        queries = enroll_split(corpus["queries"], model)
        scores = score_split(corpus["test"], queries, model, cfg)
        rows = sweep(corpus["test"], scores, default_thresholds(cfg.tnorm))
        results[scheme] = best_row(rows)
    seconds = trained_system.seconds + time.perf_counter() - t0
    print(format_table([(r.threshold, r.report) for r in results.values()], title="best threshold: basic, fast"))
    b, f = results["basic"].report, results["fast"].report
    gap = f.f1 - b.f1
    ok = min(b.f1, f.f1) >= 0.80 and min(b.mao, f.mao) >= 0.5 and abs(gap) <= 0.02 and seconds < 15 * 60
    assert verdict(
        6, ok, f"basic F1 {b.f1:.3f} MAO {b.mao:.3f} @ {results['basic'].threshold}, "
        f"fast F1 {f.f1:.3f} MAO {f.mao:.3f} @ {results['fast'].threshold}, gap {gap:+.3f} (|gap| <= 0.02), "
        f"{seconds / 60:.1f} min incl. training"
    )


def test_criterion_7_speedup_trend(trained_system):
    model = trained_system.retrained
    queries = enroll_split(trained_system.corpus["queries"], model)
    grid_f = (5 * FRAMES_PER_SECOND, 30 * FRAMES_PER_SECOND, 120 * FRAMES_PER_SECOND)
    grid_k = (1, 2, 4, 8)
    t0 = time.perf_counter()
    report = run_bench(model, queries, SearchConfig(stride=model.c_r), grid_f, grid_k, reps=5, seed=700)
    seconds = time.perf_counter() - t0
    for c in report.cells:
        print(f"F_H={c.f_h:>6} s_t={c.stride:>3} basic {c.basic_s:.3f}s fast {c.fast_s:.3f}s speedup {c.speedup:.1f}x")
    s = {(c.f_h, c.stride // model.c_r): c.speedup for c in report.cells}
    headline = s[(grid_f[-1], 1)]
    rising_f = all(s[(a, k)] <= s[(b, k)] for k in grid_k for a, b in zip(grid_f, grid_f[1:]))
    falling_k = all(s[(n, a)] >= s[(n, b)] for n in grid_f for a, b in zip(grid_k, grid_k[1:]))
    ok = headline >= 5 and rising_f and falling_k and seconds < 600
    assert verdict(
        7, ok, f"speedup {headline:.1f}x at F_H={grid_f[-1]}, s_t=C_r (>= 5x); non-decreasing in F_H {rising_f}; "
        f"non-increasing in s_t {falling_k}; {seconds:.0f}s"
    )


def test_criterion_8_closed_forms():
    am = float(amsoftmax_loss(Tensor(np.array([[1.0, 0.0]])), np.array([0]), Tensor(np.eye(2)), 30.0, 0.2).data)
    want = np.log1p(np.exp(-24.0))
    am_rel = abs(am - want) / want
    pen = float(penalization(np.array([[1.0, 0.0, 0.0], [0.0, 0.6, 0.8]])).data), float(penalization(np.eye(4)).data)
    e = np.array([[0.6, 0.8]])
    ends = remap_cosine(e, np.array([[0.6, 0.8], [-0.8, 0.6], [-0.6, -0.8]]))[:, 0].tolist()
    ok = am_rel <= 1e-12 and pen == (0.0, 0.0) and ends == [1.0, 0.5, 0.0]
    assert verdict(8, ok, f"AM-softmax rel err {am_rel:.1e} (<= 1e-12), penalization {pen}, endpoints {ends}")


def test_criterion_9_ablation_plumbing(trained_system):
    model = trained_system.retrained
    queries = enroll_split(trained_system.corpus["queries"], model)
    audio = next(iter(sorted(trained_system.corpus["test"].audios.items())))[1]
    raw = score_fast(audio, queries, model, model.c_r)

    toggles_ok = True
    for tnorm in (False, True):
        for use_nms in (False, True):
            cfg = SearchConfig(threshold=1.0 if tnorm else 0.8, tnorm=tnorm, nms=use_nms)
            want = tnorm_rows(raw) if tnorm else raw
            want = nms(want, queries) if use_nms else want
            got = postprocess(raw, queries, cfg)
            toggles_ok &= np.array_equal(got.values, want.values)
            every = detect(got, cfg.threshold, compete=False)
            best = detect(got, cfg.threshold, compete=True)
            toggles_ok &= len(best) == len({d.start_frame for d in every}) and len(best) <= len(every)

    rng = np.random.default_rng(900)
    cfg = SearchConfig(threshold=1.5, tnorm=True)
    invariant = True
    trials = 0
    for values in [raw.values] + [rng.uniform(0, 1, raw.values.shape).astype(np.float32) for _ in range(50)]:
        c = ScoreMatrix(values, raw.word_ids, raw.stride, raw.frames, raw.c_r, raw.num_frames)
        scale = rng.uniform(0.25, 4.0, (values.shape[0], 1))
        shift = rng.uniform(-1.0, 1.0, (values.shape[0], 1))
        shifted = c.replace((values * scale + shift).astype(np.float32))
        a = detect(postprocess(c, queries, cfg), cfg.threshold)
        b = detect(postprocess(shifted, queries, cfg), cfg.threshold)
        invariant &= spans(a) == spans(b)
        trials += 1
    ok = toggles_ok and invariant
    assert verdict(
        9, ok, f"tnorm/nms/compete toggles compose independently {toggles_ok}; "
        f"detections unchanged under per-row affine shifts with tnorm on {invariant} ({trials} matrices)"
    )
