"""End-to-end acceptance checks, one group per criterion.

The terminal summary prints one PASS/FAIL line per criterion.  Criteria 5
and 6 share one synthetic corpus of 2,000 images and take several minutes.
"""
import time

import numpy as np
import pytest
from scipy import stats

from mlsp.augment import views
from mlsp.backbone import INCEPTION_RESNET_V2, INCEPTION_V3
from mlsp.cli import main
from mlsp.heads import (build_pool_3fc, build_resolution_baseline, build_single_3fc,
                        resolution_inputs)
from mlsp.metrics import binary_accuracy, evaluate, plcc, srcc
from mlsp.nn import forward, grad_check
from mlsp.pipeline import SyntheticBackbone, extract_features
from mlsp.pooling import area_resize, pool
from mlsp.store import (FeatureStore, InMemoryFeatures, StoreHeader, StoreWriter, fp16_decode,
                        fp16_encode)
from mlsp.synthetic import generate_corpus
from mlsp.trainer import LabelTable, TrainConfig, train
from test_heads import HEAD_NAMES, gradient_draws
from test_metrics import ref_pearson, ref_ranks
from test_nn import LAYER_CASES, _layer_case
from test_trainer import run_schedule

N_IMAGES = 2000
HELD_OUT = 500
BUDGET_S = 15 * 60


def criterion(n, title):
    return pytest.mark.criterion(n, title)


# 1 ---------------------------------------------------------------------------------

@criterion(1, "gradient correctness, every layer kind and head")
def test_gradients_all_layers_and_heads(note):
    t = time.perf_counter()
    worst = {}
    for kind in LAYER_CASES:
        errs = []
        for seed in range(100):
            g, x = _layer_case(kind, np.random.default_rng([seed, LAYER_CASES.index(kind)]))
            errs.append(grad_check(g, x, seed=seed, check_input=True))
        worst[kind] = max(errs)
    for name in HEAD_NAMES:
        worst[name] = max(gradient_draws(name))
    elapsed = time.perf_counter() - t
    note(f"max error {max(worst.values()):.2e}, {elapsed:.0f} s")
    assert max(worst.values()) < 1e-4, worst
    assert elapsed < 120


# 2 ---------------------------------------------------------------------------------

def brute_area(block, out_h, out_w):
    """Fractional coverage computed cell by cell in real coordinates."""
    h, w, c = block.shape
    out = np.zeros((out_h, out_w, c))
    for i in range(out_h):
        y0, y1 = i * h / out_h, (i + 1) * h / out_h
        for j in range(out_w):
            x0, x1 = j * w / out_w, (j + 1) * w / out_w
            acc = np.zeros(c)
            for p in range(int(y0), min(h, int(np.ceil(y1)))):
                fy = min(y1, p + 1) - max(y0, p)
                for q in range(int(x0), min(w, int(np.ceil(x1)))):
                    fx = min(x1, q + 1) - max(x0, q)
                    acc += fy * fx * block[p, q]
            out[i, j] = acc / ((y1 - y0) * (x1 - x0))
    return out


@criterion(2, "pooling oracle")
def test_area_resize_oracle(note):
    t = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(200):
        h, w = (int(v) for v in rng.integers(1, 24, size=2))
        oh, ow = (int(v) for v in rng.integers(1, 12, size=2))
        x = rng.normal(size=(h, w, int(rng.integers(1, 5)))).astype(np.float32)
        worst = max(worst, np.abs(area_resize(x, oh, ow) - brute_area(x, oh, ow)).max())
    # integer cells make every mean exactly representable
    for kh, kw, oh, ow in ((2, 2, 5, 5), (7, 1, 5, 3), (3, 4, 2, 6), (1, 1, 5, 5)):
        x = (rng.integers(-50, 50, size=(kh * oh, kw * ow, 3)) * kh * kw).astype(np.float32)
        out = area_resize(x, oh, ow).astype(np.float64)
        assert np.array_equal(out.mean(axis=(0, 1)), x.astype(np.float64).mean(axis=(0, 1)))
    elapsed = time.perf_counter() - t
    note(f"max abs error {worst:.1e}, {elapsed:.1f} s")
    assert worst < 1e-6
    assert elapsed < 30


# 3 ---------------------------------------------------------------------------------

@criterion(3, "feature dimensionality anchors")
def test_dimensionality_anchors():
    assert INCEPTION_V3.total == 10048 and INCEPTION_V3.n_blocks == 11
    assert INCEPTION_RESNET_V2.total == 16928 and INCEPTION_RESNET_V2.n_blocks == 43
    for prof in (INCEPTION_V3, INCEPTION_RESNET_V2):
        assert StoreHeader("narrow", prof.total, 8).record_values == prof.total
        assert StoreHeader("wide", prof.total, 1).record_values == 25 * prof.total
    img = next(generate_corpus(1, seed=0)).pixels
    acts = SyntheticBackbone().activations(img, None)
    assert pool(acts, "narrow").values.size == 10048
    assert pool(acts, "wide").values.shape == (5, 5, 10048)


# 4 ---------------------------------------------------------------------------------

@criterion(4, "fp16 container")
def test_fp16_container(tmp_path, note):
    t = time.perf_counter()
    pats = np.arange(65536, dtype=np.uint16)
    vals = fp16_decode(pats)
    finite = np.isfinite(vals)
    bits, over = fp16_encode(vals[finite])
    assert over == 0 and np.array_equal(bits, pats[finite])

    rng = np.random.default_rng(4)
    mags = np.exp2(rng.uniform(-14, 15.99, size=200_000))
    x = (mags * rng.choice([-1, 1], size=mags.size)).astype(np.float32)
    back = fp16_decode(fp16_encode(x)[0]).astype(np.float64)
    rel = np.abs(back - x) / np.abs(x)
    assert rel.max() <= 2.0 ** -11

    feats = rng.normal(scale=3, size=(6, 8, 37)).astype(np.float32)
    path = tmp_path / "s.mlsp"
    with StoreWriter(path, "narrow", 37, 8) as w:
        for i, f in enumerate(feats):
            w.append(10 + i, list(f))
    with FeatureStore(str(path)) as st:
        for i in (3, 0, 5):
            for a in (7, 0):
                want = fp16_decode(fp16_encode(feats[i, a])[0])
                assert np.array_equal(st.read(10 + i, a).values.ravel(), want)
    elapsed = time.perf_counter() - t
    note(f"max relative error {rel.max():.2e}, {elapsed:.1f} s")
    assert elapsed < 10


# 5, 6 -------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def task(tmp_path_factory):
    """2,000 synthetic images with fp32 narrow features in memory, the same
    features in an fp16 store, and an unaugmented wide store."""
    t = time.perf_counter()
    d = tmp_path_factory.mktemp("task")
    items = list(generate_corpus(N_IMAGES, seed=0))
    labels = LabelTable({it.image_id: it.mos for it in items})
    bb = SyntheticBackbone("inception-v3", seed=0)
    ids = np.array([it.image_id for it in items])
    narrow32 = np.empty((N_IMAGES, 8, INCEPTION_V3.total), np.float32)
    with StoreWriter(d / "narrow8.mlsp", "narrow", INCEPTION_V3.total, 8, "inception-v3") as w:
        for k, it in enumerate(items):
            for a, v in enumerate(views(8)):
                narrow32[k, a] = pool(bb.activations(it.pixels, v), "narrow").values
            w.append(it.image_id, list(narrow32[k]))
    extract_features([(it.image_id, it.pixels) for it in items], bb, "wide", 1,
                     str(d / "wide1.mlsp"))
    yield {"labels": labels, "train": ids[:-HELD_OUT], "held": ids[-HELD_OUT:],
           "narrow32": InMemoryFeatures(ids, narrow32, "narrow"),
           "narrow16": FeatureStore(str(d / "narrow8.mlsp")),
           "wide": FeatureStore(str(d / "wide1.mlsp")),
           "seconds": time.perf_counter() - t}
    (d / "wide1.mlsp").unlink()


def run_single(task, source):
    t = time.perf_counter()
    model = build_single_3fc("inception-v3", x=512, seed=1)
    train(model, source, task["labels"], TrainConfig(batch_size=128, max_epochs=40, seed=1),
          ids=task["train"])
    return evaluate(model, source, task["labels"], ids=task["held"]), time.perf_counter() - t


@pytest.fixture(scope="module")
def single16(task):
    return run_single(task, task["narrow16"])


@pytest.mark.slow
@criterion(5, "synthetic end-to-end recovery")
def test_synthetic_recovery(task, single16, note):
    single, single_s = single16
    t = time.perf_counter()
    model = build_pool_3fc("inception-v3", kernels=64, x=256, seed=1)
    train(model, task["wide"], task["labels"], TrainConfig(batch_size=32, max_epochs=25, seed=1),
          ids=task["train"])
    pooled = evaluate(model, task["wide"], task["labels"], ids=task["held"])
    total = task["seconds"] + single_s + time.perf_counter() - t
    note(f"Single-3FC {single.srcc:.4f}, Pool-3FC {pooled.srcc:.4f}, {total:.0f} s")
    assert single.n == pooled.n == HELD_OUT
    assert single.srcc >= 0.90
    assert pooled.srcc >= single.srcc - 0.02
    assert total < BUDGET_S


@pytest.mark.slow
@criterion(6, "fp16 vs fp32 storage neutrality")
def test_fp16_storage_neutral(task, single16, note):
    fp16, _ = single16
    fp32, _ = run_single(task, task["narrow32"])
    note(f"SRCC fp16 {fp16.srcc:.4f}, fp32 {fp32.srcc:.4f}")
    assert abs(fp16.srcc - fp32.srcc) < 0.005


# 7 ---------------------------------------------------------------------------------

@criterion(7, "schedule conformance")
def test_schedule_conformance():
    lrs, states = run_schedule([10.0 - 0.01 * e for e in range(50)])
    assert lrs[:20] == [1e-4] * 20 and lrs[20] == pytest.approx(1e-5)
    lrs, states = run_schedule([5.0, 4.0] + [4.5] * 10)
    assert lrs[:7] == [1e-4] * 7 and lrs[7] == pytest.approx(1e-5)
    lrs, states = run_schedule([5.0] + [6.0] * 100)
    assert min(lrs) == pytest.approx(1e-6) and states[-1].stop
    _, states = run_schedule([5.0, 4.0] + [4.5] * 30 + [3.0] * 10)
    assert all(s.reload for s in states if s.dropped)


# 8 ---------------------------------------------------------------------------------

@criterion(8, "metric oracles")
def test_metric_oracles():
    rng = np.random.default_rng(8)
    for ties in (False, True):
        if ties:
            x = rng.integers(0, 20, size=1000).astype(float)
            y = rng.integers(0, 10, size=1000) + 0.3 * x
        else:
            x = rng.normal(size=1000)
            y = 0.4 * x + rng.normal(size=1000)
        assert abs(plcc(x, y) - ref_pearson(x, y)) < 1e-12
        assert abs(srcc(x, y) - ref_pearson(ref_ranks(x), ref_ranks(y))) < 1e-12
        assert abs(srcc(x, y) - stats.spearmanr(x, y).statistic) < 1e-12
        base = srcc(x, y)
        assert srcc(np.exp(x / 10), y) == pytest.approx(base, abs=1e-12)
        assert srcc(x, y ** 3 + y) == pytest.approx(base, abs=1e-12)
        assert plcc(3.5 * x - 2, 0.1 * y + 7) == pytest.approx(plcc(x, y), abs=1e-12)


# 9 ---------------------------------------------------------------------------------

@criterion(9, "imbalance reporting")
def test_constant_predictor_scores_baseline():
    rng = np.random.default_rng(9)
    ids = np.arange(1, 301)
    src = InMemoryFeatures(ids, rng.normal(size=(300, 1, 6)).astype(np.float32), "narrow")
    for high_share in (0.2, 0.5, 0.71):
        mos = np.where(rng.uniform(size=300) < high_share, 6.5, 4.0)
        model = build_single_3fc(6, x=8, seed=0)
        model.layer("fc_score").params["kernel"][...] = 0
        for value in (3.0, 7.0):
            model.layer("fc_score").params["bias"][...] = value
            rep = evaluate(model, src, LabelTable(zip(ids, mos)))
            majority = max(np.mean(mos > 5), np.mean(mos <= 5))
            assert rep.baseline == majority
            assert rep.accuracy == (np.mean(mos > 5) if value > 5 else np.mean(mos <= 5))
        acc, base = binary_accuracy(np.full(300, 7.0 if np.mean(mos > 5) >= 0.5 else 3.0), mos)
        assert acc == base


# 10 --------------------------------------------------------------------------------

def pipeline_run(d):
    assert main(["synth-corpus", "--out", str(d), "--n", "40", "--seed", "10"]) == 0
    assert main(["extract", "--manifest", str(d / "manifest.csv"), "--aug", "8",
                 "--store", str(d / "s.mlsp"), "--seed", "3", "--deterministic"]) == 0
    assert main(["train", "--store", str(d / "s.mlsp"), "--labels", str(d / "labels.csv"),
                 "--arch", "single_3fc", "--x", "256", "--max-epochs", "4", "--batch-size", "16",
                 "--checkpoint", str(d / "h.ckpt"), "--seed", "3", "--deterministic"]) == 0
    assert main(["evaluate", "--store", str(d / "s.mlsp"), "--labels", str(d / "labels.csv"),
                 "--checkpoint", str(d / "h.ckpt"), "--sweep", "--report", str(d / "rep"),
                 "--deterministic"]) == 0
    names = ["s.mlsp", "h.ckpt", "h.ckpt.history.csv", "rep.txt", "rep.summary.csv",
             "rep.images.csv", "rep.sweep.csv"]
    return {n: (d / n).read_bytes() for n in names}


@criterion(10, "determinism of extract, train and evaluate")
def test_pipeline_bit_identical(tmp_path):
    a = pipeline_run(tmp_path / "a")
    b = pipeline_run(tmp_path / "b")
    assert a == b


# 11 --------------------------------------------------------------------------------

@criterion(11, "resolution baseline sanity")
def test_resolution_baseline_separable(note):
    rng = np.random.default_rng(11)
    n = 1000
    w, h = rng.integers(200, 1601, n), rng.integers(150, 1201, n)
    x = resolution_inputs(w, h, 1600, 1200)
    high = x[:, 0] + x[:, 1] > 1.0
    ids = np.arange(1, n + 1)
    src = InMemoryFeatures(ids, x[:, None, :].astype(np.float32), "resolution")
    model = build_resolution_baseline(1600, 1200, seed=0)
    _, hist = train(model, src, LabelTable(zip(ids, np.where(high, 7.0, 3.0))),
                    TrainConfig(loss="cross_entropy", lr=1e-3, min_lr=1e-5, max_epochs=200,
                                batch_size=32))
    p = forward(model, x)
    acc = np.mean((p[:, 1] > p[:, 0]) == high)
    note(f"accuracy {100 * acc:.1f}% after {len(hist.rows)} epochs")
    assert len(hist.rows) <= 200
    assert acc > 0.95
