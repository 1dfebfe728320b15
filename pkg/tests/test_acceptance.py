"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the pytest terminal summary (see ``conftest.py``) and
when the module is run directly with ``python3 tests/test_acceptance.py``.
"""

import time

import numpy as np
import pytest

from glsd import numerics as nx
from glsd.data import synth_dataset
from glsd.evaluation import EmbeddingBank, collapse_index, correspondence_eval, extract_global, knn_eval
from glsd.augment import MultiCropConfig
from glsd.geometry import GeoParams, geometric_match, similarity_match, token_centers
from glsd.losses import LossLog, global_loss, local_loss_geo
from glsd.model import init_state
from glsd.numerics import gradient_check
from glsd.trainer import (OptimizerState, TrainConfig, initial_state, prepare_step, student_loss,
                          train, train_step)

from oracles import brute_cosine, brute_geometric
from test_losses import make_bundle

RESULTS: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> bool:
    RESULTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    return ok


def summary_lines() -> list[str]:
    return [RESULTS[k] for k in sorted(RESULTS)]


def _random_crop(rng, size):
    side = rng.uniform(0.2, 1.0) * size
    x0, y0 = rng.uniform(0, size - side, size=2)
    out = int(rng.choice([32, 48, 64, 96]))
    return GeoParams(x0, y0, x0 + side, y0 + side, out, out, bool(rng.integers(2)))


# 1 ----------------------------------------------------------------------------------

def test_c1_matching_oracle_equivalence():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    bad = 0
    for _ in range(200):
        size = int(rng.choice([64, 96, 128]))
        ga, gb = _random_crop(rng, size), _random_crop(rng, size)
        ea, eb = token_centers(ga, 16), token_centers(gb, 16)
        m = geometric_match(ea, eb)
        t, d, mask, _ = brute_geometric(ea.centers, eb.centers, ea.diag, eb.diag)
        za, zb = rng.normal(size=(len(ea), 16)), rng.normal(size=(len(eb), 16))
        ms = similarity_match(za, zb)
        ts, _ = brute_cosine(za, zb)
        ok = (np.array_equal(m.target, t) and np.array_equal(m.mask, mask)
              and np.allclose(m.distance, d, atol=1e-9)
              and np.array_equal(ms.target, ts) and ms.mask.all())
        bad += not ok
    elapsed = time.perf_counter() - t0
    assert record(1, bad == 0 and elapsed < 10, f"200 crop pairs, {bad} mismatches, {elapsed:.2f}s")


# 2 ----------------------------------------------------------------------------------

def test_c2_threshold_semantics():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    a = GeoParams(0, 0, 40, 40, 64, 64, False)
    b = GeoParams(60, 60, 100, 100, 64, 64, False)
    disjoint = geometric_match(token_centers(a, 16), token_centers(b, 16))
    bundle = make_bundle([a, b], rng)
    log = LossLog()
    geo_loss = local_loss_geo(bundle, log).item()
    same = geometric_match(token_centers(a, 16), token_centers(a, 16))
    ok = (not disjoint.mask.any() and geo_loss == 0.0 and log.mask_on == 0
          and np.array_equal(same.target, np.arange(16)) and (same.distance == 0).all()
          and same.mask.all())
    elapsed = time.perf_counter() - t0
    assert record(2, ok and elapsed < 1, f"disjoint loss {geo_loss}, identity d=0 holds, {elapsed:.3f}s")


# 3 ----------------------------------------------------------------------------------

def test_c3_loss_term_counts():
    rng = np.random.default_rng(3)
    g64, g32 = GeoParams(0, 0, 64, 64, 64, 64), GeoParams(0, 0, 32, 32, 32, 32)
    found = []
    for n in (2, 3, 4):
        log = LossLog()
        global_loss(make_bundle([g64] * n, rng, multicrop=False, n_teacher=n), log)
        found.append((f"vanilla N={n}", log.n_terms, n * (n - 1)))
    for nl in (0, 2, 8):
        log = LossLog()
        global_loss(make_bundle([g64, g64] + [g32] * nl, rng), log)
        found.append((f"multi-crop N_L={nl}", log.n_terms, 2 * (nl + 1)))
    ok = all(got == want for _, got, want in found)
    assert record(3, ok, ", ".join(f"{name}: {got}" for name, got, _ in found))


# 4 ----------------------------------------------------------------------------------

GRAD_CFG = dict(patch=8, global_size=16, local_size=8, n_local_crops=2, dim=8, head_hidden=8,
                bottleneck=8, n_prototypes=8, warmup_epochs=0, epochs=1, batch_size=2)


def test_c4_end_to_end_gradients():
    t0 = time.perf_counter()
    images = synth_dataset(2, 2, 0, size=24).images
    worst, n_params = {}, 0
    for setting in ("vanilla", "similarity", "geometric"):
        config = TrainConfig(setting=setting, **GRAD_CFG)
        state = initial_state(config)
        n_params = sum(v.size for v in state.student.values())
        inputs = prepare_step(state, list(images), config)
        err, _ = gradient_check(lambda leaves: student_loss(leaves, inputs, config, state.config)[0],
                                state.student, n_coords=10, step=1e-5,
                                rng=np.random.default_rng(4))
        worst[setting] = err
    elapsed = time.perf_counter() - t0
    ok = n_params <= 5000 and max(worst.values()) < 1e-4 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert record(4, ok, f"{n_params} params, max rel err {detail}, {elapsed:.1f}s")


# 5 ----------------------------------------------------------------------------------

def test_c5_teacher_isolation_and_ema():
    images = list(synth_dataset(2, 2, 0, size=24).images)
    ok = True
    for setting in ("vanilla", "similarity", "geometric"):
        config = TrainConfig(setting=setting, **GRAD_CFG)
        state = initial_state(config)
        opt = OptimizerState.zeros_like(state.student)
        frozen = train_step(state, opt, images, config, 1, lam=1.0)
        copied = train_step(state, opt, images, config, 1, lam=0.0)
        ok &= all(not g.any() for g in frozen.teacher_grads.values())
        ok &= all(not g.any() for g in copied.teacher_grads.values())
        ok &= all(np.array_equal(frozen.state.teacher[k], state.teacher[k]) for k in state.teacher)
        ok &= all(np.array_equal(copied.state.teacher[k], copied.state.student[k]) for k in state.teacher)
    assert record(5, ok, "teacher grads zero, lambda=1 keeps teacher, lambda=0 copies student")


# 6 ----------------------------------------------------------------------------------

def _knn(params, cfg, train_set, queries):
    bank = EmbeddingBank(extract_global(params, train_set.images, cfg), train_set.labels)
    return knn_eval(bank, extract_global(params, queries.images, cfg), queries.labels, k=5)


def run_behavioral(seeds=(0, 1, 2, 3, 4), epochs=30):
    train_set = synth_dataset(512, 8, 0)
    queries = synth_dataset(256, 8, 1)
    corr_mc = MultiCropConfig(global_size=64, local_size=16)
    rows = []
    for seed in seeds:
        row = {"seed": seed}
        base = TrainConfig(epochs=epochs, batch_size=16, seed=seed)
        row["random"] = _knn(init_state(base.backbone(), seed).teacher, base.backbone(), train_set, queries)
        for setting in ("geometric", "vanilla"):
            config = TrainConfig(epochs=epochs, batch_size=16, seed=seed, setting=setting)
            res = train(config, train_set, out_dir="")
            cfg = res.state.config
            row[f"{setting}_knn"] = _knn(res.state.teacher, cfg, train_set, queries)
            row[f"{setting}_corr"] = correspondence_eval(res.state.teacher, cfg, queries.images[:32],
                                                         corr_mc, seed).accuracy
        row["a"] = row["geometric_knn"] - row["random"] >= 0.10
        row["b"] = row["geometric_corr"] >= row["vanilla_corr"]
        rows.append(row)
    return rows


@pytest.mark.slow
def test_c6_behavioral_smoke():
    t0 = time.perf_counter()
    rows = run_behavioral()
    elapsed = time.perf_counter() - t0
    wins_a = sum(r["a"] for r in rows)
    wins_b = sum(r["b"] for r in rows)
    for r in rows:
        print("seed {seed}: random {random:.3f} geometric {geometric_knn:.3f} vanilla {vanilla_knn:.3f} "
              "corr geo {geometric_corr:.3f} van {vanilla_corr:.3f}".format(**r))
    knn = " ".join(f"{r['geometric_knn'] - r['random']:+.3f}" for r in rows)
    ok = sum(r["a"] and r["b"] for r in rows) >= 4
    assert record(6, ok, f"(a) held in {wins_a}/5 seeds (knn gain vs random: {knn}); "
                         f"(b) held in {wins_b}/5; {elapsed / 60:.1f} min")


# 7 ----------------------------------------------------------------------------------

def test_c7_collapse_diagnostic():
    t0 = time.perf_counter()
    data = synth_dataset(32, 8, 0)
    ratios = []
    logged = True
    for seed in range(5):
        means = {}
        for setting in ("similarity", "geometric"):
            config = TrainConfig(setting=setting, epochs=30, batch_size=16, seed=seed)
            res = train(config, data, out_dir="")
            values = [m["collapse_index"] for m in res.metrics]
            logged &= len(values) == 60 and all(0 < v <= 1 for v in values)
            means[setting] = float(np.mean(values[-20:]))
        ratios.append(means["similarity"] / means["geometric"])
    wins = sum(r >= 3 for r in ratios)
    elapsed = time.perf_counter() - t0
    unit = collapse_index(similarity_match(np.ones((16, 4)), np.ones((16, 4)))) == 1.0
    text = f"similarity/geometric collapse ratios {', '.join(f'{r:.2f}' for r in ratios)}; {elapsed:.0f}s"
    if wins >= 4:
        ok = elapsed < 600
        assert record(7, ok, f"3x margin in {wins}/5 seeds; {text}")
    else:
        ok = logged and unit
        assert record(7, ok, f"degraded form (3x margin in {wins}/5 seeds): collapse logged per step, "
                             f"identical rows give 1.0; {text}")


# 8 ----------------------------------------------------------------------------------

def test_c8_determinism(tmp_path):
    data = synth_dataset(8, 2, 0, size=48)
    config = TrainConfig(**{**GRAD_CFG, "epochs": 2, "batch_size": 4, "patch": 16, "global_size": 32,
                            "local_size": 16})
    train(config, data, out_dir=str(tmp_path / "a"))
    train(config, data, out_dir=str(tmp_path / "b"))
    names = ("checkpoint.gltd", "checkpoint.json", "metrics.jsonl", "run.json")
    same = [(tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names]
    assert record(8, all(same), f"byte-identical: {dict(zip(names, same))}")


# 9 ----------------------------------------------------------------------------------

def test_c9_similarity_matching_scales_quadratically():
    # d is large enough that the K x K' cosine table dominates the fixed
    # per-call overhead; at d=64 a K=16 call is mostly overhead
    rng = np.random.default_rng(9)
    times = {}
    for k in (16, 64, 256):
        za, zb = rng.normal(size=(k, 1024)), rng.normal(size=(k, 1024))
        reps = max(3, 100000 // (k * k))
        best = []
        for _ in range(7):
            t0 = time.perf_counter()
            for _ in range(reps):
                similarity_match(za, zb)
            best.append((time.perf_counter() - t0) / reps)
        times[k] = min(best)
    ks = np.array(list(times), dtype=float)
    ts = np.array(list(times.values()))
    c = float(np.exp(np.mean(np.log(ts / ks ** 2))))
    ratios = ts / (c * ks ** 2)
    ok = bool(((ratios >= 1 / 3) & (ratios <= 3)).all())
    detail = ", ".join(f"K={int(k)} {t * 1e6:.1f}us (x{r:.2f})" for k, t, r in zip(ks, ts, ratios))
    assert record(9, ok, f"fit c*K^2 at d=1024: {detail}")


if __name__ == "__main__":
    import sys
    import tempfile
    from pathlib import Path

    tests = [test_c1_matching_oracle_equivalence, test_c2_threshold_semantics, test_c3_loss_term_counts,
             test_c4_end_to_end_gradients, test_c5_teacher_isolation_and_ema, test_c6_behavioral_smoke,
             test_c7_collapse_diagnostic]
    skip = set(sys.argv[1:])
    for fn in tests:
        if fn.__name__ not in skip:
            try:
                fn()
            except AssertionError:
                pass
    with tempfile.TemporaryDirectory() as tmp:
        try:
            test_c8_determinism(Path(tmp))
        except AssertionError:
            pass
    try:
        test_c9_similarity_matching_scales_quadratically()
    except AssertionError:
        pass
    print("\n".join(summary_lines()))
