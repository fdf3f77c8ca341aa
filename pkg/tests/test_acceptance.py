"""End-to-end acceptance checks, one test per criterion.

Run ``pytest tests/test_acceptance.py`` (or this file directly); the terminal
summary lists a PASS/FAIL line per criterion.
"""

import subprocess
import sys
import time

import numpy as np
import pytest
from fdcheck import numeric_grad, rel_error

from lrbp.bench import MIB, param_count, star_grid, time_benchmark
from lrbp.classifier import (
    FullBilinearClassifier,
    FullModel,
    LowRankClassifier,
    init_lowrank,
    lowrank_gradients,
    lowrank_objective,
    lowrank_scores,
    one_vs_rest_targets,
    score_frobenius,
    score_full,
    score_via_pooled,
    spectrum,
    truncate_model,
)
from lrbp.codecomp import (
    CoDecomposedModel,
    codecomp_objective,
    codecompose,
    gradients_codecomposed,
    reconstruction_error,
    stack_factors,
)
from lrbp.dataio import model_bytes, model_header_bytes, synth_covariance_dataset
from lrbp.linalg import random_orthonormal
from lrbp.pooling import FeatureMap, bilinear_pool, pool_batch
from lrbp.training import TrainConfig, evaluate_dataset, train, train_equivalence_pair, train_mean_pooled_baseline


def _fm(X):
    return FeatureMap(X, X.shape[1], 1)


def test_c01_score_paths(record):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(200):
        c = [4, 64, 512][i % 3]
        hw = [1, 9, 784][(i // 3) % 3]
        p, q = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        clf = LowRankClassifier(rng.standard_normal((c, p)), rng.standard_normal((c, q)), rng.standard_normal())
        fm = _fm(rng.standard_normal((c, hw)))
        B = bilinear_pool(fm)
        s1 = score_frobenius(clf, fm)
        s2 = score_via_pooled(clf, B)
        s3 = score_full(FullBilinearClassifier(clf.weight_matrix(), clf.b), B)
        # relative to the size of the terms whose difference forms the score
        scale = np.sum((clf.Uplus.T @ fm.X) ** 2) + np.sum((clf.Uminus.T @ fm.X) ** 2) + abs(clf.b)
        worst = max(worst, abs(s1 - s2) / scale, abs(s1 - s3) / scale)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-10 and elapsed < 10
    record(1, ok, f"max relative path gap {worst:.2e} (< 1e-10) over 200 cases in {elapsed:.1f}s")
    assert ok


def test_c02_gradient_check(record):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst, n_low, n_cd = 0.0, 0, 0
    while n_low < 100:
        K, c, n = 2, int(rng.integers(2, 7)), 4
        params = {
            "Up": rng.standard_normal((K, c, 2)) * 0.5,
            "Um": rng.standard_normal((K, c, 2)) * 0.5,
            "b": rng.standard_normal(K) * 0.3,
        }
        X = rng.standard_normal((n, c, 3))
        Y = one_vs_rest_targets(rng.integers(0, K, n), K)
        lam = float(rng.uniform(0, 1))
        if np.min(np.abs(1 - Y * lowrank_scores(params["Up"], params["Um"], params["b"], X))) < 1e-3:
            continue  # too close to a hinge kink
        f = lambda P: lowrank_objective(P["Up"], P["Um"], P["b"], X, Y, lam)  # noqa: E731
        grads = dict(zip(params, lowrank_gradients(params["Up"], params["Um"], params["b"], X, Y, lam)))
        for name in params:
            worst = max(worst, rel_error(grads[name], numeric_grad(f, params, name)))
        n_low += 1
    while n_cd < 100:
        K, c, m, n = 3, 8, 4, 5
        params = {
            "P": random_orthonormal(c, m, rng),
            "Vp": rng.standard_normal((K, m, 1)) * 0.5,
            "Vm": rng.standard_normal((K, m, 1)) * 0.5,
            "b": rng.standard_normal(K) * 0.3,
        }
        X = rng.standard_normal((n, c, 3))
        labels = rng.integers(0, K, n)
        lam = float(rng.uniform(0, 1))

        def build(p):
            return CoDecomposedModel(p["P"], p["Vp"], p["Vm"], p["b"])

        if np.min(np.abs(1 - one_vs_rest_targets(labels, K) * build(params).scores(X))) < 1e-3:
            continue
        f = lambda p: codecomp_objective(build(p), X, labels, lam)  # noqa: E731
        grads = dict(zip(params, gradients_codecomposed(build(params), X, labels, lam)))
        for name in params:
            worst = max(worst, rel_error(grads[name], numeric_grad(f, params, name)))
        n_cd += 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 60
    record(2, ok, f"max FD relative error {worst:.2e} (< 1e-4), {n_low} low-rank + {n_cd} co-decomposed instances, {elapsed:.1f}s")
    assert ok


def test_c03_vectorized_equals_trace_form(record):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    B = pool_batch(rng.standard_normal((60, 16, 9)))
    y = np.where(np.arange(60) % 2 == 0, 1.0, -1.0)
    rep = train_equivalence_pair(B, y, epochs=30, seed=3)
    elapsed = time.perf_counter() - t0
    ok = rep.max_iterate_gap < 1e-8 and rep.asymmetry < 1e-4 and elapsed < 60
    record(3, ok, f"max iterate gap {rep.max_iterate_gap:.1e} (< 1e-8), asymmetry {rep.asymmetry:.1e} (< 1e-4), {elapsed:.1f}s")
    assert ok


def test_c04_codecompose_optimal(record):
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    worst_gap, violations, trials = 0.0, 0, 0
    for m in (2, 4, 8):
        for _ in range(5):
            model = init_lowrank(5, 16, 4, rng)
            A = stack_factors(model)
            err = reconstruction_error(codecompose(model, m), model)[0]
            s = np.linalg.svd(A, compute_uv=False)
            worst_gap = max(worst_gap, abs(err - np.sum(s[m:] ** 2)))
            for _ in range(1000):
                P = random_orthonormal(16, m, rng)
                if np.linalg.norm(A - P @ (P.T @ A)) ** 2 < err - 1e-12:
                    violations += 1
            trials += 1
    elapsed = time.perf_counter() - t0
    ok = worst_gap < 1e-8 and violations == 0 and elapsed < 60
    record(4, ok, f"|error - tail energy| {worst_gap:.1e} (< 1e-8), {violations} random subspaces better in {trials} trials x 1000, {elapsed:.1f}s")
    assert ok


def test_c05_table_parameter_counts(record):
    t0 = time.perf_counter()
    full = param_count("full_bilinear", 512, 200).total_bytes / MIB
    lrbp = param_count("lrbp_II", 512, 200, m=100, r=8).total_bytes / MIB
    rm = param_count("random_maclaurin", 512, 200, d=10_000).total_bytes / MIB
    rng = np.random.default_rng(5)
    c, K, m, r = 12, 4, 6, 4
    low = init_lowrank(K, c, r, rng)
    files = {
        "lowrank": (low, K * c * r),
        "codecomposed": (codecompose(low, m), param_count("lrbp", c, K, m=m, r=r).total_params),
        "full": (FullModel(rng.standard_normal((K, c, c)), np.zeros(K)), param_count("full", c, K).total_params),
    }
    sizes_ok = all(
        len(model_bytes(model)) - model_header_bytes(kind) - 4 * K == 4 * params
        for kind, (model, params) in files.items()
    )
    big = CoDecomposedModel(np.zeros((512, 100)), np.zeros((200, 100, 4)), np.zeros((200, 100, 4)), np.zeros(200))
    big_ok = len(model_bytes(big)) - model_header_bytes("codecomposed") - 4 * 200 == param_count(
        "lrbp", 512, 200, m=100, r=8
    ).total_bytes
    elapsed = time.perf_counter() - t0
    ok = (
        full == 200.0
        and abs(lrbp - 0.8) <= 0.08
        and abs(rm - 48) <= 0.05 * 48
        and sizes_ok
        and big_ok
        and elapsed < 5
    )
    record(5, ok, f"full {full:.2f} MiB, LRBP {lrbp:.3f} MiB, RM(d=10000) {rm:.2f} MiB, file sizes exact={sizes_ok and big_ok}, {elapsed:.1f}s")
    assert ok


def test_c06_second_order_selectivity(record):
    t0 = time.perf_counter()
    ds = synth_covariance_dataset(2, 1000, 6, 6, 16, seed=0, alpha=4.0)
    cfg = TrainConfig(model_kind="full", seed=0)
    model, _ = train(ds, cfg)
    acc = evaluate_dataset(model, ds).accuracy
    base = train_mean_pooled_baseline(ds, TrainConfig(model_kind="lowrank", seed=0))
    base_acc = evaluate_dataset(base, ds, normalization="map").accuracy
    elapsed = time.perf_counter() - t0
    ok = acc >= 0.95 and base_acc <= 0.60 and elapsed < 300
    record(6, ok, f"full bilinear {acc:.4f} (>= 0.95), mean-pooled baseline {base_acc:.4f} (<= 0.60), {elapsed:.1f}s")
    assert ok


@pytest.fixture(scope="module")
def ten_class_run():
    t0 = time.perf_counter()
    ds = synth_covariance_dataset(10, 1000, 6, 6, 16, seed=0, alpha=4.0, subspace_dim=4)
    full, _ = train(ds, TrainConfig(model_kind="full", seed=0))
    return ds, full, time.perf_counter() - t0


def test_c07_low_rank_sufficiency(record, ten_class_run):
    ds, full, t_train = ten_class_run
    t0 = time.perf_counter()
    acc_full = evaluate_dataset(full, ds).accuracy
    low = truncate_model(full, 8)
    acc_low = evaluate_dataset(low, ds, normalization="pooled").accuracy
    cd = codecompose(low, ds.c // 4)
    acc_cd = evaluate_dataset(cd, ds, normalization="pooled").accuracy
    elapsed = t_train + time.perf_counter() - t0
    ok = acc_full - acc_low <= 0.02 and acc_low - acc_cd <= 0.02 and elapsed < 600
    record(7, ok, f"full {acc_full:.4f}, r=8 {acc_low:.4f}, m=c/4={ds.c // 4} {acc_cd:.4f} (each drop <= 0.02), {elapsed:.1f}s")
    assert ok


def test_c08_spectrum_concentration(record, ten_class_run):
    _, full, _ = ten_class_run
    frac = spectrum(full).small_fraction(0.1)
    ok = frac >= 0.5
    record(8, ok, f"fraction of |eig| < 0.1 max|eig|: {frac:.3f} (>= 0.5)")
    assert ok


def test_c09_empirical_scaling(record):
    t0 = time.perf_counter()
    cs = [64, 128, 256, 512, 1024]
    hws = [49, 196, 784, 3136]
    shapes, c0, hw0 = star_grid(cs, hws, c0=256, hw0=784)
    rep = time_benchmark(shapes=shapes, reps=9, seed=0, K=200, m=100, r=8, c0=c0, hw0=hw0)
    ex = rep.exponents
    cross = rep.crossover_hw
    elapsed = time.perf_counter() - t0
    ok = (
        abs(ex["full_bilinear_feature_vs_c"] - 2.0) <= 0.3
        and abs(ex["lrbp_I_classify_vs_hw"] - 1.0) <= 0.3
        and abs(ex["lrbp_II_classify_vs_hw"]) <= 0.2
        and cross is not None
        and 100 / 4 <= cross <= 100 * 4
        and elapsed < 600
    )
    record(
        9,
        ok,
        f"exponents full/c {ex['full_bilinear_feature_vs_c']:.2f}, LRBP-I/hw {ex['lrbp_I_classify_vs_hw']:.2f}, "
        f"LRBP-II/hw {ex['lrbp_II_classify_vs_hw']:.2f}; crossover hw={cross if cross is None else round(cross, 1)} "
        f"(m=100), {elapsed:.1f}s",
    )
    assert ok


def test_c10_regularizer_identity(record):
    rng = np.random.default_rng(10)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        c = int(rng.integers(1, 20))
        Up = rng.standard_normal((c, int(rng.integers(1, 6))))
        Um = rng.standard_normal((c, int(rng.integers(1, 6))))
        lhs = np.linalg.norm(Up @ Up.T - Um @ Um.T) ** 2
        rhs = np.linalg.norm(Up @ Up.T) ** 2 + np.linalg.norm(Um @ Um.T) ** 2 - 2 * np.linalg.norm(Up.T @ Um) ** 2
        worst = max(worst, abs(lhs - rhs) / max(lhs, 1.0))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-10 and elapsed < 5
    record(10, ok, f"max relative gap {worst:.1e} (< 1e-10) over 100 pairs, {elapsed:.2f}s")
    assert ok


def test_c11_deterministic_cli(record, tmp_path):
    data = tmp_path / "d.bin"
    cli = [sys.executable, "-m", "lrbp.cli"]
    subprocess.run(cli + ["synth", "--seed", "11", "--out", str(data)], check=True, capture_output=True)
    digests, elapsed = {}, []
    for model in ("lowrank", "codecomp"):
        blobs = []
        for run in range(2):
            out = tmp_path / f"{model}{run}.bin"
            t0 = time.perf_counter()
            subprocess.run(
                cli + ["train", "--data", str(data), "--model", model, "--rank", "8", "--m", "8",
                       "--epochs", "30", "--seed", "7", "--out", str(out)],
                check=True,
                capture_output=True,
            )
            elapsed.append(time.perf_counter() - t0)
            blobs.append(out.read_bytes())
        digests[model] = blobs[0] == blobs[1]
    ok = all(digests.values()) and max(elapsed) < 60
    record(11, ok, f"bit-identical model files: {digests}, slowest run {max(elapsed):.1f}s")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
