"""Acceptance suite: one test per pinned criterion, printing a PASS/FAIL
line each.

Criteria 5-9 train real networks on MNIST / Fashion-MNIST (fetched into
the cache on first use) and are marked `slow`; expect roughly an hour of
single-core compute for the whole module. Everything else runs in
seconds.
"""

import csv
import json
import math

import numpy as np
import pytest

from metabnn.binquad import (QuadraticProblem, brute_force_optimum,
                             corner_loss, flip_importance,
                             flip_importance_closed, random_problem,
                             run_dynamics)
from metabnn.data import (encode_idx, fetch_dataset, load_dataset,
                          make_permuted_task, make_stream_splits, parse_idx)
from metabnn.experiments import ExperimentConfig, run_permuted, run_stream, run_toy
from metabnn.ewc import TaskAnchor, ewc_penalty_grad, ewc_penalty_value

SEEDS = (0, 1, 2)


def _report(number, name, ok, detail=""):
    print(f"\nACCEPTANCE {number:02d} {name}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {number} ({name}) failed: {detail}"


def _load_rows(csv_path):
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [row for row in reader]


def _accuracy(rows, task_index, eval_task):
    for row in rows:
        if int(row["task_index"]) == task_index and int(row["eval_task"]) == eval_task:
            return float(row["accuracy"])
    raise KeyError((task_index, eval_task))


# --------------------------------------------------------------------------
# shared heavy fixtures
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def mnist():
    fetch_dataset("mnist")
    return load_dataset("mnist")


@pytest.fixture(scope="module")
def fmnist():
    fetch_dataset("fmnist")
    return load_dataset("fmnist")


@pytest.fixture(scope="module")
def permuted_runs(mnist, tmp_path_factory):
    """Nine full permuted runs: {plain, meta, ewc} x three seeds at
    hidden 512, 5 tasks, 5 epochs each."""
    out = tmp_path_factory.mktemp("permuted512")
    results = {}
    for method in ("plain", "meta", "ewc"):
        for seed in SEEDS:
            cfg = ExperimentConfig(method=method, hidden_size=512, n_tasks=5,
                                   epochs_per_task=5, seed=seed,
                                   out_dir=str(out))
            summary = run_permuted(cfg, data=mnist)
            results[(method, seed)] = {
                "rows": _load_rows(summary["metrics_csv"]),
                "summary": summary,
            }
    return results


@pytest.fixture(scope="module")
def stream_runs(fmnist, tmp_path_factory):
    """Per seed: a plain stream run (whose whole-dataset reference run is
    executed automatically) and a consolidated stream run reusing that
    reference value."""
    out = tmp_path_factory.mktemp("stream1024")
    results = {}
    for seed in SEEDS:
        plain_cfg = ExperimentConfig(method="plain", dataset="fmnist",
                                     hidden_size=1024, k_splits=6,
                                     epochs_per_task=5, seed=seed,
                                     out_dir=str(out))
        plain = run_stream(plain_cfg, data=fmnist)
        meta_cfg = ExperimentConfig(method="meta", m=1.35, dataset="fmnist",
                                    hidden_size=1024, k_splits=6,
                                    epochs_per_task=5, seed=seed,
                                    out_dir=str(out),
                                    baseline_accuracy=plain["baseline_accuracy"])
        meta = run_stream(meta_cfg, data=fmnist)
        results[seed] = {"plain": plain, "meta": meta,
                         "baseline": plain["baseline_accuracy"]}
    return results


# --------------------------------------------------------------------------
# 1. exact oracles for the binary quadratic testbed
# --------------------------------------------------------------------------

def test_c01_toy_oracle_exactness():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        d = int(rng.integers(1, 13))
        p = random_problem(d, int(rng.integers(0, 2**31)))
        c = rng.choice([-1.0, 1.0], d)
        i = int(rng.integers(0, d))
        worst = max(worst, abs(flip_importance(p, c, i)
                               - flip_importance_closed(p, c, i)))
    agree = worst < 1e-9

    p2 = QuadraticProblem(a=np.array([[1.0, 0.9], [0.9, 1.0]]),
                          w_star=np.array([0.95, 0.0]))
    corner, loss = brute_force_optimum(p2)
    example = (corner.tolist() == [1.0, -1.0]
               and abs(loss - 0.45625) < 1e-12
               and abs(flip_importance_closed(p2, corner, 0) - 3.70) < 1e-12
               and abs(flip_importance_closed(p2, corner, 1) - 0.09) < 1e-12
               and abs(corner_loss(p2, corner) - 0.45625) < 1e-12)
    _report(1, "toy oracle exactness", agree and example,
            f"max |closed - brute| = {worst:.2e} over 1000 problems")


# --------------------------------------------------------------------------
# 2. bitwise dynamics traces
# --------------------------------------------------------------------------

def test_c02_dynamics_exactness():
    p1 = QuadraticProblem(a=np.array([[1.0]]), w_star=np.array([0.5]))
    traj = run_dynamics(p1, eta=0.1, steps=8, wh0=np.array([0.05]))
    got = [s[1][0] for s in traj.snapshots]
    w, expected = 0.05, [0.05]
    for _ in range(8):
        w = w - 0.1 * (1.0 * ((1.0 if w >= 0 else -1.0) - 0.5))
        expected.append(w)
    ok_1d = got == expected and got[:4] == pytest.approx(
        [0.05, 0.0, -0.05, 0.10], abs=1e-12)

    p2 = QuadraticProblem(a=np.array([[1.0, 0.9], [0.9, 1.0]]),
                          w_star=np.array([0.95, 0.0]))
    traj2 = run_dynamics(p2, eta=0.1, steps=2, wh0=np.array([0.1, -0.1]))
    wv = np.array([0.1, -0.1])
    c = np.where(wv >= 0, 1.0, -1.0)
    e1 = wv - 0.1 * (p2.a @ (c - p2.w_star))
    e2 = e1 - 0.1 * (p2.a @ (np.where(e1 >= 0, 1.0, -1.0) - p2.w_star))
    ok_2d = (np.array_equal(traj2.snapshots[1][1], e1)
             and np.array_equal(traj2.snapshots[2][1], e2)
             and traj2.snapshots[1][1] == pytest.approx([0.185, -0.0045], abs=1e-12)
             and traj2.snapshots[2][1] == pytest.approx([0.27, 0.091], abs=1e-12))
    _report(2, "dynamics exactness", ok_1d and ok_2d,
            "1D cycle and 2D two-step trace bitwise vs independent unroll")


# --------------------------------------------------------------------------
# 3. divergence/importance correspondence on the testbed
# --------------------------------------------------------------------------

def test_c03_divergence_importance_correlation(tmp_path):
    summary = run_toy(d=12, n_problems=20, eta=0.1, seed=0,
                      out_dir=tmp_path)
    median = summary["spearman_median"]
    positive = all(np.asarray(summary["spearman_per_problem"]) > -1.0)
    _report(3, "divergence vs importance rank correlation",
            positive and median >= 0.5,
            f"median spearman = {median:.3f} over 20 problems (threshold 0.5)")


# --------------------------------------------------------------------------
# 4. gradient checks
# --------------------------------------------------------------------------

def test_c04_gradient_checks():
    from test_nn import _surrogate_fd_check
    _surrogate_fd_check(seed=0)  # asserts < 1e-4 relative internally

    rng = np.random.default_rng(40)
    whs = [rng.standard_normal((4, 5)), rng.standard_normal((3, 4))]
    anchors = [TaskAnchor(
        wh=tuple(w + 0.2 * rng.random(w.shape) for w in whs),
        fisher=tuple(rng.random(w.shape) for w in whs))]
    analytic = ewc_penalty_grad(whs, anchors, 5e-3)
    h = 1e-6
    worst = 0.0
    for k, w in enumerate(whs):
        flat = w.reshape(-1)
        aflat = analytic[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = ewc_penalty_value(whs, anchors, 5e-3)
            flat[i] = orig - h
            down = ewc_penalty_value(whs, anchors, 5e-3)
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            denom = max(abs(aflat[i]), 1e-12)
            worst = max(worst, abs(numeric - aflat[i]) / denom)
    _report(4, "gradient checks", worst < 1e-6,
            f"surrogate FD < 1e-4; EWC penalty FD rel err = {worst:.2e}")


# --------------------------------------------------------------------------
# 5. m=0 reduction identity at full-run granularity
# --------------------------------------------------------------------------

@pytest.mark.slow
def test_c05_reduction_identity(mnist, tmp_path):
    plain_cfg = ExperimentConfig(method="plain", hidden_size=256, n_tasks=3,
                                 epochs_per_task=5, seed=0,
                                 out_dir=str(tmp_path))
    meta0_cfg = ExperimentConfig(method="meta", m=0.0, lam=0.0,
                                 hidden_size=256, n_tasks=3,
                                 epochs_per_task=5, seed=0,
                                 out_dir=str(tmp_path))
    plain = run_permuted(plain_cfg, data=mnist)
    meta0 = run_permuted(meta0_cfg, data=mnist, check_config=False)
    rows_p = _load_rows(plain["metrics_csv"])
    rows_m = _load_rows(meta0["metrics_csv"])
    same = [(r["task_index"], r["eval_task"], r["accuracy"]) for r in rows_p] \
        == [(r["task_index"], r["eval_task"], r["accuracy"]) for r in rows_m]
    _report(5, "m=0 reduction identity", same,
            "meta(m=0) metrics byte-identical to plain (3 tasks, hidden 256)")


# --------------------------------------------------------------------------
# 6-8. permuted-task reproductions
# --------------------------------------------------------------------------

@pytest.mark.slow
def test_c06_catastrophic_forgetting(permuted_runs):
    drops = []
    for seed in SEEDS:
        rows = permuted_runs[("plain", seed)]["rows"]
        drops.append(_accuracy(rows, 1, 1) - _accuracy(rows, 5, 1))
    median_drop = float(np.median(drops))
    _report(6, "catastrophic forgetting (plain)", median_drop >= 0.25,
            f"median task-1 drop = {median_drop * 100:.1f} points (need >= 25)")


@pytest.mark.slow
def test_c07_metaplastic_mitigation(permuted_runs):
    gains, drops = [], []
    for seed in SEEDS:
        meta = permuted_runs[("meta", seed)]
        plain = permuted_runs[("plain", seed)]
        gains.append(meta["summary"]["final_average_accuracy"]
                     - plain["summary"]["final_average_accuracy"])
        rows = meta["rows"]
        drops.append(_accuracy(rows, 1, 1) - _accuracy(rows, 5, 1))
    median_gain = float(np.median(gains))
    median_drop = float(np.median(drops))
    _report(7, "metaplastic mitigation",
            median_gain >= 0.15 and median_drop <= 0.10,
            f"median avg-accuracy gain = {median_gain * 100:.1f} points "
            f"(need >= 15); median task-1 drop = {median_drop * 100:.1f} "
            f"points (need <= 10)")


@pytest.mark.slow
def test_c08_ewc_comparability(permuted_runs):
    diffs = []
    for seed in SEEDS:
        diffs.append(permuted_runs[("ewc", seed)]["summary"]["final_average_accuracy"]
                     - permuted_runs[("meta", seed)]["summary"]["final_average_accuracy"])
    median_diff = float(np.median(diffs))
    flagged = all("binarized weights" in permuted_runs[("ewc", s)]["summary"]["notes"]
                  for s in SEEDS)
    _report(8, "EWC comparability", abs(median_diff) <= 0.05 and flagged,
            f"median (ewc - meta) average accuracy = {median_diff * 100:+.1f} "
            f"points (need within 5); anchoring interpretation flagged: {flagged}")


# --------------------------------------------------------------------------
# 9. stream learning
# --------------------------------------------------------------------------

@pytest.mark.slow
def test_c09_stream_learning(stream_runs):
    gains, gaps = [], []
    for seed in SEEDS:
        plain_final = stream_runs[seed]["plain"]["final_accuracy"]
        meta_final = stream_runs[seed]["meta"]["final_accuracy"]
        baseline = stream_runs[seed]["baseline"]
        gains.append(meta_final - plain_final)
        gaps.append(baseline - plain_final)
    median_gain = float(np.median(gains))
    median_gap = float(np.median(gaps))
    ok = median_gain > 0 and median_gain >= 0.5 * median_gap
    _report(9, "stream learning", ok,
            f"median meta-plain gain = {median_gain * 100:.2f} points; "
            f"median plain-to-baseline gap = {median_gap * 100:.2f} points "
            f"(need gain > 0 and >= half the gap)")


# --------------------------------------------------------------------------
# 10. data integrity
# --------------------------------------------------------------------------

def test_c10_data_integrity(tmp_path):
    import gzip
    import hashlib

    rng = np.random.default_rng(10)
    images = rng.integers(0, 256, (7, 784), dtype=np.uint8)
    labels = rng.integers(0, 10, 7).astype(np.int64)
    round_trip = (np.array_equal(parse_idx(encode_idx(images)), images)
                  and np.array_equal(parse_idx(encode_idx(labels)), labels))

    from conftest import synth_dataset
    ds = synth_dataset(500, seed=0)
    perms_ok = all(
        np.array_equal(np.sort(make_permuted_task(ds, seed, 1).perm),
                       np.arange(784))
        for seed in range(100))
    splits_ok = True
    for seed in range(100):
        split = make_stream_splits(ds, 4, seed=seed)
        merged = np.concatenate(split.subsets)
        if not np.array_equal(np.sort(merged), np.arange(500)):
            splits_ok = False
        for c in range(10):
            per = [int((ds.labels[s] == c).sum()) for s in split.subsets]
            if max(per) - min(per) > 1:
                splits_ok = False

    # warm-cache fetch: zero requests on the second pass
    from metabnn.data import DATASET_FILES
    payloads = {}
    for fn in DATASET_FILES:
        arr = (rng.integers(0, 256, (5, 784), dtype=np.uint8)
               if "images" in fn else rng.integers(0, 10, 5).astype(np.uint8))
        payloads[fn] = encode_idx(arr)
    digests = {fn: hashlib.sha256(b).hexdigest() for fn, b in payloads.items()}
    calls = []

    def http_get(url):
        calls.append(url)
        return gzip.compress(payloads[url.rsplit("/", 1)[1].removesuffix(".gz")])

    fetch_dataset("mnist", cache_dir=tmp_path, mirrors=["x://m/"],
                  digests=digests, http_get=http_get)
    cold_calls = len(calls)
    fetch_dataset("mnist", cache_dir=tmp_path, mirrors=["x://m/"],
                  digests=digests, http_get=http_get)
    warm_ok = cold_calls == 4 and len(calls) == 4

    _report(10, "data integrity", round_trip and perms_ok and splits_ok and warm_ok,
            "IDX round-trip exact; 100-seed permutation/split invariants; "
            "warm cache made zero requests")
