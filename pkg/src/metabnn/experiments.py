"""Experiment runners and reporting.

Four studies share one configuration and metrics scheme:

* permuted: sequential pixel-permuted tasks, evaluating every finished
  task after each boundary (hidden-weight consolidation, EWC, or plain).
* stream: class-balanced subsets of one dataset learned in sequence with
  no boundary handling, plus the whole-dataset reference run.
* toy: corner-dynamics divergence/importance tables for random binary
  quadratic problems.
* flip-importance: loss increase from flipping individual binarized
  weights of a trained network versus their hidden-weight magnitudes.

Every run is reproducible: all randomness flows from the config seed
through counter-based generators, so reruns produce byte-identical metric
values (wall-clock columns aside). Metrics CSVs share the frozen header
`run_id,seed,method,m,lambda,task_index,eval_task,accuracy,wall_clock_s`.
"""

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import ewc as ewc_mod
from .binquad import divergence_importance_report, random_problem
from .data import (epoch_rng, load_dataset, make_permuted_task,
                   make_stream_splits, minibatch_indices)
from .meta import MetaConfig, TrainState, train_step
from .nn import (BnnModel, binarize, evaluate, forward,
                 forward_batch_stats, softmax_cross_entropy)

METHODS = ("meta", "ewc", "plain")
DATASETS = ("mnist", "fmnist")
CSV_COLUMNS = ("run_id", "seed", "method", "m", "lambda", "task_index",
               "eval_task", "accuracy", "wall_clock_s")

FISHER_SALT = 401
FLIP_SALT = 601
TOY_PROBLEM_SALT = 502

EWC_ANCHORING_NOTE = (
    "EWC importance is computed through the binarized weights; the quadratic "
    "penalty anchors the hidden real weights (interpretation choice)."
)


class ConfigError(ValueError):
    """Invalid experiment configuration (rejected before any training)."""


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "plain"
    m: float = 1.35
    lam: float = 5e-3
    eta: float = 60.0
    eta_bn: float = 1e-3
    adam_eps: float = 1e-8
    update_rule: str = "sgd"
    hidden_size: int = 512
    n_tasks: int = 5
    epochs_per_task: int = 5
    batch_size: int = 50
    seed: int = 0
    dataset: str = "mnist"
    k_splits: int = 6
    out_dir: str = "runs"
    fisher_samples: int = 2000
    n_weights: int = 2000
    eval_batch: int = 1000
    eval_bn: str = "batch"
    baseline_accuracy: float = None
    model_path: str = None

    def validated(self) -> "ExperimentConfig":
        """Check invariants and return the normalized copy (plain and ewc
        force m=0; plain forces lambda=0)."""
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        for name in ("hidden_size", "n_tasks", "epochs_per_task", "batch_size",
                     "k_splits", "fisher_samples", "n_weights", "eval_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("eta", "eta_bn", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.eval_bn not in ("batch", "running"):
            raise ConfigError(f"eval_bn must be 'batch' or 'running', got {self.eval_bn!r}")
        if self.update_rule not in ("adam", "sgd"):
            raise ConfigError(
                f"update_rule must be 'adam' or 'sgd', got {self.update_rule!r}")
        if self.baseline_accuracy is not None and not 0 <= self.baseline_accuracy <= 1:
            raise ConfigError("baseline_accuracy must lie in [0, 1]")
        if self.method == "meta":
            if not self.m > 0:
                raise ConfigError("method=meta requires m > 0")
            return replace(self, lam=0.0)
        if self.method == "ewc":
            if not self.lam > 0:
                raise ConfigError("method=ewc requires lambda > 0")
            return replace(self, m=0.0)
        return replace(self, m=0.0, lam=0.0)

    def run_id(self, kind) -> str:
        ident = json.dumps({
            "kind": kind, "method": self.method, "m": self.m, "lam": self.lam,
            "eta": self.eta, "eta_bn": self.eta_bn, "adam_eps": self.adam_eps,
            "hidden": self.hidden_size, "tasks": self.n_tasks,
            "epochs": self.epochs_per_task, "batch": self.batch_size,
            "seed": self.seed, "dataset": self.dataset, "k": self.k_splits,
            "eval_bn": self.eval_bn, "rule": self.update_rule,
        }, sort_keys=True)
        return hashlib.sha256(ident.encode()).hexdigest()[:12]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class MetricsRecord:
    run_id: str
    seed: int
    method: str
    m: float
    lam: float
    task_index: int
    eval_task: int
    accuracy: float
    wall_clock_s: float

    def __post_init__(self):
        if not 0 <= self.accuracy <= 1:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")
        if self.eval_task > self.task_index:
            raise ValueError("eval_task must not exceed task_index")

    def row(self):
        return (self.run_id, str(self.seed), self.method, repr(self.m),
                repr(self.lam), str(self.task_index), str(self.eval_task),
                repr(self.accuracy), f"{self.wall_clock_s:.3f}")


def write_metrics_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for rec in records:
            writer.writerow(rec.row())


def _write_summary(path, summary) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _new_model_and_opt(cfg, input_dim):
    model = BnnModel.create(
        (input_dim, cfg.hidden_size, cfg.hidden_size, 10), seed=cfg.seed)
    return model, TrainState.for_model(model, adam_eps=cfg.adam_eps)


def _meta_config(cfg):
    return MetaConfig(m=cfg.m, eta=cfg.eta, eta_bn=cfg.eta_bn,
                      update_rule=cfg.update_rule)


def _train_task(model, opt, images, labels, cfg, meta_cfg, task_idx, hook=None):
    for epoch in range(cfg.epochs_per_task):
        rng = epoch_rng(cfg.seed, task_idx, epoch)
        for idx in minibatch_indices(len(images), cfg.batch_size, rng):
            train_step(model, images[idx], labels[idx], opt, meta_cfg,
                       grad_hook=hook)


def _load_data(cfg, data, cache_dir):
    if data is not None:
        return data
    return load_dataset(cfg.dataset, cache_dir)


def run_permuted(cfg: ExperimentConfig, data=None, cache_dir=None,
                 check_config=True, log=None):
    """Sequential permuted-task training; returns summary dict with output
    paths. After each task, every task seen so far is evaluated on its own
    permuted test set."""
    if check_config:
        cfg = cfg.validated()
    train_ds, test_ds = _load_data(cfg, data, cache_dir)
    model, opt = _new_model_and_opt(cfg, train_ds.images.shape[1])
    meta_cfg = _meta_config(cfg)
    run_id = cfg.run_id("permuted")
    anchors = []
    records = []
    t0 = time.perf_counter()

    for k in range(cfg.n_tasks):
        view = make_permuted_task(train_ds, cfg.seed, k)
        task_images = view.permuted()
        hook = None
        if cfg.method == "ewc" and anchors:
            hook = ewc_mod.make_grad_hook(anchors, cfg.lam)
        _train_task(model, opt, task_images, train_ds.labels, cfg, meta_cfg,
                    k, hook)
        if cfg.method == "ewc":
            anchors = ewc_mod.consolidate_task(
                model, task_images, train_ds.labels, cfg.fisher_samples,
                [cfg.seed, FISHER_SALT, k], anchors)
        del task_images
        for j in range(k + 1):
            test_view = make_permuted_task(test_ds, cfg.seed, j)
            acc = evaluate(model, test_view.permuted(), test_ds.labels,
                           bn=cfg.eval_bn)
            records.append(MetricsRecord(
                run_id=run_id, seed=cfg.seed, method=cfg.method, m=cfg.m,
                lam=cfg.lam, task_index=k + 1, eval_task=j + 1, accuracy=acc,
                wall_clock_s=time.perf_counter() - t0))
        if log:
            mean_acc = np.mean([r.accuracy for r in records
                                if r.task_index == k + 1])
            log(f"[{run_id}] task {k + 1}/{cfg.n_tasks}: "
                f"avg accuracy {mean_acc:.4f}")

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"permuted_{run_id}.csv"
    write_metrics_csv(csv_path, records)
    averages = {
        str(k): float(np.mean([r.accuracy for r in records if r.task_index == k]))
        for k in range(1, cfg.n_tasks + 1)
    }
    summary = {
        "kind": "permuted",
        "run_id": run_id,
        "config": cfg.to_dict(),
        "average_accuracy_by_task": averages,
        "final_average_accuracy": averages[str(cfg.n_tasks)],
        "wall_clock_s": time.perf_counter() - t0,
        "metrics_csv": str(csv_path),
    }
    if cfg.method == "ewc":
        summary["notes"] = EWC_ANCHORING_NOTE
    summary_path = out_dir / f"permuted_{run_id}_summary.json"
    _write_summary(summary_path, summary)
    summary["summary_json"] = str(summary_path)
    return summary


def run_stream(cfg: ExperimentConfig, data=None, cache_dir=None,
               check_config=True, log=None):
    """Class-balanced subset sequence with full-test evaluation after each
    subset. For k_splits > 1 a whole-dataset reference run (k_splits=1,
    same per-stage epoch budget) is executed unless the config carries a
    precomputed baseline_accuracy."""
    if check_config:
        cfg = cfg.validated()
    if cfg.method == "ewc":
        raise ConfigError(
            "stream learning has no task boundaries; method must be meta or plain")
    train_ds, test_ds = _load_data(cfg, data, cache_dir)
    splits = make_stream_splits(train_ds, cfg.k_splits, cfg.seed)
    model, opt = _new_model_and_opt(cfg, train_ds.images.shape[1])
    meta_cfg = _meta_config(cfg)
    run_id = cfg.run_id("stream")
    records = []
    t0 = time.perf_counter()

    for s, subset in enumerate(splits.subsets):
        _train_task(model, opt, train_ds.images[subset],
                    train_ds.labels[subset], cfg, meta_cfg, s)
        acc = evaluate(model, test_ds.images, test_ds.labels,
                       bn=cfg.eval_bn)
        records.append(MetricsRecord(
            run_id=run_id, seed=cfg.seed, method=cfg.method, m=cfg.m,
            lam=cfg.lam, task_index=s + 1, eval_task=s + 1, accuracy=acc,
            wall_clock_s=time.perf_counter() - t0))
        if log:
            log(f"[{run_id}] split {s + 1}/{cfg.k_splits}: accuracy {acc:.4f}")

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"stream_{run_id}.csv"
    write_metrics_csv(csv_path, records)

    summary = {
        "kind": "stream",
        "run_id": run_id,
        "config": cfg.to_dict(),
        "final_accuracy": records[-1].accuracy,
        "wall_clock_s": time.perf_counter() - t0,
        "metrics_csv": str(csv_path),
    }
    if cfg.baseline_accuracy is not None:
        summary["baseline_accuracy"] = cfg.baseline_accuracy
        summary["baseline_source"] = "provided"
    elif cfg.k_splits == 1:
        summary["baseline_accuracy"] = records[-1].accuracy
        summary["baseline_source"] = "self"
    else:
        base = run_stream(replace(cfg, k_splits=1),
                          data=(train_ds, test_ds), check_config=False,
                          log=log)
        summary["baseline_accuracy"] = base["final_accuracy"]
        summary["baseline_source"] = base["run_id"]
        summary["baseline_csv"] = base["metrics_csv"]
    summary_path = out_dir / f"stream_{run_id}_summary.json"
    _write_summary(summary_path, summary)
    summary["summary_json"] = str(summary_path)
    return summary


def run_toy(d=12, n_problems=20, eta=0.1, steps=None, seed=0, bins=10,
            out_dir="runs", log=None):
    """Divergence/importance tables for seeded random problems.

    Writes toy_<id>.csv with the frozen row schema
    (problem_id,i,delta_L,wh_abs,wh_norm) where delta_L is measured at the
    exhaustive binary optimum, and a companion *_visited.csv with delta_L
    at the most-visited corner of the trailing 10% of steps.
    """
    if not 1 <= d <= 24:
        raise ConfigError(f"d must lie in 1..24, got {d}")
    if n_problems < 1:
        raise ConfigError("n_problems must be >= 1")
    if not eta > 0:
        raise ConfigError("eta must be > 0")
    if bins < 1:
        raise ConfigError("bins must be >= 1")

    ident = json.dumps({"kind": "toy", "d": d, "n": n_problems, "eta": eta,
                        "steps": steps, "seed": seed, "bins": bins},
                       sort_keys=True)
    run_id = hashlib.sha256(ident.encode()).hexdigest()[:12]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    reports = []
    for pid in range(n_problems):
        problem = random_problem(d, [seed, TOY_PROBLEM_SALT, pid])
        reports.append(divergence_importance_report(
            problem, eta, steps=steps, seed=seed, bins=bins, problem_id=pid))
        if log:
            log(f"[toy {run_id}] problem {pid + 1}/{n_problems}: "
                f"spearman {reports[-1].spearman:.3f}")

    csv_path = out_dir / f"toy_{run_id}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("problem_id", "i", "delta_L", "wh_abs", "wh_norm"))
        for rep in reports:
            for i, dl, wa, wn in rep.rows():
                writer.writerow((rep.problem_id, i, repr(dl), repr(wa), repr(wn)))
    visited_path = out_dir / f"toy_{run_id}_visited.csv"
    with open(visited_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("problem_id", "i", "delta_L", "wh_abs", "wh_norm"))
        for rep in reports:
            for i in range(len(rep.wh_abs)):
                writer.writerow((rep.problem_id, i, repr(float(rep.delta_l_visited[i])),
                                 repr(float(rep.wh_abs[i])), repr(float(rep.wh_norm[i]))))

    spearmans = [rep.spearman for rep in reports]
    stacked = np.array([rep.bin_means for rep in reports])
    counts = (~np.isnan(stacked)).sum(axis=0)
    with np.errstate(invalid="ignore"):
        sums = np.nansum(stacked, axis=0)
    summary = {
        "kind": "toy",
        "run_id": run_id,
        "config": {"d": d, "n_problems": n_problems, "eta": eta,
                   "steps": steps, "seed": seed, "bins": bins},
        "spearman_per_problem": spearmans,
        "spearman_median": float(np.median(spearmans)),
        "spearman_visited_median": float(np.median(
            [rep.spearman_visited for rep in reports])),
        "bin_means_mean": [
            float(sums[b] / counts[b]) if counts[b] else None
            for b in range(bins)
        ],
        "metrics_csv": str(csv_path),
        "visited_csv": str(visited_path),
    }
    summary_path = out_dir / f"toy_{run_id}_summary.json"
    _write_summary(summary_path, summary)
    summary["summary_json"] = str(summary_path)
    return summary


def _batch_loss(model, images, labels, eval_bn, wb_override=None):
    if eval_bn == "batch":
        logits = forward_batch_stats(model, images, wb_override=wb_override)
    else:
        logits, _ = forward(model, images, mode="eval", wb_override=wb_override)
    loss, _ = softmax_cross_entropy(logits, labels)
    return loss


def run_flip_importance(cfg: ExperimentConfig, data=None, cache_dir=None,
                        check_config=True, log=None):
    """Loss change from flipping single binarized weights of a trained
    network, versus per-layer-normalized hidden-weight magnitude.

    Uses (or trains and saves) a plain-trained network, a fixed evaluation
    batch, and a seeded uniform sample over all hidden-weight positions.
    The flip negates the binarized value only; hidden weights are never
    modified, so evaluations after the study are bit-identical to before.
    """
    if check_config:
        cfg = cfg.validated()
    train_ds, test_ds = _load_data(cfg, data, cache_dir)
    run_id = cfg.run_id("flip")

    model = None
    if cfg.model_path and Path(cfg.model_path).exists():
        model = BnnModel.load(cfg.model_path)
        if log:
            log(f"[flip {run_id}] loaded model from {cfg.model_path}")
    if model is None:
        model, opt = _new_model_and_opt(cfg, train_ds.images.shape[1])
        meta_cfg = _meta_config(cfg)
        view = make_permuted_task(train_ds, cfg.seed, 0)
        _train_task(model, opt, view.permuted(), train_ds.labels, cfg,
                    meta_cfg, 0)
        if cfg.model_path:
            model.save(cfg.model_path)
        if log:
            log(f"[flip {run_id}] trained a fresh network "
                f"({cfg.epochs_per_task} epochs)")

    images = test_ds.images[:cfg.eval_batch]
    labels = test_ds.labels[:cfg.eval_batch]
    base_loss = _batch_loss(model, images, labels, cfg.eval_bn)

    layer_sizes = [layer.wh.size for layer in model.layers]
    total = sum(layer_sizes)
    offsets = np.cumsum([0] + layer_sizes)
    rng = np.random.default_rng([cfg.seed, FLIP_SALT])
    n_take = min(cfg.n_weights, total)
    flat_choice = np.sort(rng.permutation(total)[:n_take])

    wb_cache = [binarize(layer.wh) for layer in model.layers]
    layer_max = [np.abs(layer.wh).max() for layer in model.layers]
    rows = []
    for flat in flat_choice:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        local = int(flat - offsets[k])
        wb = wb_cache[k]
        original = wb.flat[local]
        wb.flat[local] = -original
        delta = _batch_loss(model, images, labels, cfg.eval_bn,
                            wb_override={k: wb}) - base_loss
        wb.flat[local] = original
        wh_abs = float(np.abs(model.layers[k].wh.flat[local]))
        rows.append((k, local, wh_abs, wh_abs / layer_max[k], delta))

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"flip_{run_id}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("layer", "index", "wh_abs", "wh_norm", "delta_L"))
        for k, local, wh_abs, wh_norm, delta in rows:
            writer.writerow((k, local, repr(wh_abs), repr(float(wh_norm)),
                             repr(float(delta))))

    from scipy import stats
    wh_norms = np.array([r[3] for r in rows])
    deltas = np.array([r[4] for r in rows])
    n_bins = 10
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    which = np.clip(np.digitize(wh_norms, edges[1:-1]), 0, n_bins - 1)
    bin_means, bin_centers = [], []
    for b in range(n_bins):
        members = deltas[which == b]
        if len(members):
            bin_means.append(float(members.mean()))
            bin_centers.append(float(wh_norms[which == b].mean()))
    summary = {
        "kind": "flip_importance",
        "run_id": run_id,
        "config": cfg.to_dict(),
        "base_loss": base_loss,
        "n_flips": len(rows),
        "spearman_raw": float(stats.spearmanr(wh_norms, deltas).statistic),
        "spearman_binned": float(stats.spearmanr(bin_centers, bin_means).statistic),
        "bin_centers": bin_centers,
        "bin_means": bin_means,
        "metrics_csv": str(csv_path),
    }
    summary_path = out_dir / f"flip_{run_id}_summary.json"
    _write_summary(summary_path, summary)
    summary["summary_json"] = str(summary_path)
    return summary


def emit_report(csv_paths, out_path):
    """Aggregate metrics CSVs into plot-ready per-method accuracy curves:
    for each (method, task_index), accuracies are averaged over eval tasks
    per seed, then mean/min/max taken across seeds."""
    rows = []
    for path in csv_paths:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader, ()))
            if header != CSV_COLUMNS:
                unexpected = set(header) ^ set(CSV_COLUMNS)
                raise ValueError(
                    f"{path}: unexpected metrics schema, mismatched column(s) "
                    f"{sorted(unexpected)}")
            for row in reader:
                rec = dict(zip(CSV_COLUMNS, row))
                try:
                    rec["accuracy"] = float(rec["accuracy"])
                except ValueError:
                    raise ValueError(f"{path}: non-numeric column 'accuracy'")
                rec["task_index"] = int(rec["task_index"])
                rec["seed"] = int(rec["seed"])
                rows.append(rec)
    if not rows:
        raise ValueError("no metric rows in the given CSV files")

    per_seed = {}
    for rec in rows:
        key = (rec["method"], rec["seed"], rec["task_index"])
        per_seed.setdefault(key, []).append(rec["accuracy"])
    curves = {}
    for (method, seed, task_index), accs in per_seed.items():
        avg = float(np.mean(accs))
        curves.setdefault(method, {}).setdefault(task_index, {})[seed] = avg

    report = {"methods": {}, "inputs": [str(p) for p in csv_paths]}
    for method, by_task in sorted(curves.items()):
        tasks = sorted(by_task)
        seed_values = [sorted(by_task[t].items()) for t in tasks]
        report["methods"][method] = {
            "task_index": tasks,
            "mean": [float(np.mean([v for _, v in sv])) for sv in seed_values],
            "min": [float(np.min([v for _, v in sv])) for sv in seed_values],
            "max": [float(np.max([v for _, v in sv])) for sv in seed_values],
            "per_seed": {
                str(seed): [by_task[t].get(seed) for t in tasks]
                for seed in sorted({s for sv in seed_values for s, _ in sv})
            },
        }
    with open(out_path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report
