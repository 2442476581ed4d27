"""Experiment orchestration: benchmark generators, multi-seed runs, CSV/JSON
export, method comparison, and the hypergradient oracle suite.

Config files are JSON. Random state never comes from the environment: the
config pins the PRNG algorithm identifier and every run derives its streams
from the run seed, so re-running a config yields byte-identical exports, in
sequential or parallel execution alike.
"""
from __future__ import annotations

import concurrent.futures
import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import bilevel
from .model import BodySpec, HeadSpec, build_model, register_task_head
from .prng import PRNG_ALGORITHM, PRNGSpec, derive_seed, substream
from .records import run_record_to_csv, run_record_to_json
from .stats import SampleSet, build_comparison_table
from .strategies import (
    RunRecord,
    TaskWeights,
    TrainerConfig,
    finetune,
    pretrain_then_finetune,
    train_multitask,
    train_tartan_meta,
    uniform_task_weights,
)
from .tasks import (
    LabeledDataset,
    SyntheticSpec,
    Task,
    dataset_manifest,
    derive_domain_task,
    derive_masked_reconstruction_task,
    generate_synthetic_classification,
    load_csv_dataset,
    teacher_logits,
)

CONFIG_SCHEMA_VERSION = 1
STRATEGIES = ("finetune_only", "pretrain_finetune", "tartan_mt", "tartan_meta")
BENCHMARKS = ("synth-helpful-harmful", "synth-tapt-dapt", "csv")


@dataclass
class Benchmark:
    name: str
    body_spec: BodySpec
    end_task: Task
    aux_tasks: List[Task]
    manifest: Optional[dict] = None


@dataclass(frozen=True)
class ExperimentConfig:
    benchmark: str
    strategy: str
    trainer: TrainerConfig
    seeds: Tuple[int, ...]
    output_dir: str
    label: str
    benchmark_params: Dict[str, object]
    strategy_params: Dict[str, object]
    prng: PRNGSpec

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.benchmark not in BENCHMARKS:
            raise ValueError(f"unknown benchmark {self.benchmark!r}; expected one of {BENCHMARKS}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be nonempty and distinct")
        if self.strategy == "tartan_mt":
            fixed = self.strategy_params.get("fixed_weights")
            if fixed is not None and not isinstance(fixed, dict):
                raise ValueError("fixed_weights must map task_id -> raw weight")


def load_config(source) -> ExperimentConfig:
    """Parse a config dict or JSON file into an ExperimentConfig."""
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            doc = json.load(fh)
    else:
        doc = dict(source)
    if doc.get("schema_version", CONFIG_SCHEMA_VERSION) != CONFIG_SCHEMA_VERSION:
        raise ValueError(f"unsupported config schema version {doc.get('schema_version')}")
    algorithm = doc.get("prng", {}).get("algorithm", PRNG_ALGORITHM)
    trainer = TrainerConfig(**doc.get("trainer", {}))
    return ExperimentConfig(
        benchmark=doc["benchmark"],
        strategy=doc["strategy"],
        trainer=trainer,
        seeds=tuple(int(s) for s in doc.get("seeds", [0])),
        output_dir=doc.get("output_dir", "runs"),
        label=doc.get("label", doc["strategy"]),
        benchmark_params=dict(doc.get("benchmark_params", {})),
        strategy_params=dict(doc.get("strategy_params", {})),
        prng=PRNGSpec(root_seed=0, algorithm=algorithm),
    )


def config_to_dict(config: ExperimentConfig) -> dict:
    from dataclasses import asdict

    return {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "benchmark": config.benchmark,
        "strategy": config.strategy,
        "trainer": asdict(config.trainer),
        "seeds": list(config.seeds),
        "output_dir": config.output_dir,
        "label": config.label,
        "benchmark_params": config.benchmark_params,
        "strategy_params": config.strategy_params,
        "prng": {"algorithm": config.prng.algorithm},
    }


# --------------------------------------------------------------------------
# Benchmark generators
# --------------------------------------------------------------------------

HELPFUL_HARMFUL_DEFAULTS = {
    "benchmark_seed": 0,
    "input_dim": 16,
    "num_classes": 4,
    "hidden_dims": [32],
    "activation": "tanh",
    "end_train": 128,
    "end_val": 256,
    "end_test": 512,
    "end_noise": 0.05,
    "aux_train": 2000,
    "helpful_noise": 0.2,
}

TAPT_DAPT_DEFAULTS = {
    "benchmark_seed": 0,
    "latent_dim": 4,
    "input_dim": 16,
    "num_classes": 4,
    "hidden_dims": [32],
    "activation": "tanh",
    "end_train": 64,
    "end_val": 256,
    "end_test": 512,
    "end_noise": 0.1,
    "observation_noise": 0.1,
    "mask_prob": 0.15,
    "n": 10,
    "include_tapt": True,
}


def build_helpful_harmful(params: Dict[str, object]) -> Benchmark:
    """End task plus one genuinely helpful and one harmful auxiliary task.

    The helpful task shares the end task's labeling function (with extra label
    noise) on fresh inputs. The harmful one assigns uniformly random labels on
    the end task's own input stream, so uniform mixing trains directly
    conflicting supervision on exactly the inputs the end task cares about.
    """
    p = {**HELPFUL_HARMFUL_DEFAULTS, **params}
    seed = int(p["benchmark_seed"])
    end = generate_synthetic_classification(SyntheticSpec(
        teacher_seed=seed, input_dim=p["input_dim"], num_classes=p["num_classes"],
        train_size=p["end_train"], val_size=p["end_val"], test_size=p["end_test"],
        noise_rate=p["end_noise"], relatedness="same_teacher",
        data_seed=seed, task_id="end"))
    helpful = generate_synthetic_classification(SyntheticSpec(
        teacher_seed=seed, input_dim=p["input_dim"], num_classes=p["num_classes"],
        train_size=p["aux_train"], val_size=1, test_size=1,
        noise_rate=p["helpful_noise"], relatedness="same_teacher",
        data_seed=seed + 1, task_id="helpful"))
    harmful = generate_synthetic_classification(SyntheticSpec(
        teacher_seed=seed, input_dim=p["input_dim"], num_classes=p["num_classes"],
        train_size=p["aux_train"], val_size=1, test_size=1,
        noise_rate=0.0, relatedness="random_labels",
        data_seed=seed, task_id="random_labels"))
    body = BodySpec(input_dim=p["input_dim"], hidden_dims=tuple(p["hidden_dims"]),
                    activation=p["activation"])
    return Benchmark("synth-helpful-harmful", body, end, [helpful, harmful])


def _latent_features(benchmark_seed: int, tag: str, rows: int, latent_dim: int,
                     input_dim: int, observation_noise: float) -> np.ndarray:
    """Low-rank inputs x = z B + noise: masked entries are predictable from the
    observed ones, so reconstruction carries representation signal."""
    z = substream(benchmark_seed, "data", "latent", tag).standard_normal((rows, latent_dim))
    mixing = substream(benchmark_seed, "init", "latent-mixing").standard_normal((latent_dim, input_dim))
    mixing = mixing / math.sqrt(latent_dim)
    eps = substream(benchmark_seed, "data", "latent-eps", tag).standard_normal((rows, input_dim))
    return z @ mixing + observation_noise * eps


def _label_with_teacher(x: np.ndarray, benchmark_seed: int, num_classes: int,
                        noise: float, tag: str) -> np.ndarray:
    y = np.argmax(teacher_logits(x, benchmark_seed, num_classes), axis=1)
    if noise > 0:
        rng = substream(benchmark_seed, "data", "latent-label-noise", tag)
        flip = rng.random(x.shape[0]) < noise
        offsets = rng.integers(1, num_classes, size=x.shape[0])
        y = np.where(flip, (y + offsets) % num_classes, y)
    return y.astype(np.int64)


def build_tapt_dapt(params: Dict[str, object]) -> Benchmark:
    """End task plus masked-reconstruction auxiliaries on its own data (TAPT
    analogue) and on an n x |Train| pool from the same domain (DAPT analogue).

    Reconstruction tasks double the model input width (features plus mask
    indicator), so the end task's inputs are padded with a zero indicator
    half and the body takes 2 * input_dim.
    """
    p = {**TAPT_DAPT_DEFAULTS, **params}
    seed = int(p["benchmark_seed"])
    d = int(p["input_dim"])
    sizes = (int(p["end_train"]), int(p["end_val"]), int(p["end_test"]))
    m = sum(sizes)
    x = _latent_features(seed, "end", m, int(p["latent_dim"]), d, float(p["observation_noise"]))
    y = _label_with_teacher(x, seed, int(p["num_classes"]), float(p["end_noise"]), "end")
    end_ds = LabeledDataset(
        features=x, targets=y,
        train_idx=np.arange(0, sizes[0]),
        val_idx=np.arange(sizes[0], sizes[0] + sizes[1]),
        test_idx=np.arange(sizes[0] + sizes[1], m),
    )
    end = Task(task_id="end", objective="cross_entropy", dataset=end_ds,
               head_spec=HeadSpec(output_dim=int(p["num_classes"]), kind="classification"),
               pad_indicator=True)

    aux: List[Task] = []
    if p["include_tapt"]:
        aux.append(derive_masked_reconstruction_task(end_ds, float(p["mask_prob"]),
                                                     seed=seed, task_id="tapt"))
    n = int(p["n"])
    pool_rows = n * sizes[0]
    pool_x = _latent_features(seed, "domain-pool", pool_rows, int(p["latent_dim"]), d,
                              float(p["observation_noise"]))
    pool = LabeledDataset(features=pool_x, targets=np.zeros(pool_rows),
                          train_idx=np.arange(pool_rows),
                          val_idx=np.empty(0, dtype=np.int64),
                          test_idx=np.empty(0, dtype=np.int64))
    aux.append(derive_domain_task(pool, n, sizes[0], float(p["mask_prob"]),
                                  seed=seed, task_id="dapt"))

    body = BodySpec(input_dim=2 * d, hidden_dims=tuple(p["hidden_dims"]),
                    activation=p["activation"])
    return Benchmark("synth-tapt-dapt", body, end, aux)


def build_csv_benchmark(params: Dict[str, object]) -> Benchmark:
    """End task from a CSV manifest, with an optional TAPT-analogue auxiliary."""
    required = ("path", "label_column")
    missing = [k for k in required if k not in params]
    if missing:
        raise ValueError(f"csv benchmark needs {missing}")
    fractions = params.get("split_fractions", (0.6, 0.2, 0.2))
    seed = int(params.get("benchmark_seed", 0))
    ds = load_csv_dataset(params["path"], params["label_column"], fractions, seed)
    num_classes = len(ds.label_mapping)
    with_tapt = bool(params.get("include_tapt", True))
    hidden = tuple(params.get("hidden_dims", [32]))
    activation = params.get("activation", "tanh")
    if with_tapt:
        end = Task(task_id="end", objective="cross_entropy", dataset=ds,
                   head_spec=HeadSpec(output_dim=num_classes), pad_indicator=True)
        aux = [derive_masked_reconstruction_task(ds, float(params.get("mask_prob", 0.15)),
                                                 seed=seed, task_id="tapt")]
        body = BodySpec(input_dim=2 * ds.num_features, hidden_dims=hidden, activation=activation)
    else:
        end = Task(task_id="end", objective="cross_entropy", dataset=ds,
                   head_spec=HeadSpec(output_dim=num_classes))
        aux = []
        body = BodySpec(input_dim=ds.num_features, hidden_dims=hidden, activation=activation)
    manifest = dataset_manifest(ds, path=str(params["path"]), label_column=params["label_column"],
                                split_fractions=list(fractions), split_seed=seed)
    return Benchmark("csv", body, end, aux, manifest=manifest)


def build_benchmark(name: str, params: Dict[str, object]) -> Benchmark:
    if name == "synth-helpful-harmful":
        return build_helpful_harmful(params)
    if name == "synth-tapt-dapt":
        return build_tapt_dapt(params)
    if name == "csv":
        return build_csv_benchmark(params)
    raise ValueError(f"unknown benchmark {name!r}")


# --------------------------------------------------------------------------
# Experiment runner
# --------------------------------------------------------------------------


def run_single_seed(config: ExperimentConfig, seed: int) -> RunRecord:
    bench = build_benchmark(config.benchmark, config.benchmark_params)
    model = build_model(bench.body_spec, seed)
    # Each head draws from its own derived stream so no two heads start
    # bit-identical; cross-task gradient alignments would otherwise be
    # degenerate at step 0.
    register_task_head(model, bench.end_task.task_id, bench.end_task.head_spec,
                       derive_seed(seed, "head", bench.end_task.task_id), end_task=True)
    for task in bench.aux_tasks:
        register_task_head(model, task.task_id, task.head_spec,
                           derive_seed(seed, "head", task.task_id))
    cfg = replace(config.trainer, seed=seed)

    if config.strategy == "finetune_only":
        return finetune(model, bench.end_task, cfg)
    if config.strategy == "pretrain_finetune":
        steps = config.strategy_params.get("pretrain_steps")
        return pretrain_then_finetune(model, bench.aux_tasks, bench.end_task, cfg,
                                      pretrain_steps=None if steps is None else int(steps))
    if config.strategy == "tartan_mt":
        fixed = config.strategy_params.get("fixed_weights")
        task_ids = [bench.end_task.task_id] + [t.task_id for t in bench.aux_tasks]
        weights = TaskWeights(raw={k: float(v) for k, v in fixed.items()}) if fixed \
            else uniform_task_weights(task_ids)
        return train_multitask(model, bench.end_task, bench.aux_tasks, weights, cfg)
    if config.strategy == "tartan_meta":
        return train_tartan_meta(model, bench.end_task, bench.aux_tasks, cfg)
    raise ValueError(f"unknown strategy {config.strategy!r}")


def _seed_job(config_doc: dict, seed: int, out_dir: str) -> dict:
    """Run one seed and write its record files; returns the summary entry."""
    config = load_config(config_doc)
    out = Path(out_dir)
    try:
        record = run_single_seed(config, seed)
    except Exception as exc:
        return {"seed": seed, "error": f"{type(exc).__name__}: {exc}"}
    run_record_to_csv(record, out / f"run_seed{seed}.csv")
    run_record_to_json(record, out / f"run_seed{seed}.json")
    return {
        "seed": seed,
        "final_test_metric": record.final_test_metric,
        "final_val_metric": record.final_val_metric,
        "stop_reason": record.stop_reason,
        "best_val_step": record.best_val_step,
        "steps_logged": len(record.steps),
    }


def run_experiment(config, output_dir: Optional[str] = None,
                   workers: int = 1) -> dict:
    """Run every seed of a config; write per-seed records plus one summary.

    Seeds are independent: they may run in parallel worker processes and
    produce the same bytes as a sequential run. A failed seed is recorded
    with its error and the remaining seeds still run.
    """
    if not isinstance(config, ExperimentConfig):
        config = load_config(config)
    out = Path(output_dir if output_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = config_to_dict(config)

    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {seed: pool.submit(_seed_job, doc, seed, str(out)) for seed in config.seeds}
            entries = [futures[seed].result() for seed in config.seeds]
    else:
        entries = [_seed_job(doc, seed, str(out)) for seed in config.seeds]

    metrics = [e["final_test_metric"] for e in entries if "error" not in e
               and math.isfinite(e["final_test_metric"])]
    summary = {
        "label": config.label,
        "benchmark": config.benchmark,
        "strategy": config.strategy,
        "metric_name": "test_accuracy",
        "seeds": list(config.seeds),
        "runs": entries,
        "metric_mean": float(np.mean(metrics)) if metrics else None,
        "metric_std": float(np.std(metrics, ddof=1)) if len(metrics) > 1 else 0.0,
        "config": doc,
    }
    if config.benchmark == "csv":
        summary["dataset_manifest"] = build_benchmark(config.benchmark,
                                                      config.benchmark_params).manifest
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return summary


def load_summary(record_dir) -> dict:
    with open(Path(record_dir) / "summary.json", encoding="utf-8") as fh:
        return json.load(fh)


def compare_methods(record_dirs: Sequence[str], baseline: str,
                    n_permutations: int = 10_000, seed: int = 0,
                    output_dir: Optional[str] = None) -> Tuple[List[dict], str]:
    """Mean/std table with permutation p-values of every method vs the baseline.

    ``baseline`` is a record directory (also present in record_dirs or not).
    """
    dirs = list(dict.fromkeys([baseline, *record_dirs]))
    summaries = [load_summary(d) for d in dirs]
    metric_names = {s["metric_name"] for s in summaries}
    benchmarks = {s["benchmark"] for s in summaries}
    if len(metric_names) != 1 or len(benchmarks) != 1:
        raise ValueError(f"mismatched comparisons: metrics {metric_names}, benchmarks {benchmarks}")

    # Accuracies live in [0, 1]; the table reports percentage points so the
    # two-decimal mean_{std} cells stay informative. The permutation test is
    # scale-invariant, so p-values are unaffected.
    scale = 100.0 if metric_names == {"test_accuracy"} else 1.0
    samples: Dict[str, SampleSet] = {}
    for s in summaries:
        values = [r["final_test_metric"] * scale for r in s["runs"] if "error" not in r]
        if len(values) < 2:
            raise ValueError(f"method {s['label']!r} needs >= 2 successful seeds for testing")
        if s["label"] in samples:
            raise ValueError(f"duplicate method label {s['label']!r}")
        samples[s["label"]] = SampleSet(label=s["label"], values=tuple(values))
    baseline_label = load_summary(baseline)["label"]
    rows, text = build_comparison_table(samples, baseline_label,
                                        n_permutations=n_permutations, seed=seed)
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "comparison.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["method", "n_seeds", "mean", "std", "formatted", "p_value", "significant"])
            for row in rows:
                writer.writerow([row["method"], row["n_seeds"], repr(row["mean"]), repr(row["std"]),
                                 row["formatted"],
                                 "" if row["p_value"] is None else repr(row["p_value"]),
                                 str(row["significant"]).lower()])
        with open(out / "comparison.txt", "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    return rows, text


# --------------------------------------------------------------------------
# Oracle suite
# --------------------------------------------------------------------------

ORACLE_DEFAULTS = {
    "instances": 100,
    "dim_max": 10,
    "aux_max": 3,
    "seed": 0,
    "fd_step": 1e-5,
    "neumann_ks": [0, 1, 5, 20],
    "sign_trials": 1000,
    "sign_agreement_threshold": 0.9,
    "output_dir": "oracle_out",
}


def _identity_hessian_instance(seed: int, dim: int) -> bilevel.QuadraticTaskSet:
    """Two tasks with A = I and weights summing to 1, so the total Hessian is I."""
    rng = substream(seed, "init", "identity-instance")
    eye = np.eye(dim)
    qmat, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    a_val = (qmat * rng.uniform(0.5, 2.0, dim)) @ qmat.T
    return bilevel.QuadraticTaskSet(
        a_mats=(eye, eye),
        b_vecs=(rng.standard_normal(dim), rng.standard_normal(dim)),
        a_val=(a_val + a_val.T) / 2.0,
        b_val=rng.standard_normal(dim),
        weights=(0.5, 0.5),
    )


def run_oracle_suite(config: Optional[dict] = None,
                     output_dir: Optional[str] = None) -> Tuple[dict, bool]:
    """Drive the quadratic oracle end to end; returns (summary, all_passed).

    Emits a CSV with one row per (instance, method, task index) and a JSON
    summary with a pass/fail entry per invariant.
    """
    p = {**ORACLE_DEFAULTS, **(config or {})}
    if output_dir is not None:
        p["output_dir"] = output_dir
    out = Path(p["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    seed0 = int(p["seed"])
    rows: List[dict] = []
    checks: List[dict] = []

    def record_row(instance: str, method: str, i: int, value: float,
                   exact: Optional[float], cond: float, note: str = "") -> None:
        err = "" if exact is None else repr(abs(value - exact))
        rel = ""
        if exact is not None:
            rel = repr(abs(value - exact) / max(1e-12, abs(exact)))
        rows.append({"instance": instance, "method": method, "task_index": i,
                     "value": repr(value), "abs_error_vs_exact": err,
                     "rel_error_vs_exact": rel, "condition_number": repr(cond),
                     "note": note})

    # Exact vs finite differences on random well-conditioned instances.
    size_rng = substream(seed0, "init", "oracle-sizes")
    worst_rel = 0.0
    for idx in range(int(p["instances"])):
        dim = int(size_rng.integers(1, int(p["dim_max"]) + 1))
        n_aux = int(size_rng.integers(0, int(p["aux_max"]) + 1))
        q = bilevel.random_instance(seed0 + idx, dim, n_aux)
        h = bilevel.total_matrix(q, q.weights)
        cond = float(np.linalg.cond(h))
        for i in range(q.num_tasks):
            exact = bilevel.exact_hypergradient(q, q.weights, i)
            fd = bilevel.finite_difference_hypergradient(q, q.weights, i, h=float(p["fd_step"]))
            rel = abs(exact - fd) / max(1.0, abs(exact), abs(fd))
            worst_rel = max(worst_rel, rel)
            record_row(f"random-{idx}", "exact", i, exact, None, cond)
            record_row(f"random-{idx}", "finite_difference", i, fd, exact, cond)
            approx = bilevel.identity_hessian_approx(q, q.weights, i)
            record_row(f"random-{idx}", "identity_hessian", i, approx, exact, cond)
            theta = bilevel.solve_inner(q, q.weights)
            record_row(f"random-{idx}", "one_step", i,
                       bilevel.one_step_approx(q, q.weights, theta, i, beta=1.0), exact, cond)
    checks.append({"name": "exact_matches_finite_difference",
                   "passed": bool(worst_rel <= 1e-6),
                   "detail": f"max relative error {worst_rel:.3e} over {p['instances']} instances"})

    # Closed-form 1-D anchor.
    q1 = bilevel.one_dim_instance(a=0.0, c=1.0, v=1.0, w_end=0.5, w_aux=0.5)
    exact_1d = bilevel.exact_hypergradient(q1, q1.weights, 1)
    fd_1d = bilevel.finite_difference_hypergradient(q1, q1.weights, 1, h=1e-5)
    checks.append({"name": "one_dim_closed_form",
                   "passed": bool(abs(exact_1d - (-0.5)) <= 1e-8 and abs(fd_1d - (-0.5)) <= 1e-8),
                   "detail": f"exact {exact_1d!r}, finite difference {fd_1d!r}, target -0.5"})
    record_row("one-dim", "exact", 1, exact_1d, -0.5, 1.0)
    record_row("one-dim", "finite_difference", 1, fd_1d, -0.5, 1.0)

    # Identity-Hessian family: approximation must equal the exact value.
    worst_identity = 0.0
    for idx in range(20):
        q = _identity_hessian_instance(seed0 + idx, dim=4)
        for i in range(q.num_tasks):
            exact = bilevel.exact_hypergradient(q, q.weights, i)
            approx = bilevel.identity_hessian_approx(q, q.weights, i)
            worst_identity = max(worst_identity, abs(exact - approx))
            record_row(f"identity-{idx}", "identity_hessian", i, approx, exact, 1.0)
    checks.append({"name": "identity_hessian_exact_on_identity_instances",
                   "passed": bool(worst_identity <= 1e-12),
                   "detail": f"max |identity - exact| = {worst_identity:.3e}"})

    # Neumann truncation: monotone convergence inside (0, 2), divergence outside.
    ks = [int(k) for k in p["neumann_ks"]]
    mono_ok = True
    for idx in range(20):
        rng = substream(seed0 + idx, "init", "neumann-instance")
        qmat, _ = np.linalg.qr(rng.standard_normal((5, 5)))
        eigs = rng.uniform(0.05, 1.95, size=5)
        h = (qmat * eigs) @ qmat.T
        h = (h + h.T) / 2.0
        inv = np.linalg.inv(h)
        errs = [float(np.linalg.norm(bilevel.neumann_inverse(h, k) - inv)) for k in ks]
        if any(b >= a for a, b in zip(errs, errs[1:])):
            mono_ok = False
        for k, e in zip(ks, errs):
            record_row(f"neumann-{idx}", f"neumann_k{k}", -1, e, 0.0, float(np.linalg.cond(h)),
                       note="error vs direct inverse")
    checks.append({"name": "neumann_error_monotone_in_convergent_region",
                   "passed": bool(mono_ok),
                   "detail": f"k sweep {ks} on spectra within (0, 2)"})

    # Companion eigenvalues at 1 contribute zero series error, so the 2.5 mode
    # drives the norm monotonically upward.
    h_div = np.diag([2.5, 1.0, 1.0])
    inv_div = np.linalg.inv(h_div)
    div_errs = [float(np.linalg.norm(bilevel.neumann_inverse(h_div, k) - inv_div)) for k in ks]
    diverges = all(b > a for a, b in zip(div_errs, div_errs[1:]))
    for k, e in zip(ks, div_errs):
        record_row("neumann-divergent", f"neumann_k{k}", -1, e, 0.0,
                   float(np.linalg.cond(h_div)), note="expected-divergent")
    checks.append({"name": "neumann_diverges_outside_region",
                   "passed": bool(diverges),
                   "detail": f"errors {['%.3e' % e for e in div_errs]} at eigenvalue 2.5"})

    # Sign agreement of the identity approximation on a well-conditioned family.
    agree = 0
    considered = 0
    for idx in range(int(p["sign_trials"])):
        q = bilevel.random_instance(seed0 + 10_000 + idx, 5, 2)
        i = int(substream(seed0, "data", "sign-task-pick", idx).integers(0, q.num_tasks))
        exact = bilevel.exact_hypergradient(q, q.weights, i)
        approx = bilevel.identity_hessian_approx(q, q.weights, i)
        if abs(exact) > 1e-3 and abs(approx) > 1e-3:
            considered += 1
            if (exact > 0) == (approx > 0):
                agree += 1
    ratio = agree / considered if considered else 0.0
    checks.append({"name": "identity_hessian_sign_agreement",
                   "passed": bool(ratio >= float(p["sign_agreement_threshold"])),
                   "detail": f"agreement {ratio:.3f} on {considered} of {p['sign_trials']} trials"})

    with open(out / "oracle_report.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["instance", "method", "task_index", "value",
                                                "abs_error_vs_exact", "rel_error_vs_exact",
                                                "condition_number", "note"],
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)

    all_passed = all(c["passed"] for c in checks)
    summary = {"config": {k: v for k, v in p.items()}, "checks": checks, "all_passed": all_passed}
    with open(out / "oracle_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return summary, all_passed
