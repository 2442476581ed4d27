"""Training regimes over a shared-body multi-task model.

Four strategies:

* ``finetune``              -- end task only, early stopped on its validation metric.
* ``pretrain_then_finetune``-- auxiliary-only phase (no end-task gradient touches
                               the body), then plain fine-tuning.
* ``train_multitask``       -- fixed softmax task weights, one batch per task per
                               step, early stopped on end-task validation.
* ``train_tartan_meta``     -- online meta-learned task weights: per step, a fresh
                               meta head is fit on one end-task train batch, its
                               validation gradient is aligned against every task's
                               body gradient, and the raw weights move by
                               eta * alignment before the softmax mixture is applied.

All batch draws are counter-based (keyed by task, split, and step index), so
strategies that share a seed consume identical data streams and the reduction
identities between them hold to floating-point exactness.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .autodiff import GradientMap, NonFiniteError, ParamSet, backward, loss as loss_fn
from .model import META_OWNER, HeadSpec, MultiTaskModel, joint_params, reinit_meta_head, task_output
from .prng import derive_seed, substream
from .tasks import Batch, Task, full_split_batch, materialize_batch, sample_batch

log = logging.getLogger(__name__)

ALIGNMENT_MEASURES = ("cosine", "dot")
META_OBJECTIVE_MODES = ("separate_head", "same_head")
OPTIMIZERS = ("sgd", "adam")

CONTINUE = "continue"
STOP = "stop"


class DivergenceError(RuntimeError):
    """A training loss went non-finite; the run is aborted with diagnostics."""


@dataclass(frozen=True)
class TrainerConfig:
    body_lr: float = 1e-3                      # beta_1, body step size
    head_lr: float = 1e-3                      # beta_2, head step size
    weight_lr: float = 0.1                     # eta, task-weight step size (0 disables)
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    batch_sizes: Optional[Dict[str, int]] = None
    meta_head_steps: int = 10
    meta_head_lr: float = 1e-3
    meta_head_weight_decay: float = 0.1
    meta_head_batch_size: int = 16
    meta_update_period: int = 1
    alignment: str = "cosine"
    meta_objective_mode: str = "separate_head"
    patience: int = 5
    min_delta: float = 1e-4
    max_steps: int = 500
    validation_period: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.body_lr <= 0 or self.head_lr <= 0 or self.meta_head_lr <= 0:
            raise ValueError("step sizes must be positive")
        if self.weight_lr < 0:
            raise ValueError("weight_lr must be >= 0 (0 pins the weights)")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.alignment not in ALIGNMENT_MEASURES:
            raise ValueError(f"unknown alignment measure {self.alignment!r}")
        if self.meta_objective_mode not in META_OBJECTIVE_MODES:
            raise ValueError(f"unknown meta objective mode {self.meta_objective_mode!r}")
        if self.patience < 1 or self.meta_update_period < 1 or self.validation_period < 1:
            raise ValueError("patience and periods must be >= 1")
        if self.max_steps < 0 or self.meta_head_steps < 0:
            raise ValueError("step budgets must be >= 0")

    def batch_size_for(self, task_id: str) -> int:
        if self.batch_sizes and task_id in self.batch_sizes:
            return self.batch_sizes[task_id]
        return self.batch_size


def softmax_weights(raw: Mapping[str, float]) -> Dict[str, float]:
    keys = list(raw)
    values = np.asarray([raw[k] for k in keys], dtype=np.float64)
    shifted = np.exp(values - values.max())
    alpha = shifted / shifted.sum()
    return dict(zip(keys, alpha.tolist()))


@dataclass(frozen=True)
class TaskWeights:
    """Raw task weights and their softmax-normalized mixture."""

    raw: Dict[str, float]

    def __post_init__(self):
        if not self.raw:
            raise ValueError("no tasks to weight")
        for k, v in self.raw.items():
            if not math.isfinite(v):
                raise ValueError(f"non-finite raw weight for {k!r}")

    @property
    def normalized(self) -> Dict[str, float]:
        return softmax_weights(self.raw)


def uniform_task_weights(task_ids: Sequence[str]) -> TaskWeights:
    n = len(task_ids)
    return TaskWeights(raw={tid: 1.0 / n for tid in task_ids})


def update_task_weights(weights: TaskWeights, alignments: Mapping[str, float],
                        eta: float) -> TaskWeights:
    """raw_i <- raw_i + eta * alignment_i for every task, end task included."""
    missing = [tid for tid in weights.raw if tid not in alignments]
    if missing:
        raise ValueError(f"alignments missing for tasks {missing}")
    for tid, a in alignments.items():
        if not math.isfinite(a):
            raise ValueError(f"non-finite alignment for task {tid!r}")
    return TaskWeights(raw={tid: w + eta * alignments[tid] for tid, w in weights.raw.items()})


def compute_alignment(g_meta: GradientMap, g_task: GradientMap, measure: str = "cosine") -> float:
    """Alignment between two body-gradient maps flattened in canonical order.

    Cosine returns 0 when either norm falls below 1e-12.
    """
    if measure not in ALIGNMENT_MEASURES:
        raise ValueError(f"unknown alignment measure {measure!r}")
    order = g_meta.keys()
    if set(order) != set(g_task.keys()):
        raise ValueError("gradient maps cover different parameter names")
    a = g_meta.flatten(order)
    b = g_task.flatten(order)
    dot = float(a @ b)
    if measure == "dot":
        return dot
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return dot / (na * nb)


def early_stop_check(history: Sequence[float], patience: int, min_delta: float) -> str:
    """Stop iff none of the last ``patience`` metrics beats the prior best by > min_delta."""
    if patience < 1:
        raise ValueError("patience must be >= 1")
    n = len(history)
    if n == 0:
        return CONTINUE
    for i in range(max(0, n - patience), n):
        best_prev = max(history[:i]) if i > 0 else -math.inf
        if history[i] > best_prev + min_delta:
            return CONTINUE
    return STOP


@dataclass
class LoggedStep:
    step: int
    alpha: Dict[str, float]
    losses: Dict[str, float]
    val_accuracy: Optional[float] = None
    val_macro_f1: Optional[float] = None


@dataclass
class RunRecord:
    strategy: str
    task_ids: List[str]                        # end task first
    steps: List[LoggedStep]
    final_val_metric: float
    final_test_metric: float
    stop_reason: str                           # "plateau" | "max_steps"
    best_val_step: int
    seed: int
    config: Dict[str, object]


class _Optimizer:
    """SGD or Adam over one ParamSet, stepping from externally supplied gradients."""

    def __init__(self, params: ParamSet, cfg: TrainerConfig, lr: float):
        self.params = params
        self.kind = cfg.optimizer
        self.lr = lr
        self.b1, self.b2, self.eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
        self.t = 0
        if self.kind == "adam":
            self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
            self.v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        for name, tensor in self.params.items():
            g = grads[name]
            if self.kind == "sgd":
                tensor.data = tensor.data - self.lr * g
                continue
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            m_hat = self.m[name] / (1.0 - self.b1 ** self.t)
            v_hat = self.v[name] / (1.0 - self.b2 ** self.t)
            tensor.data = tensor.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _task_grads(model: MultiTaskModel, task: Task, batch: Batch,
                step: int) -> Tuple[float, GradientMap, GradientMap]:
    """One forward/backward for a task batch: loss, body grads, head grads."""
    params = joint_params(model, task.task_id)
    try:
        out = task_output(model, task.task_id, batch.inputs)
        node = loss_fn(out, batch.targets, task.objective, mask=batch.mask)
    except NonFiniteError as exc:
        raise DivergenceError(
            f"diverged at step {step} on task {task.task_id!r}: {exc}") from exc
    value = node.item()
    grads = backward(node, params)
    body_names = set(model.body.names())
    body = GradientMap({n: g for n, g in grads.items() if n in body_names})
    head = GradientMap({n: g for n, g in grads.items() if n not in body_names})
    return value, body, head


def _body_loss_grad(model: MultiTaskModel, owner: str, task: Task, batch: Batch) -> GradientMap:
    """Body-only gradient of the loss computed through one head."""
    out = task_output(model, owner, batch.inputs)
    node = loss_fn(out, batch.targets, task.objective, mask=batch.mask)
    return backward(node, model.body)


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray, num_classes: int) -> float:
    """Unweighted mean of per-class F1; classes with no predictions and no
    support contribute 0."""
    scores = []
    for c in range(num_classes):
        tp = int(np.sum((y_pred == c) & (y_true == c)))
        fp = int(np.sum((y_pred == c) & (y_true != c)))
        fn = int(np.sum((y_pred != c) & (y_true == c)))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def evaluate_classification(model: MultiTaskModel, task: Task, split: str) -> Tuple[float, float]:
    """(accuracy, macro F1) over a full split."""
    batch = full_split_batch(task, split)
    logits = task_output(model, task.task_id, batch.inputs).data
    pred = np.argmax(logits, axis=1)
    y = np.asarray(batch.targets, dtype=np.int64)
    acc = float(np.mean(pred == y))
    return acc, macro_f1(y, pred, logits.shape[1])


def estimate_meta_head(model: MultiTaskModel, end_task: Task, cfg: TrainerConfig,
                       step: int = 0) -> ParamSet:
    """Fit a fresh meta head on one end-task train batch, body frozen.

    The head is re-initialized from a seed derived from (run seed, step),
    then optimized for ``meta_head_steps`` steps on a single batch of
    ``meta_head_batch_size`` rows with L2 weight decay on the head only.
    """
    end_spec = model.heads[model.end_task_id][0]
    reinit_meta_head(model, HeadSpec(output_dim=end_spec.output_dim,
                                     hidden_dim=end_spec.hidden_dim,
                                     kind=end_spec.kind),
                     seed=derive_seed(cfg.seed, "meta-head-reinit", step))
    meta_params = model.meta_head[1]

    idx = end_task.dataset.split("train")
    if idx.size == 0:
        raise ValueError("end task has an empty train split")
    rng = substream(cfg.seed, "meta_head", "train-batch", step)
    rows = idx[rng.integers(0, idx.size, size=cfg.meta_head_batch_size)]
    batch = materialize_batch(end_task, rows)

    opt = _Optimizer(meta_params, cfg, cfg.meta_head_lr)
    for _ in range(cfg.meta_head_steps):
        out = task_output(model, META_OWNER, batch.inputs)
        node = loss_fn(out, batch.targets, end_task.objective, mask=batch.mask)
        grads = backward(node, meta_params)
        decayed = {name: grads[name] + cfg.meta_head_weight_decay * meta_params[name].data
                   for name in meta_params}
        opt.step(decayed)
    return meta_params


def _meta_gradient(model: MultiTaskModel, end_task: Task, cfg: TrainerConfig,
                   step: int) -> GradientMap:
    """Body gradient of the meta-objective (end-task validation loss)."""
    if cfg.meta_objective_mode == "separate_head":
        estimate_meta_head(model, end_task, cfg, step=step)
        owner = META_OWNER
    else:
        owner = end_task.task_id
    val_idx = end_task.dataset.split("val")
    rng = substream(cfg.seed, "meta_head", "val-batch", step)
    rows = val_idx[rng.integers(0, val_idx.size, size=cfg.batch_size_for(end_task.task_id))]
    batch = materialize_batch(end_task, rows)
    return _body_loss_grad(model, owner, end_task, batch)


def _snapshot_model(model: MultiTaskModel) -> Dict[str, Dict[str, np.ndarray]]:
    snap = {"body": model.body.snapshot()}
    for tid, (_spec, ps) in model.heads.items():
        snap[f"head:{tid}"] = ps.snapshot()
    return snap


def _restore_model(model: MultiTaskModel, snap: Dict[str, Dict[str, np.ndarray]]) -> None:
    model.body.restore(snap["body"])
    for tid, (_spec, ps) in model.heads.items():
        ps.restore(snap[f"head:{tid}"])


def _config_snapshot(cfg: TrainerConfig, strategy: str, **extra) -> Dict[str, object]:
    doc = asdict(cfg)
    doc["strategy"] = strategy
    doc.update(extra)
    return doc


def _training_loop(model: MultiTaskModel, tasks: Sequence[Task], cfg: TrainerConfig, *,
                   end_task: Optional[Task], weights: Optional[TaskWeights],
                   learn_weights: bool, max_steps: int, strategy: str,
                   step_offset: int = 0,
                   rows: Optional[List[LoggedStep]] = None) -> Tuple[List[LoggedStep], str, TaskWeights, Dict]:
    """Shared step loop. Returns (rows, stop_reason, final weights, best snapshot info)."""
    rows = rows if rows is not None else []
    task_ids = [t.task_id for t in tasks]
    if weights is None:
        weights = uniform_task_weights(task_ids)
    if set(weights.raw) != set(task_ids):
        raise ValueError("weights do not cover the task set")

    body_opt = _Optimizer(model.body, cfg, cfg.body_lr)
    head_opts = {t.task_id: _Optimizer(model.head_params(t.task_id), cfg, cfg.head_lr) for t in tasks}

    history: List[float] = []
    best = {"val": -math.inf, "step": -1, "snapshot": None, "f1": 0.0}

    def run_validation(at_step: int) -> Tuple[float, float]:
        try:
            acc, f1 = evaluate_classification(model, end_task, "val")
        except NonFiniteError as exc:
            raise DivergenceError(f"diverged by validation at step {at_step}: {exc}") from exc
        history.append(acc)
        if acc > best["val"]:
            best.update(val=acc, step=at_step, snapshot=_snapshot_model(model), f1=f1)
        return acc, f1

    if end_task is not None:
        run_validation(step_offset - 1)

    stop_reason = "max_steps"
    for s in range(max_steps):
        batches = {t.task_id: sample_batch(t, cfg.seed, step_offset + s, cfg.batch_size_for(t.task_id))
                   for t in tasks}
        losses: Dict[str, float] = {}
        body_grads: Dict[str, GradientMap] = {}
        head_grads: Dict[str, GradientMap] = {}
        for t in tasks:
            value, g_body, g_head = _task_grads(model, t, batches[t.task_id], step_offset + s)
            losses[t.task_id] = value
            body_grads[t.task_id] = g_body
            head_grads[t.task_id] = g_head

        if learn_weights and cfg.weight_lr > 0 and s % cfg.meta_update_period == 0:
            try:
                g_meta = _meta_gradient(model, end_task, cfg, step_offset + s)
            except NonFiniteError as exc:
                raise DivergenceError(
                    f"diverged in meta gradient at step {step_offset + s}: {exc}") from exc
            alignments = {tid: compute_alignment(g_meta, body_grads[tid], cfg.alignment)
                          for tid in task_ids}
            weights = update_task_weights(weights, alignments, cfg.weight_lr)

        alpha = weights.normalized
        combined = {name: None for name in model.body.names()}
        for tid in task_ids:
            a = alpha[tid]
            for name in combined:
                term = a * body_grads[tid][name]
                combined[name] = term if combined[name] is None else combined[name] + term
        body_opt.step(combined)
        for t in tasks:
            head_opts[t.task_id].step({n: g for n, g in head_grads[t.task_id].items()})

        row = LoggedStep(step=step_offset + s, alpha=dict(alpha), losses=losses)
        if end_task is not None and (s + 1) % cfg.validation_period == 0:
            acc, f1 = run_validation(step_offset + s)
            row.val_accuracy, row.val_macro_f1 = acc, f1
            rows.append(row)
            if early_stop_check(history, cfg.patience, cfg.min_delta) == STOP:
                stop_reason = "plateau"
                break
        else:
            rows.append(row)

    return rows, stop_reason, weights, best


def _finalize(model: MultiTaskModel, end_task: Optional[Task], rows: List[LoggedStep],
              stop_reason: str, cfg: TrainerConfig, strategy: str, best: Dict,
              **config_extra) -> RunRecord:
    """Restore the best-validation snapshot and measure the final test metric."""
    if end_task is not None and best["snapshot"] is not None:
        _restore_model(model, best["snapshot"])
        test_acc, _ = evaluate_classification(model, end_task, "test") \
            if end_task.dataset.split("test").size else (math.nan, math.nan)
        final_val = best["val"]
        best_step = best["step"]
    else:
        test_acc, final_val, best_step = math.nan, math.nan, -1
    task_ids = [end_task.task_id] if end_task is not None else []
    return RunRecord(strategy=strategy, task_ids=task_ids, steps=rows,
                     final_val_metric=final_val, final_test_metric=test_acc,
                     stop_reason=stop_reason, best_val_step=best_step, seed=cfg.seed,
                     config=_config_snapshot(cfg, strategy, **config_extra))


def _require_val(end_task: Task) -> None:
    if end_task.dataset.split("val").size == 0:
        raise ValueError("end task needs a nonempty validation split")


def finetune(model: MultiTaskModel, end_task: Task, cfg: TrainerConfig) -> RunRecord:
    """Train body + end-task head on the end task only, early stopping on validation."""
    _require_val(end_task)
    rows, stop_reason, _w, best = _training_loop(
        model, [end_task], cfg, end_task=end_task, weights=None,
        learn_weights=False, max_steps=cfg.max_steps, strategy="finetune_only")
    record = _finalize(model, end_task, rows, stop_reason, cfg, "finetune_only", best)
    record.task_ids = [end_task.task_id]
    return record


def train_multitask(model: MultiTaskModel, end_task: Task, aux_tasks: Sequence[Task],
                    weights: TaskWeights, cfg: TrainerConfig) -> RunRecord:
    """Fixed-weight multi-tasking of the end task with every auxiliary task."""
    _require_val(end_task)
    tasks = [end_task, *aux_tasks]
    rows, stop_reason, _w, best = _training_loop(
        model, tasks, cfg, end_task=end_task, weights=weights,
        learn_weights=False, max_steps=cfg.max_steps, strategy="tartan_mt")
    record = _finalize(model, end_task, rows, stop_reason, cfg, "tartan_mt", best,
                       fixed_raw_weights=dict(weights.raw))
    record.task_ids = [t.task_id for t in tasks]
    return record


def train_tartan_meta(model: MultiTaskModel, end_task: Task, aux_tasks: Sequence[Task],
                      cfg: TrainerConfig) -> RunRecord:
    """Online meta-learned task weighting (weights start uniform)."""
    _require_val(end_task)
    tasks = [end_task, *aux_tasks]
    rows, stop_reason, _w, best = _training_loop(
        model, tasks, cfg, end_task=end_task, weights=None,
        learn_weights=True, max_steps=cfg.max_steps, strategy="tartan_meta")
    record = _finalize(model, end_task, rows, stop_reason, cfg, "tartan_meta", best)
    record.task_ids = [t.task_id for t in tasks]
    return record


def pretrain_then_finetune(model: MultiTaskModel, aux_tasks: Sequence[Task], end_task: Task,
                           cfg: TrainerConfig, pretrain_steps: Optional[int] = None) -> RunRecord:
    """Auxiliary-only pre-training followed by fine-tuning on the end task.

    Phase 1 never computes an end-task gradient; its mixture is the uniform
    normalization of the unweighted auxiliary sum. Phase 2 is plain
    fine-tuning with early stopping, budgeted at max_steps - pretrain_steps.
    """
    _require_val(end_task)
    if not aux_tasks:
        raise ValueError("pretraining needs at least one auxiliary task")
    if pretrain_steps is None:
        pretrain_steps = cfg.max_steps // 2
    if pretrain_steps > cfg.max_steps:
        raise ValueError("pretrain_steps exceeds the total step budget")

    rows: List[LoggedStep] = []
    if pretrain_steps > 0:
        rows, _reason, _w, _best = _training_loop(
            model, list(aux_tasks), cfg, end_task=None, weights=None,
            learn_weights=False, max_steps=pretrain_steps, strategy="pretrain_finetune",
            rows=rows)

    finetune_budget = cfg.max_steps - pretrain_steps
    rows, stop_reason, _w, best = _training_loop(
        model, [end_task], cfg, end_task=end_task, weights=None,
        learn_weights=False, max_steps=finetune_budget, strategy="pretrain_finetune",
        step_offset=pretrain_steps, rows=rows)
    record = _finalize(model, end_task, rows, stop_reason, cfg, "pretrain_finetune", best,
                       pretrain_steps=pretrain_steps)
    record.task_ids = [end_task.task_id, *[t.task_id for t in aux_tasks]]
    return record
