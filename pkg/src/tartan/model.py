"""Shared-body multi-task architecture.

One MLP body feeds every head: one head per task, a designated end-task
head, and a separately managed meta head that is re-initialized on demand
and never touched by the joint parameter update.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .autodiff import ACTIVATIONS, ParamSet, Tensor, forward_mlp
from .prng import substream

HEAD_KINDS = ("classification", "regression", "reconstruction")

META_OWNER = "meta"

CHECKPOINT_FORMAT = "tartan-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BodySpec:
    input_dim: int
    hidden_dims: Tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if len(self.hidden_dims) < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("need at least one hidden layer, all dims >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def layer_spec(self) -> List[Tuple[int, int, str]]:
        dims = (self.input_dim, *self.hidden_dims)
        return [(dims[k], dims[k + 1], self.activation) for k in range(len(dims) - 1)]

    @property
    def representation_dim(self) -> int:
        return self.hidden_dims[-1]


@dataclass(frozen=True)
class HeadSpec:
    output_dim: int
    hidden_dim: Optional[int] = None
    kind: str = "classification"

    def __post_init__(self):
        if self.output_dim < 1:
            raise ValueError("output_dim must be >= 1")
        if self.hidden_dim is not None and self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1 when given")
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}")

    def layer_spec(self, in_width: int, activation: str) -> List[Tuple[int, int, str]]:
        if self.hidden_dim is None:
            return [(in_width, self.output_dim, "linear")]
        return [(in_width, self.hidden_dim, activation), (self.hidden_dim, self.output_dim, "linear")]


@dataclass
class MultiTaskModel:
    body_spec: BodySpec
    body: ParamSet
    heads: Dict[str, Tuple[HeadSpec, ParamSet]] = field(default_factory=dict)
    end_task_id: Optional[str] = None
    meta_head: Optional[Tuple[HeadSpec, ParamSet]] = None

    def head_params(self, task_id: str) -> ParamSet:
        if task_id == META_OWNER:
            if self.meta_head is None:
                raise KeyError("no meta head initialized")
            return self.meta_head[1]
        return self.heads[task_id][1]

    def head_spec(self, task_id: str) -> HeadSpec:
        if task_id == META_OWNER:
            if self.meta_head is None:
                raise KeyError("no meta head initialized")
            return self.meta_head[0]
        return self.heads[task_id][0]


def _init_mlp(layer_spec, rng: np.random.Generator, prefix: str) -> ParamSet:
    """Uniform(+-1/sqrt(fan_in)) weights and biases, drawn weight-then-bias per layer."""
    params = ParamSet()
    for k, (in_dim, out_dim, _act) in enumerate(layer_spec):
        bound = 1.0 / math.sqrt(in_dim)
        w = rng.uniform(-bound, bound, size=(in_dim, out_dim))
        b = rng.uniform(-bound, bound, size=(out_dim,))
        params.add(f"{prefix}layer{k}.weight", Tensor(w))
        params.add(f"{prefix}layer{k}.bias", Tensor(b))
    return params


def build_model(body: BodySpec, seed: int) -> MultiTaskModel:
    rng = substream(seed, "init", "body")
    return MultiTaskModel(body_spec=body, body=_init_mlp(body.layer_spec(), rng, "body."))


def register_task_head(model: MultiTaskModel, task_id: str, head: HeadSpec, seed: int,
                       end_task: bool = False) -> str:
    """Attach a freshly initialized head for task_id; optionally mark it as the end task."""
    if task_id == META_OWNER:
        raise ValueError(f"task_id {META_OWNER!r} is reserved for the meta head")
    if task_id in model.heads:
        raise ValueError(f"duplicate task_id {task_id!r}")
    if head.kind == "reconstruction" and head.output_dim != model.body_spec.input_dim:
        raise ValueError(
            f"reconstruction head output_dim {head.output_dim} != body input_dim {model.body_spec.input_dim}"
        )
    rng = substream(seed, "init", "head")
    params = _init_mlp(head.layer_spec(model.body_spec.representation_dim, model.body_spec.activation),
                       rng, f"head.{task_id}.")
    taken = set(model.body.names())
    for _tid, (_spec, ps) in model.heads.items():
        taken.update(ps.names())
    overlap = taken.intersection(params.names())
    if overlap:
        raise ValueError(f"parameter name collision: {sorted(overlap)}")
    model.heads[task_id] = (head, params)
    if end_task:
        model.end_task_id = task_id
    return task_id


def body_representation(model: MultiTaskModel, inputs) -> Tensor:
    """Forward through the body only; the final hidden activation feeds every head."""
    return forward_mlp(model.body, model.body_spec.layer_spec(), inputs, "body.")


def head_output(model: MultiTaskModel, owner: str, representation: Tensor) -> Tensor:
    spec = model.head_spec(owner)
    params = model.head_params(owner)
    prefix = f"{META_OWNER}." if owner == META_OWNER else f"head.{owner}."
    layer_spec = spec.layer_spec(model.body_spec.representation_dim, model.body_spec.activation)
    return forward_mlp(params, layer_spec, representation, prefix)


def task_output(model: MultiTaskModel, owner: str, inputs) -> Tensor:
    """Full forward: body representation composed with one head."""
    return head_output(model, owner, body_representation(model, inputs))


def joint_params(model: MultiTaskModel, owner: str) -> ParamSet:
    """Body plus one head, for backward() over a task loss."""
    return model.body.merged(model.head_params(owner))


def reinit_meta_head(model: MultiTaskModel, head: HeadSpec, seed: int) -> None:
    """Discard any previous meta head and draw fresh parameters from seed.

    The meta head never participates in the joint update; it exists only to
    compute the validation meta-gradient.
    """
    if model.end_task_id is None:
        raise ValueError("no end task registered")
    end_kind = model.heads[model.end_task_id][0].kind
    if head.kind != end_kind:
        raise ValueError(f"meta head kind {head.kind!r} != end task head kind {end_kind!r}")
    rng = substream(seed, "init", "meta")
    params = _init_mlp(head.layer_spec(model.body_spec.representation_dim, model.body_spec.activation),
                       rng, f"{META_OWNER}.")
    model.meta_head = (head, params)


def _params_to_payload(params: ParamSet) -> List[dict]:
    # A list, not a mapping: ParamSet iteration order is contractual (gradient
    # flattening uses it) and must survive sort_keys serialization.
    return [
        {"name": name, "shape": list(t.data.shape), "values": t.data.ravel().tolist()}
        for name, t in params.items()
    ]


def _params_from_payload(payload: List[dict]) -> ParamSet:
    params = ParamSet()
    for entry in payload:
        arr = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        params.add(entry["name"], Tensor(arr))
    return params


def save_checkpoint(model: MultiTaskModel, path) -> None:
    """Textual checkpoint: JSON listing every ParamSet as name -> shape + row-major values."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "body_spec": {
            "input_dim": model.body_spec.input_dim,
            "hidden_dims": list(model.body_spec.hidden_dims),
            "activation": model.body_spec.activation,
        },
        "end_task_id": model.end_task_id,
        "heads": {
            tid: {"output_dim": spec.output_dim, "hidden_dim": spec.hidden_dim, "kind": spec.kind}
            for tid, (spec, _ps) in model.heads.items()
        },
        "meta_head_spec": (
            None if model.meta_head is None else {
                "output_dim": model.meta_head[0].output_dim,
                "hidden_dim": model.meta_head[0].hidden_dim,
                "kind": model.meta_head[0].kind,
            }
        ),
        "params": {
            "body": _params_to_payload(model.body),
            "heads": {tid: _params_to_payload(ps) for tid, (_spec, ps) in model.heads.items()},
            "meta": None if model.meta_head is None else _params_to_payload(model.meta_head[1]),
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> MultiTaskModel:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} file: {path}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    body_spec = BodySpec(
        input_dim=doc["body_spec"]["input_dim"],
        hidden_dims=tuple(doc["body_spec"]["hidden_dims"]),
        activation=doc["body_spec"]["activation"],
    )
    model = MultiTaskModel(body_spec=body_spec, body=_params_from_payload(doc["params"]["body"]))
    for tid, spec_doc in doc["heads"].items():
        spec = HeadSpec(output_dim=spec_doc["output_dim"], hidden_dim=spec_doc["hidden_dim"],
                        kind=spec_doc["kind"])
        model.heads[tid] = (spec, _params_from_payload(doc["params"]["heads"][tid]))
    model.end_task_id = doc["end_task_id"]
    if doc["meta_head_spec"] is not None:
        spec = HeadSpec(output_dim=doc["meta_head_spec"]["output_dim"],
                        hidden_dim=doc["meta_head_spec"]["hidden_dim"],
                        kind=doc["meta_head_spec"]["kind"])
        model.meta_head = (spec, _params_from_payload(doc["params"]["meta"]))
    return model
