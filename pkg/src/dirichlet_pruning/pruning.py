"""Channel ranking, pruning plans, physical channel removal, fine-tuning.

Rankings and plans address prunable layers by ordinal: 0 for the first
conv/fc layer in the graph, 1 for the next, and so on (the final linear
layer holds the class outputs and is never pruned). A plan's keep-list for
a layer is a sorted subset of that layer's output channel indices.

Physical removal slices output channels of each pruned layer, the matching
input slices of the next linear layer (expanding across flatten to all
spatial positions), and per-channel affine entries. Switch layers are
dropped from the pruned graph; each kept channel's weights and bias are
first scaled by its posterior-mean switch value so the switchless pruned
network reproduces the masked switched forward exactly.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .models import (ChannelAffine, Conv2d, Flatten, FullyConnected, MaxPool2d,
                     ModelGraph, Relu, Switch, TrainSchedule, Tensor, copy_model,
                     evaluate, forward, propagate_shapes, prunable_indices,
                     prunable_widths, train_model, validate_model)
from .switch import SwitchState


# ---------------------------------------------------------------------------
# rankings


@dataclass
class LayerRanking:
    layer: int
    scores: np.ndarray
    order: np.ndarray
    method: str


@dataclass
class RankingReport:
    per_layer: list[LayerRanking]

    def layer(self, ordinal: int) -> LayerRanking:
        for lr in self.per_layer:
            if lr.layer == ordinal:
                return lr
        raise ContractError(f"no ranking for layer {ordinal}")


def _order_desc(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score, ties broken by lower channel index."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.size), -scores))


def rank_dirichlet(states: list[SwitchState]) -> RankingReport:
    """Channels scored by their switch posterior mean."""
    if not states:
        raise ContractError("no switch states given")
    per_layer = []
    for ordinal, st in enumerate(sorted(states, key=lambda s: s.layer_index)):
        scores = st.posterior_mean()
        per_layer.append(LayerRanking(ordinal, scores, _order_desc(scores), "dirichlet"))
    return RankingReport(per_layer)


def rank_magnitude(model: ModelGraph, norm: str = "L1") -> RankingReport:
    """Channels scored by the norm of their own parameters: the output
    channel's kernel slice plus bias for conv, the incoming weight column
    plus bias for fc."""
    if norm not in ("L1", "L2"):
        raise ContractError(f"norm must be L1 or L2, got {norm!r}")
    per_layer = []
    for ordinal, gi in enumerate(prunable_indices(model)):
        spec = model.layers[gi]
        w = model.weights[f"layer{gi}.weight"]
        b = model.weights[f"layer{gi}.bias"]
        if isinstance(spec, Conv2d):
            flat = np.concatenate([w.reshape(spec.c_out, -1), b[:, None]], axis=1)
        else:
            flat = np.concatenate([w.T, b[:, None]], axis=1)
        if norm == "L1":
            scores = np.abs(flat).sum(axis=1)
        else:
            scores = np.sqrt((flat * flat).sum(axis=1))
        per_layer.append(LayerRanking(ordinal, scores, _order_desc(scores), norm))
    return RankingReport(per_layer)


def rank_derivative(model: ModelGraph, xb, yb) -> RankingReport:
    """First-order removal cost |dC/dh * h| averaged over the batch and any
    spatial positions, taken at each prunable layer's pre-activation."""
    xb = np.asarray(xb, dtype=np.float64)
    yb = np.asarray(yb)
    if xb.shape[0] == 0:
        raise ContractError("ranking batch is empty")
    params = {n: Tensor(v, requires_grad=True) for n, v in model.weights.items()}
    with T.Tape():
        logits, preacts = forward(model, xb, params=params, collect_preacts=True)
        loss = T.softmax_cross_entropy(logits, yb)
    T.backward(loss)
    per_layer = []
    for ordinal, gi in enumerate(prunable_indices(model)):
        h = preacts[gi]
        g = h.grad if h.grad is not None else np.zeros_like(h.data)
        prod = np.abs(g * h.data)
        axes = (0,) if prod.ndim == 2 else (0, 2, 3)
        scores = prod.mean(axis=axes)
        per_layer.append(LayerRanking(ordinal, scores, _order_desc(scores), "derivative"))
    return RankingReport(per_layer)


def rank_random(model: ModelGraph, rng) -> RankingReport:
    """Uniform random scores; the control baseline."""
    per_layer = []
    for ordinal, width in enumerate(prunable_widths(model)):
        scores = rng.random(width)
        per_layer.append(LayerRanking(ordinal, scores, _order_desc(scores), "random"))
    return RankingReport(per_layer)


# ---------------------------------------------------------------------------
# plans


@dataclass
class PruningPlan:
    keep: dict[int, np.ndarray] = field(default_factory=dict)

    def validate_against(self, model: ModelGraph) -> None:
        widths = prunable_widths(model)
        for ordinal, kept in self.keep.items():
            if not 0 <= ordinal < len(widths):
                raise ContractError(f"plan addresses layer {ordinal}, "
                                    f"model has {len(widths)} prunable layers")
            kept = np.asarray(kept)
            if kept.size == 0:
                raise ContractError(f"layer {ordinal}: keep-list is empty")
            if np.any(np.diff(kept) <= 0):
                raise ContractError(f"layer {ordinal}: keep-list not strictly increasing")
            if kept[0] < 0 or kept[-1] >= widths[ordinal]:
                raise ShapeError(f"layer {ordinal}: keep indices {kept} outside "
                                 f"width {widths[ordinal]}")


def make_plan(report: RankingReport, keep_counts=None, rate: float | None = None) -> PruningPlan:
    """Top-k of each layer's ranking; k from explicit per-layer counts or a
    global pruning rate, where rate r keeps ceil((1-r)*width) channels."""
    if (keep_counts is None) == (rate is None):
        raise ContractError("give exactly one of keep_counts or rate")
    keep = {}
    for lr in report.per_layer:
        width = lr.scores.size
        if rate is not None:
            if not 0.0 < rate < 1.0:
                raise ContractError(f"rate must be in (0,1), got {rate}")
            count = math.ceil((1.0 - rate) * width)
        else:
            count = int(keep_counts[lr.layer])
        if count < 1 or count > width:
            raise ContractError(f"layer {lr.layer}: keep count {count} "
                                f"outside [1, {width}]")
        keep[lr.layer] = np.sort(lr.order[:count])
    return PruningPlan(keep)


def _switch_for_prunable(model: ModelGraph, graph_index: int) -> int | None:
    """Graph position of the switch fed by the prunable layer at
    graph_index, if one sits before the next linear layer."""
    for j in range(graph_index + 1, len(model.layers)):
        spec = model.layers[j]
        if isinstance(spec, Switch):
            return j
        if isinstance(spec, (Conv2d, FullyConnected)):
            return None
    return None


def _resolve_means(model: ModelGraph, switch_means: dict | None) -> dict[int, np.ndarray]:
    """Posterior-mean vector per switch layer; uniform when unspecified,
    matching an untrained symmetric posterior."""
    means = {}
    for i, spec in enumerate(model.layers):
        if isinstance(spec, Switch):
            if switch_means is not None and i in switch_means:
                m = np.asarray(switch_means[i], dtype=np.float64)
                if m.shape != (spec.d,):
                    raise ShapeError(f"switch means for layer {i} have shape "
                                     f"{m.shape}, expected ({spec.d},)")
                means[i] = m
            else:
                means[i] = np.full(spec.d, 1.0 / spec.d)
    return means


def apply_plan(model: ModelGraph, plan: PruningPlan,
               switch_means: dict | None = None) -> ModelGraph:
    """Physically pruned copy of the model; see the module docstring for the
    slicing rules. switch_means maps switch graph positions to posterior
    means (e.g. from trained SwitchState.posterior_mean())."""
    plan.validate_against(model)
    means = _resolve_means(model, switch_means)
    shapes = propagate_shapes(model.layers, model.input_shape)
    ordinal_of = {gi: o for o, gi in enumerate(prunable_indices(model))}

    new_layers: list = []
    new_weights: dict[str, np.ndarray] = {}
    in_keep: np.ndarray | None = None  # kept input channels of the next layer

    def put(spec, **arrays):
        new_layers.append(spec)
        idx = len(new_layers) - 1
        for suffix, arr in arrays.items():
            new_weights[f"layer{idx}.{suffix}"] = np.ascontiguousarray(arr)

    for i, spec in enumerate(model.layers):
        if isinstance(spec, (Conv2d, FullyConnected)):
            w = model.weights[f"layer{i}.weight"]
            b = model.weights[f"layer{i}.bias"]
            if in_keep is not None:
                w = w[:, in_keep] if isinstance(spec, Conv2d) else w[in_keep, :]
            out_keep = None
            if i in ordinal_of and ordinal_of[i] in plan.keep:
                out_keep = np.asarray(plan.keep[ordinal_of[i]])
                if isinstance(spec, Conv2d):
                    w, b = w[out_keep], b[out_keep]
                else:
                    w, b = w[:, out_keep], b[out_keep]
            sw = _switch_for_prunable(model, i)
            if sw is not None:
                # every dropped switch folds into its producer, pruned or not
                scale = means[sw] if out_keep is None else means[sw][out_keep]
                if isinstance(spec, Conv2d):
                    w = w * scale[:, None, None, None]
                    b = b * scale
                else:
                    w = w * scale[None, :]
                    b = b * scale
            if isinstance(spec, Conv2d):
                put(Conv2d(w.shape[1], w.shape[0], spec.kh, spec.kw, spec.stride, spec.pad),
                    weight=w, bias=b)
            else:
                put(FullyConnected(w.shape[0], w.shape[1]), weight=w, bias=b)
            in_keep = out_keep
        elif isinstance(spec, Flatten):
            if in_keep is not None:
                c, h, w = shapes[i - 1] if i > 0 else model.input_shape
                hw = h * w
                in_keep = (in_keep[:, None] * hw + np.arange(hw)[None, :]).reshape(-1)
            put(Flatten())
        elif isinstance(spec, ChannelAffine):
            scale = model.weights[f"layer{i}.scale"]
            shift = model.weights[f"layer{i}.shift"]
            if in_keep is not None:
                scale, shift = scale[in_keep], shift[in_keep]
            put(ChannelAffine(scale.size), scale=scale, shift=shift)
        elif isinstance(spec, Switch):
            continue  # folded into the preceding layer's weights
        else:
            put(spec)

    pruned = ModelGraph(new_layers, new_weights, tuple(model.input_shape),
                        dict(model.metadata, pruned_from=model.arch_string))
    validate_model(pruned)
    return pruned


def masked_logits(model: ModelGraph, plan: PruningPlan, x,
                  switch_means: dict | None = None) -> np.ndarray:
    """Forward pass of the ORIGINAL model with pruned channels masked out:
    switch graphs run each switch at its posterior mean with pruned entries
    zeroed; switchless graphs zero the pruned channels' outgoing weights and
    biases. The oracle apply_plan must match within 1e-9."""
    plan.validate_against(model)
    means = _resolve_means(model, switch_means)
    ordinals = prunable_indices(model)
    has_switch = {gi: _switch_for_prunable(model, gi) for gi in ordinals}
    if any(sw is not None for sw in has_switch.values()):
        switches = dict(means)
        for o, gi in enumerate(ordinals):
            sw = has_switch[gi]
            if sw is None or o not in plan.keep:
                continue
            masked = np.zeros_like(means[sw])
            masked[plan.keep[o]] = means[sw][plan.keep[o]]
            switches[sw] = masked
        return forward(model, x, switches=switches).data
    shadow = copy_model(model)
    for o, gi in enumerate(ordinals):
        if o not in plan.keep:
            continue
        drop = np.setdiff1d(np.arange(prunable_widths(model)[o]), plan.keep[o])
        spec = model.layers[gi]
        if isinstance(spec, Conv2d):
            shadow.weights[f"layer{gi}.weight"][drop] = 0.0
        else:
            shadow.weights[f"layer{gi}.weight"][:, drop] = 0.0
        shadow.weights[f"layer{gi}.bias"][drop] = 0.0
    return forward(shadow, x).data


# ---------------------------------------------------------------------------
# fine-tuning


def finetune(model: ModelGraph, x_train, y_train, x_val, y_val,
             schedule: TrainSchedule, rng, log=None) -> tuple[ModelGraph, float]:
    """SGD-with-momentum retraining; returns (best model, best val error %)
    across the schedule, where epoch 0 (the input model) also competes.
    A zero-epoch schedule returns an unchanged copy."""
    if np.asarray(x_train).shape[0] == 0 or np.asarray(x_val).shape[0] == 0:
        raise ContractError("fine-tuning data is empty")
    best = copy_model(model)
    best_err = evaluate(model, x_val, y_val)
    if schedule.epochs == 0:
        return best, best_err
    work = copy_model(model)
    one = TrainSchedule(1, schedule.batch_size, schedule.lr, schedule.momentum)
    for epoch in range(schedule.epochs):
        train_model(work, x_train, y_train, one, rng)
        err = evaluate(work, x_val, y_val)
        if log is not None:
            log(f"finetune epoch {epoch + 1}/{schedule.epochs}: val error {err:.2f}%")
        if err < best_err:
            best_err = err
            best = copy_model(work)
    return best, best_err


# ---------------------------------------------------------------------------
# serialization


def ranking_to_csv(report: RankingReport, path) -> None:
    """Rows layer,channel,score,rank with rank 0 for the top channel."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "channel", "score", "rank"])
        for lr in report.per_layer:
            rank_of = np.empty(lr.order.size, dtype=np.int64)
            rank_of[lr.order] = np.arange(lr.order.size)
            for c in range(lr.scores.size):
                w.writerow([lr.layer, c, repr(float(lr.scores[c])), int(rank_of[c])])


def ranking_from_csv(path) -> RankingReport:
    rows = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            rows.setdefault(int(row["layer"]), []).append(
                (int(row["channel"]), float(row["score"]), int(row["rank"])))
    per_layer = []
    for layer in sorted(rows):
        entries = sorted(rows[layer])
        scores = np.array([score for _, score, _ in entries])
        order = np.empty(len(entries), dtype=np.int64)
        for channel, _, rank in entries:
            order[rank] = channel
        per_layer.append(LayerRanking(layer, scores, order, "csv"))
    return RankingReport(per_layer)


def plan_to_json(plan: PruningPlan, path) -> None:
    payload = {"version": 1,
               "keep": {str(k): [int(v) for v in kept] for k, kept in sorted(plan.keep.items())}}
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def plan_from_json(path) -> PruningPlan:
    with open(path) as f:
        payload = json.load(f)
    if payload.get("version") != 1:
        raise ContractError(f"unsupported plan version {payload.get('version')!r}")
    return PruningPlan({int(k): np.asarray(sorted(int(i) for i in v), dtype=np.int64)
                        for k, v in payload["keep"].items()})


def compose_plans(first: PruningPlan, second: PruningPlan) -> PruningPlan:
    """Single plan equivalent to applying ``first`` then ``second``; the
    second plan's indices address the already-pruned layer."""
    keep = {k: np.asarray(v).copy() for k, v in first.keep.items()}
    for ordinal, kept2 in second.keep.items():
        if ordinal in keep:
            keep[ordinal] = keep[ordinal][np.asarray(kept2)]
        else:
            keep[ordinal] = np.asarray(kept2).copy()
    return PruningPlan(keep)
