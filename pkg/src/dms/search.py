"""Joint weight/structure search, the three pipelines, retraining and the uniform baseline.

Structure parameters take plain projected gradient steps
``a <- clamp(a - lr_structure * (g_task + lambda_resource * g_resource))``;
weights use Adam.  The resource target decays per epoch from the supernet
cost to the final budget over the joint phase, then stays at the budget for
the width-only tail, during which depth ratios are frozen.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import List, Literal, Optional

import numpy as np
from pydantic import (BaseModel, ConfigDict, NonNegativeInt, PositiveFloat, PositiveInt, model_validator)

from . import artifacts
from . import autodiff as ad
from . import topk as tk
from .data import TaskSpec, make_task
from .network import (ArchitectureDescription, ModelSpec, build_supernet, count_discrete_resource, describe,
                      discrete_from_description, export_pruned)
from .resource import (LatencyFit, ResourceModel, current_consumption, discrete_consumption, fit_latency_model,
                       read_latency_table, resource_loss, supernet_consumption, target_schedule)

log = logging.getLogger(__name__)

JOINT, WIDTH_ONLY, WEIGHTS_ONLY, STRUCTURE_ONLY = "joint", "width-only", "weights-only", "structure-only"


class DivergenceError(RuntimeError):
    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


class TargetMissError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}


# ---------------------------------------------------------------- configuration


class Hyperparams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lambda_resource: PositiveFloat = 1.0
    lr_structure: PositiveFloat = 5e-3
    lr_weights: PositiveFloat = 1e-3
    decay: float = 0.99
    search_epochs: NonNegativeInt = 10
    width_only_epochs: Optional[NonNegativeInt] = None
    retrain_epochs: NonNegativeInt = 100
    batch_size: PositiveInt = 64
    seed: int = 0
    metric: Literal["taylor", "index"] = "taylor"
    normalize_importance: bool = True
    target_tolerance: PositiveFloat = 0.02

    @model_validator(mode="after")
    def _check(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        if self.width_only_epochs is None:
            self.width_only_epochs = int(round(0.2 * self.search_epochs))
        if self.width_only_epochs > self.search_epochs:
            raise ValueError("width_only_epochs cannot exceed search_epochs")
        return self


class ResourceSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["macs", "params", "latency"] = "macs"
    target: Optional[PositiveFloat] = None
    target_ratio: Optional[PositiveFloat] = None
    latency_table: Optional[str] = None
    latency_fit: Optional[str] = None

    @model_validator(mode="after")
    def _check(self):
        if (self.target is None) == (self.target_ratio is None):
            raise ValueError("give exactly one of target or target_ratio")
        if self.target_ratio is not None and self.target_ratio >= 1:
            raise ValueError("target_ratio must be below 1")
        if self.kind == "latency" and not (self.latency_table or self.latency_fit):
            raise ValueError("latency budgets need latency_table or latency_fit")
        return self


class PipelineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    pipeline: Literal["np", "p", "p-"] = "np"
    model: ModelSpec
    task: TaskSpec
    resource: ResourceSpec
    hyperparams: Hyperparams = Hyperparams()
    checkpoint: Optional[str] = None
    compare_uniform: bool = False

    @model_validator(mode="after")
    def _check(self):
        if self.pipeline in ("p", "p-") and not self.checkpoint:
            raise ValueError(f"pipeline {self.pipeline!r} needs a pretrained checkpoint")
        return self


def build_resource_model(rs):
    if rs.kind != "latency":
        return ResourceModel(rs.kind)
    if rs.latency_fit:
        with open(rs.latency_fit) as fh:
            fits = {k: LatencyFit.from_dict(v) for k, v in json.load(fh).items()}
    else:
        fits = fit_latency_model(read_latency_table(rs.latency_table))
    return ResourceModel("latency", fits)


# ---------------------------------------------------------------- optimizers


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            p.data = p.data - self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)

    def state_dict(self):
        out = {"t": np.array(self.t)}
        out.update({f"m/{k}": v for k, v in self.m.items()})
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out

    def load_state_dict(self, state):
        self.t = int(state["t"])
        for k in self.m:
            self.m[k] = np.array(state[f"m/{k}"], dtype=np.float64)
            self.v[k] = np.array(state[f"v/{k}"], dtype=np.float64)


def structure_step(a, g_task, g_resource, hp, a_min=0.0, a_max=1.0):
    """One projected gradient step on a pruning ratio; non-finite gradients skip the step."""
    if not (math.isfinite(g_task) and math.isfinite(g_resource)):
        log.warning("non-finite structure gradient (task=%r, resource=%r); step skipped", g_task, g_resource)
        return a
    a = a - hp.lr_structure * (g_task + hp.lambda_resource * g_resource)
    return min(max(a, a_min), a_max)


# ---------------------------------------------------------------- training


def task_loss(out, y, task):
    if task == "classification":
        return ad.softmax_cross_entropy(out, y)
    return ad.mse(out, y)


def evaluate(model, x, y, task, batch_size=1024):
    """Loss plus accuracy (classification) or MSE (regression), ungated by default for discrete models."""
    losses, correct, n = 0.0, 0, len(y)
    if n == 0:
        return {"loss": float("nan")}
    with ad.no_grad():
        for i in range(0, n, batch_size):
            xb, yb = x[i:i + batch_size], y[i:i + batch_size]
            out = model.forward(xb)
            losses += task_loss(out, yb, task).item() * len(yb)
            if task == "classification":
                correct += int((out.data.argmax(axis=1) == yb).sum())
    res = {"loss": losses / n}
    if task == "classification":
        res["accuracy"] = correct / n
    else:
        res["mse"] = res["loss"]
    return res


@dataclass
class SearchState:
    epoch: int = 0
    records: List[dict] = field(default_factory=list)
    rng: np.random.Generator = None
    events: List[str] = field(default_factory=list)

    def trace(self, key):
        return [r[key] for r in self.records]

    def to_meta(self):
        return {"epoch": self.epoch, "records": self.records, "events": self.events,
                "rng": self.rng.bit_generator.state}

    @classmethod
    def from_meta(cls, meta):
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
        return cls(meta["epoch"], list(meta["records"]), rng, list(meta["events"]))


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def train_epoch(model, data, rm, hp, phase, state, r_t, optimizer, freeze_depth=False):
    """One pass over the training split; returns the epoch's metrics record."""
    if phase == WIDTH_ONLY:
        freeze_depth = True
    update_weights = phase in (JOINT, WIDTH_ONLY, WEIGHTS_ONLY)
    update_structure = phase in (JOINT, WIDTH_ONLY, STRUCTURE_ONLY) and model.ops
    task_sum = res_sum = 0.0
    steps = 0
    for idx in _batches(len(data.y_train), hp.batch_size, state.rng):
        xb, yb = data.x_train[idx], data.y_train[idx]
        masks = model.masks() if model.ops else None
        if masks:
            for m in masks.values():
                m.retain_grad = True
        out = model.forward(xb, masks)
        loss = task_loss(out, yb, data.task)
        if not math.isfinite(loss.item()):
            raise DivergenceError(f"task loss diverged at epoch {state.epoch}",
                                  {"epoch": state.epoch, "a": {n: op.ratio for n, op in model.ops.items()}})
        optimizer.zero_grad()
        for op in model.ops.values():
            op.a.grad = None
        ad.backward(loss)
        g_task = {name: (0.0 if op.a.grad is None else float(op.a.grad[0])) for name, op in model.ops.items()}
        for name, op in model.ops.items():
            if op.metric == tk.TAYLOR:
                g = masks[name].grad
                tk.update_importance(op, masks[name].data, np.zeros(op.n) if g is None else g)
        if update_weights:
            optimizer.step()
        res_value = 0.0
        if update_structure:
            for op in model.ops.values():
                op.a.grad = None
            r_c = current_consumption(model, rm)
            rl = resource_loss(r_c, r_t)
            res_value = rl.item()
            if rl.requires_grad:
                ad.backward(rl)
            for name, op in model.ops.items():
                if freeze_depth and op.kind == tk.DEPTH:
                    continue
                g_res = 0.0 if op.a.grad is None else float(op.a.grad[0])
                new = structure_step(op.ratio, g_task[name], g_res, hp, op.a_min, op.a_max)
                if not (math.isfinite(g_task[name]) and math.isfinite(g_res)):
                    state.events.append(f"epoch {state.epoch}: skipped step on {name}")
                op.set_ratio(new)
                op.a.grad = None
        task_sum += loss.item()
        res_sum += res_value
        steps += 1
    with ad.no_grad():
        r_c_end = current_consumption(model, rm).item() if model.ops else None
    return {
        "epoch": state.epoch,
        "phase": phase,
        "task_loss": task_sum / max(steps, 1),
        "resource_loss": res_sum / max(steps, 1),
        "r_c": r_c_end,
        "r_t": r_t,
        "a": {name: op.ratio for name, op in model.ops.items()},
        "k": {name: tk.element_count(op) for name, op in model.ops.items()},
    }


def schedule_targets(hp, r_final, r_supernet):
    """Per-epoch targets: decay over the joint epochs, then hold at ``r_final``."""
    joint = hp.search_epochs - hp.width_only_epochs
    span = max(joint - 1, 0)
    return [target_schedule(min(e, span), span, r_final, r_supernet) for e in range(hp.search_epochs)]


def search(model, data, rm, hp, r_final, pipeline="np", state=None, optimizer=None, writer=None, stop_after=None):
    """Run (or resume) the search stage in place; returns the final :class:`SearchState`."""
    r_super = supernet_consumption(model, rm)
    targets = schedule_targets(hp, r_final, r_super)
    joint = hp.search_epochs - hp.width_only_epochs
    if state is None:
        state = SearchState(rng=np.random.default_rng(hp.seed))
    if optimizer is None:
        optimizer = Adam(model.parameters(), lr=hp.lr_weights)
    while state.epoch < hp.search_epochs:
        if stop_after is not None and state.epoch >= stop_after:
            break
        if pipeline == "p-":
            phase, freeze = STRUCTURE_ONLY, state.epoch >= joint
        else:
            phase, freeze = (JOINT if state.epoch < joint else WIDTH_ONLY), False
        record = train_epoch(model, data, rm, hp, phase, state, targets[state.epoch], optimizer, freeze)
        state.records.append(record)
        if writer is not None:
            writer.write(record)
        log.info("epoch %d %s task=%.4f r_c=%.6g r_t=%.6g", state.epoch, phase, record["task_loss"],
                 record["r_c"], record["r_t"])
        state.epoch += 1
    return state


def save_search_checkpoint(path, model, state, optimizer, meta=None):
    """Supernet weights, operator state, Adam moments and the search state in one archive."""
    meta = dict(meta or {})
    meta["search_state"] = state.to_meta()
    artifacts.save_checkpoint(path, model, meta, optimizer)


def resume_search(path, hp):
    """Rebuild ``(model, state, optimizer)`` from :func:`save_search_checkpoint` output."""
    ckpt = artifacts.load_checkpoint(path)
    if "search_state" not in ckpt["meta"]:
        raise artifacts.SchemaError(f"{path}: not a search checkpoint (no search state)")
    model = build_supernet(ckpt["meta"]["spec"], seed=hp.seed, normalize=hp.normalize_importance,
                           metric=hp.metric, decay=hp.decay)
    artifacts.restore(model, ckpt)
    optimizer = Adam(model.parameters(), lr=hp.lr_weights)
    if ckpt["adam"]:
        optimizer.load_state_dict(ckpt["adam"])
    return model, SearchState.from_meta(ckpt["meta"]["search_state"]), optimizer


def fit(model, data, hp, epochs, seed):
    """Plain weight training of an (ungated) model with Adam."""
    rng = np.random.default_rng(seed)
    opt = Adam(model.parameters(), lr=hp.lr_weights)
    for _ in range(epochs):
        for idx in _batches(len(data.y_train), hp.batch_size, rng):
            out = model.forward(data.x_train[idx], masks=None)
            loss = task_loss(out, data.y_train[idx], data.task)
            if not math.isfinite(loss.item()):
                raise DivergenceError("training loss diverged")
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
    return model


def retrain(desc, data, hp, seed=None):
    """Fresh initialization of the exported architecture, full training, held-out metrics."""
    seed = hp.seed + 1 if seed is None else seed
    model = discrete_from_description(desc, seed=seed)
    fit(model, data, hp, hp.retrain_epochs, seed)
    return model, {"val": evaluate(model, data.x_val, data.y_val, data.task),
                   "test": evaluate(model, data.x_test, data.y_test, data.task)}


def pretrain(spec, data, hp, epochs, seed=None):
    """Train the full supernet without gating, for the pretrained pipelines."""
    seed = hp.seed if seed is None else seed
    model = build_supernet(spec, seed=seed)
    return fit(model, data, hp, epochs, seed)


def counted_resource(desc, rm):
    if rm.kind == "latency":
        return discrete_consumption(desc, rm)
    return count_discrete_resource(desc, rm.kind)


# ---------------------------------------------------------------- uniform baseline


def _uniform_keep(model, s):
    keep = {}
    for name, op in model.ops.items():
        k_el = op.n if s >= 1 else int(np.rint(s * op.n))
        u = op.units if k_el >= op.n else k_el // op.group_size
        u_min = 1 if op.min_size is None else math.ceil(op.min_size / op.group_size)
        u = min(max(u, u_min), op.units)
        keep[name] = op.unit_members(np.arange(u))
    return keep


def uniform_baseline(spec, budget, kind="macs", rm=None, tol=0.02, iters=60):
    """One global multiplier on every searchable dimension, found by bisection against ``budget``.

    Units are kept in index order.  Returns the description whose counted
    resource is closest to ``budget`` without exceeding ``(1 + tol) * budget``.
    """
    rm = rm or ResourceModel(kind)
    model = build_supernet(spec)

    def cost(s):
        desc = describe(model, _uniform_keep(model, s), {"uniform_multiplier": s})
        return counted_resource(desc, rm), desc

    low_cost, low_desc = cost(0.0)
    if budget < low_cost * (1 - 1e-12):
        raise ValueError(f"budget {budget:g} is below the smallest architecture ({low_cost:g})")
    full_cost, full_desc = cost(1.0)
    if budget >= full_cost:
        return full_desc
    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if cost(mid)[0] <= budget:
            lo = mid
        else:
            hi = mid
    c_lo, d_lo = cost(lo)
    c_hi, d_hi = cost(hi)
    best = d_hi if abs(c_hi - budget) < abs(c_lo - budget) and c_hi <= (1 + tol) * budget else d_lo
    best_cost = c_hi if best is d_hi else c_lo
    if abs(best_cost - budget) > tol * budget:
        log.warning("uniform baseline reaches %g for budget %g (outside %.0f%%)", best_cost, budget, 100 * tol)
    return best


# ---------------------------------------------------------------- pipelines


@dataclass
class SearchResult:
    config: PipelineConfig
    model: object
    data: object
    rm: ResourceModel
    state: SearchState
    desc: ArchitectureDescription
    discrete: object
    r_supernet: float
    r_final: float
    counted: float
    optimizer: Optional[Adam] = None


def search_and_export(cfg, out_dir=None, load=None):
    """Search stage of a pipeline followed by export; no retraining."""
    load = load or artifacts.load_checkpoint
    hp = cfg.hyperparams
    data = make_task(cfg.task)
    model = build_supernet(cfg.model, seed=hp.seed, normalize=hp.normalize_importance, metric=hp.metric,
                           decay=hp.decay)
    if cfg.pipeline in ("p", "p-"):
        ckpt = load(cfg.checkpoint)
        if ModelSpec.model_validate(ckpt["meta"]["spec"]) != cfg.model:
            raise ValueError(f"{cfg.checkpoint}: checkpoint was saved for a different model spec")
        model.load_state_dict(ckpt["params"])
    rm = build_resource_model(cfg.resource)
    r_super = supernet_consumption(model, rm)
    r_final = cfg.resource.target if cfg.resource.target is not None else cfg.resource.target_ratio * r_super
    writer = artifacts.MetricsWriter(os.path.join(out_dir, "metrics.jsonl")) if out_dir else None
    optimizer = Adam(model.parameters(), lr=hp.lr_weights)
    try:
        state = search(model, data, rm, hp, r_final, cfg.pipeline, optimizer=optimizer, writer=writer)
    finally:
        if writer is not None:
            writer.close()
    desc, discrete = export_pruned(model, {"pipeline": cfg.pipeline, "seed": hp.seed})
    counted = counted_resource(desc, rm)
    return SearchResult(cfg, model, data, rm, state, desc, discrete, r_super, r_final, counted, optimizer)


def run_pipeline(cfg, out_dir=None, load=None):
    """Search, export and (except for ``p-``) retrain; returns ``(description, report)``.

    Raises :class:`TargetMissError` when the exported architecture exceeds
    ``(1 + target_tolerance) * r_final``; artifacts are still written first.
    """
    res = search_and_export(cfg, out_dir, load)
    hp = cfg.hyperparams
    report = {
        "pipeline": cfg.pipeline,
        "seed": hp.seed,
        "resource_kind": res.rm.kind,
        "r_supernet": res.r_supernet,
        "r_final": res.r_final,
        "r_c_end": res.state.records[-1]["r_c"] if res.state.records else res.r_supernet,
        "counted": res.counted,
        "relative_error": res.counted / res.r_final - 1.0,
        "target_met": res.counted <= (1 + hp.target_tolerance) * res.r_final,
        "dims": {d.name: d.k for d in res.desc.dims},
    }
    if out_dir:
        res.desc.save(os.path.join(out_dir, "architecture.json"))
        save_search_checkpoint(os.path.join(out_dir, "supernet.npz"), res.model, res.state, res.optimizer)
    if not report["target_met"]:
        if out_dir:
            _write_report(out_dir, report)
        raise TargetMissError(f"exported {res.rm.kind} {res.counted:g} exceeds target {res.r_final:g} "
                              f"(final r_c {report['r_c_end']:g})", report)
    if cfg.pipeline == "p-":
        final = res.discrete
        report["searched"] = {"val": evaluate(final, res.data.x_val, res.data.y_val, res.data.task),
                              "test": evaluate(final, res.data.x_test, res.data.y_test, res.data.task)}
    else:
        final, report["searched"] = retrain(res.desc, res.data, hp)
    if cfg.compare_uniform:
        ub = uniform_baseline(cfg.model, res.counted, res.rm.kind, res.rm, hp.target_tolerance)
        report["uniform"] = retrain(ub, res.data, hp)[1]
        report["uniform"]["counted"] = counted_resource(ub, res.rm)
        report["uniform"]["dims"] = {d.name: d.k for d in ub.dims}
    if out_dir:
        artifacts.save_checkpoint(os.path.join(out_dir, "model.npz"), final,
                                  {"architecture": res.desc.to_dict(), "discrete": True})
        _write_report(out_dir, report)
    return res.desc, report


def _write_report(out_dir, report):
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
