"""Differentiable resource models, the log-barrier constraint loss and the target schedule.

Consumption is written in terms of the retained fraction ``1 - a`` of each
operator, so all-zero ratios give the full supernet cost.  Blocks gated by a
depth operator contribute their cost scaled by that operator's retained
fraction.
"""

import csv
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad

KINDS = ("macs", "params", "latency")
LATENCY_HEADER = ("layer_id", "a_in", "a_out", "latency_seconds")


@dataclass
class LatencyFit:
    latency_max: float
    coef: np.ndarray  # over (1, a_in, a_out, a_in^2, a_in*a_out, a_out^2)
    mse: float
    r2: float

    def ratio(self, a_in, a_out):
        """Predicted latency ratio; accepts floats or tensors."""
        c = self.coef
        return (c[0] + a_in * c[1] + a_out * c[2] + a_in * a_in * c[3]
                + a_in * a_out * c[4] + a_out * a_out * c[5])

    def to_dict(self):
        return {"latency_max": self.latency_max, "coef": [float(v) for v in self.coef],
                "mse": self.mse, "r2": self.r2}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["latency_max"]), np.asarray(d["coef"], dtype=np.float64),
                   float(d.get("mse", 0.0)), float(d.get("r2", 1.0)))


class ResourceModel:
    def __init__(self, kind, latency: Optional[Dict[str, LatencyFit]] = None):
        if kind not in KINDS:
            raise ValueError(f"unknown resource kind {kind!r}; expected one of {KINDS}")
        self.kind = kind
        self.latency = latency

    def __repr__(self):
        return f"ResourceModel({self.kind!r})"


@dataclass
class LatencySample:
    layer_id: str
    a_in: float
    a_out: float
    latency: float


@dataclass
class LatencyTable:
    samples: List[LatencySample]

    def layers(self):
        return sorted({s.layer_id for s in self.samples})

    def for_layer(self, layer_id):
        return [s for s in self.samples if s.layer_id == layer_id]


# ---------------------------------------------------------------- consumption


def _product(values):
    out = 1.0
    for v in values:
        out = v * out
    return out


def _consumption(terms, fraction, depth_factor, rm):
    total = 0.0
    for t in terms:
        fin = _product(n if name is None else fraction(name) * n for name, n in t.in_dims)
        fout = _product(n if name is None else fraction(name) * n for name, n in t.out_dims)
        if rm.kind == "latency":
            if t.kind != "linear":
                continue
            fit = rm.latency.get(t.layer_id)
            if fit is None:
                raise KeyError(f"no fitted latency model for layer {t.layer_id!r}")
            n_in = _product(n for _, n in t.in_dims)
            n_out = _product(n for _, n in t.out_dims)
            a_in = 1.0 - fin * (1.0 / n_in)
            a_out = 1.0 - fout * (1.0 / n_out)
            cost = fit.ratio(a_in, a_out) * fit.latency_max
        elif t.kind == "attention":
            cost = fin * t.tokens if rm.kind == "macs" else 0.0
        elif rm.kind == "macs":
            cost = fin * fout * t.tokens
        else:
            cost = fin * fout + fout
        if t.depth is not None:
            cost = cost * depth_factor(*t.depth)
        total = cost + total
    return total


def current_consumption(model, rm):
    """Differentiable current consumption ``r_c`` of a searchable model."""
    if rm.kind == "latency" and not rm.latency:
        raise ValueError("latency resource model has no fitted latency functions")
    retained = {name: 1.0 - op.a for name, op in model.ops.items()}
    out = _consumption(model.terms(), retained.__getitem__, lambda name, j: retained[name], rm)
    return out if isinstance(out, ad.Tensor) else ad.Tensor([out])


def supernet_consumption(model, rm):
    return float(_consumption(model.terms(), lambda name: 1.0, lambda name, j: 1.0, rm))


def discrete_consumption(desc, rm, model=None):
    """Consumption of an exported architecture, evaluated with the same resource formulas."""
    from .network import build_supernet

    model = build_supernet(desc.spec) if model is None else model
    n = {d.name: d.n_max for d in desc.dims}
    k = desc.sizes()
    keep = desc.keep()
    return float(_consumption(model.terms(), lambda name: k[name] / n[name],
                              lambda name, j: float(j in keep[name]), rm))


# ---------------------------------------------------------------- loss and schedule


def resource_loss(r_c, r_t):
    """``log(r_c / r_t)`` while over target, else zero (and no gradient)."""
    value = r_c.item() if isinstance(r_c, ad.Tensor) else float(r_c)
    if not (value > 0 and r_t > 0):
        raise ValueError(f"resource values must be positive (r_c={value}, r_t={r_t})")
    if value > r_t:
        return ad.log(ad.scale(r_c, 1.0 / r_t))
    return ad.Tensor([0.0])


def target_schedule(epoch, epochs, r_final, r_supernet):
    """Exponential decay of the target from the supernet cost to ``r_final``."""
    if not 0 < r_final < r_supernet:
        raise ValueError(f"target {r_final} must lie strictly below the supernet consumption {r_supernet}")
    if epochs <= 0 or epoch >= epochs:
        if epoch > epochs and epochs > 0:
            raise ValueError(f"epoch {epoch} beyond schedule length {epochs}")
        return float(r_final)
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if epoch == 0:
        return float(r_supernet)
    return (r_final / r_supernet) ** (epoch / epochs) * r_supernet


# ---------------------------------------------------------------- latency fitting


def _design(a_in, a_out):
    a_in = np.asarray(a_in, dtype=np.float64)
    a_out = np.asarray(a_out, dtype=np.float64)
    return np.stack([np.ones_like(a_in), a_in, a_out, a_in ** 2, a_in * a_out, a_out ** 2], axis=1)


def fit_layer(samples):
    lat = np.array([s.latency for s in samples], dtype=np.float64)
    if len(samples) < 6:
        raise ValueError(f"layer {samples[0].layer_id if samples else '?'}: need at least 6 samples, got {len(samples)}")
    if np.any(lat <= 0):
        raise ValueError(f"layer {samples[0].layer_id}: latencies must be positive")
    a_in = np.array([s.a_in for s in samples])
    a_out = np.array([s.a_out for s in samples])
    x = _design(a_in, a_out)
    if np.linalg.matrix_rank(x) < 6:
        raise ValueError(f"layer {samples[0].layer_id}: samples do not determine a quadratic (rank-deficient)")
    at_full = (a_in == 0) & (a_out == 0)
    lat_max = float(lat[at_full].mean()) if at_full.any() else float(lat.max())
    y = lat / lat_max
    coef = np.linalg.solve(x.T @ x, x.T @ y)
    resid = lat - lat_max * (x @ coef)
    ss_res = float(resid @ resid)
    ss_tot = float(((lat - lat.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res <= 1e-24 else 0.0)
    return LatencyFit(lat_max, coef, ss_res / len(lat), r2)


def fit_latency_model(table):
    """Quadratic latency-ratio model per layer."""
    return {layer: fit_layer(table.for_layer(layer)) for layer in table.layers()}


def read_latency_table(path):
    samples = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != LATENCY_HEADER:
            raise ValueError(f"{path}: expected header {','.join(LATENCY_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                samples.append(LatencySample(row[0].strip(), float(row[1]), float(row[2]), float(row[3])))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: unparseable number in {row}") from None
    return LatencyTable(samples)


def write_latency_table(path, table):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LATENCY_HEADER)
        for s in table.samples:
            writer.writerow([s.layer_id, repr(s.a_in), repr(s.a_out), repr(s.latency)])


DEFAULT_LATENCY_COEF = np.array([1.0, -0.9, -0.8, 0.05, 0.75, 0.0])


def synthesize_latency_table(model, coef=DEFAULT_LATENCY_COEF, noise=0.01, samples_per_layer=24, seed=0,
                             seconds_per_mac=1e-9, overhead=2e-6):
    """Latency table drawn from a known quadratic with multiplicative gaussian noise.

    The unpruned latency of each linear layer is ``overhead + seconds_per_mac * MACs``.
    """
    rng = np.random.default_rng(seed)
    coef = np.asarray(coef, dtype=np.float64)
    samples = []
    for t in model.terms():
        if t.kind != "linear":
            continue
        macs = t.tokens * _product(n for _, n in t.in_dims) * _product(n for _, n in t.out_dims)
        base = overhead + seconds_per_mac * macs
        a_in = np.concatenate([[0.0], rng.uniform(0, 1, samples_per_layer - 1)])
        a_out = np.concatenate([[0.0], rng.uniform(0, 1, samples_per_layer - 1)])
        ratio = _design(a_in, a_out) @ coef
        lat = base * ratio * (1.0 + noise * rng.standard_normal(samples_per_layer))
        samples.extend(LatencySample(t.layer_id, float(i), float(o), float(v)) for i, o, v in zip(a_in, a_out, lat))
    return LatencyTable(samples)
