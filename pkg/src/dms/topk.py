"""Differentiable top-k: rank-normalized importance, sigmoid soft mask, Taylor importance.

A :class:`TopkOperator` owns one learnable pruning ratio ``a`` for a dimension
of ``n`` elements.  Elements are grouped into units of ``group_size``
contiguous elements that share importance and mask.  The soft mask of unit
``i`` is ``sigmoid(lam * (c'_i - a))`` where ``c'`` is the rank of the unit's
importance divided by the unit count, so ``a`` reads directly as the pruned
fraction.
"""

import math

import numpy as np

from . import autodiff as ad

WIDTH, DEPTH, HEAD = "width", "depth", "head"
TAYLOR, INDEX = "taylor", "index"


class TopkOperator:
    """One searchable dimension.

    ``kind`` selects the default temperature: the unit count for widths and
    four times the unit count for depths and head counts.  ``min_size`` bounds
    the pruning ratio above by ``1 - min_size / n``.  ``normalize=False``
    replaces rank normalization with the identity, for ablations only.
    """

    def __init__(self, n, kind=WIDTH, group_size=1, min_size=None, lam=None, decay=0.99,
                 metric=TAYLOR, normalize=True, name=None):
        if n < 1 or group_size < 1:
            raise ValueError(f"element count and group size must be positive (n={n}, group_size={group_size})")
        if kind not in (WIDTH, DEPTH, HEAD):
            raise ValueError(f"unknown operator kind {kind!r}")
        if metric not in (TAYLOR, INDEX):
            raise ValueError(f"unknown importance metric {metric!r}")
        if not 0.0 < decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        self.n = int(n)
        self.kind = kind
        self.group_size = int(group_size)
        self.units = math.ceil(self.n / self.group_size)
        self.name = name
        self.min_size = min_size
        self.a_min = 0.0
        self.a_max = 1.0 if min_size is None else 1.0 - min_size / self.n
        if lam is None:
            lam = self.units if kind == WIDTH else 4 * self.units
        self.lam = float(lam)
        self.decay = decay
        self.metric = metric
        self.normalize = normalize
        self.a = ad.Tensor(np.zeros(1), requires_grad=True)
        if metric == INDEX:
            self.importance = np.arange(self.units, 0, -1, dtype=np.float64)
        else:
            self.importance = np.zeros(self.units)
        self._member = np.repeat(np.arange(self.units), self.group_size)[: self.n]

    def __repr__(self):
        return (f"TopkOperator(name={self.name!r}, n={self.n}, kind={self.kind!r}, "
                f"a={self.ratio:.4f}, lam={self.lam:g})")

    @property
    def ratio(self):
        return float(self.a.data[0])

    def set_ratio(self, value):
        self.a.data = np.array([min(max(float(value), self.a_min), self.a_max)])

    def project(self):
        """Clamp ``a`` back into ``[a_min, a_max]`` after an update."""
        self.set_ratio(self.ratio)

    def normalized(self):
        if self.normalize:
            return normalize_importance(self.importance)
        return self.importance.copy()

    def unit_to_elements(self, unit_values):
        return np.asarray(unit_values)[self._member]

    def elements_to_units(self, element_values):
        return np.bincount(self._member, weights=np.asarray(element_values, dtype=np.float64),
                           minlength=self.units)

    def unit_members(self, units):
        units = np.asarray(units)
        return np.flatnonzero(np.isin(self._member, units))

    def state_dict(self):
        return {"a": self.ratio, "importance": self.importance.copy()}

    def load_state_dict(self, state):
        self.a.data = np.array([float(state["a"])])
        imp = np.asarray(state["importance"], dtype=np.float64)
        if imp.shape != (self.units,):
            raise ValueError(f"importance shape {imp.shape} does not match {self.units} units")
        self.importance = imp.copy()


def normalize_importance(c):
    """Rank of each entry divided by the length; ties rank the lower index as smaller."""
    c = np.asarray(c, dtype=np.float64)
    if c.size == 0:
        raise ValueError("cannot normalize an empty importance vector")
    if not np.all(np.isfinite(c)):
        raise ValueError("importance must be finite")
    order = np.argsort(c, kind="stable")
    ranks = np.empty(c.size, dtype=np.float64)
    ranks[order] = np.arange(c.size)
    return ranks / c.size


def unit_mask(op):
    """Per-unit soft mask as a tensor differentiable in ``op.a``; ``c'`` is constant."""
    cn = ad.Tensor(op.normalized())
    return ad.sigmoid(ad.scale(ad.sub(cn, op.a), op.lam))


def soft_mask(op):
    """Per-element soft mask: the unit mask replicated over each unit's members."""
    m = unit_mask(op)
    if op.group_size == 1:
        return m
    return ad.take(m, op._member, axis=0)


def mask_grad_wrt_a(m, lam):
    m = np.asarray(m, dtype=np.float64)
    return -lam * (1.0 - m) * m


def update_importance(op, mask, grad):
    """Moving-average Taylor update from element-level mask values and task-loss mask gradients."""
    if op.metric != TAYLOR:
        raise ValueError(f"importance of a {op.metric!r} operator is static")
    mask = np.asarray(mask, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if mask.shape != (op.n,) or grad.shape != (op.n,):
        raise ValueError(f"expected element-level vectors of length {op.n}, got {mask.shape} and {grad.shape}")
    unit_m = mask[np.searchsorted(op._member, np.arange(op.units))]
    unit_g = op.elements_to_units(grad)
    op.importance = op.importance * op.decay + (unit_m * unit_g) ** 2 * (1.0 - op.decay)
    return op.importance


def retained_units(op):
    """Indices (ascending) of the units kept at the current ratio."""
    if op.normalize:
        k_el = int(np.rint((1.0 - op.ratio) * op.n))
        if k_el >= op.n:
            u = op.units
        else:
            u = k_el // op.group_size
        u = min(max(u, 1), op.units)
    else:
        # without rank normalization the threshold acts on raw importance
        u = max(int(np.sum(op.importance > op.ratio)), 1)
    cn = op.normalized()
    order = np.lexsort((np.arange(op.units), cn))
    return np.sort(order[op.units - u:])


def retained_indices(op):
    return op.unit_members(retained_units(op))


def element_count(op):
    return int(len(retained_indices(op)))
