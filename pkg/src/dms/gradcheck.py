"""Central finite-difference checks of every autodiff primitive and of the full search loss.

The composite check differentiates the total loss ``task + lambda * resource``
of a small supernet (input, width, depth and head operators) with respect to
all pruning ratios at once, and with respect to one weight matrix.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .network import build_supernet
from .resource import ResourceModel, current_consumption, resource_loss

PRIMITIVE_TOL = 1e-5
COMPOSITE_TOL = 1e-4

COMPOSITE_SPEC = {
    "input_dim": 6,
    "seq_len": 3,
    "input_search": {},
    "layers": [
        {"kind": "linear", "out": 4, "search": {}},
        {"kind": "stage", "blocks": 3, "block": "transformer", "hidden": 5, "heads": 2, "head_dim": 2,
         "depth": {}, "hidden_search": {}, "head_search": {}, "qk_search": {}, "v_search": {}},
        {"kind": "meanpool"},
        {"kind": "linear", "out": 3, "act": "none"},
    ],
}


def _primitive_cases(rng):
    """Yield ``(name, fn, point)``; ``fn`` maps a tensor to a scalar tensor."""
    def s(shape):
        return rng.standard_normal(shape)

    def scal(t):
        if t.shape not in weights:
            weights[t.shape] = rng.standard_normal(t.shape)
        return ad.sum_(t * ad.Tensor(weights[t.shape]))

    weights = {}
    b23, b13, b31 = s((2, 3)), s((1, 3)), s((2, 1))
    yield "add", lambda x: scal(ad.add(x, ad.Tensor(b13))), s((2, 3))
    yield "add-broadcast", lambda x: scal(ad.add(ad.Tensor(b23), x)), s((1, 3))
    yield "sub", lambda x: scal(ad.sub(ad.Tensor(b23), x)), s((2, 1))
    yield "mul", lambda x: scal(ad.mul(x, ad.Tensor(b31))), s((2, 3))
    yield "mul-broadcast", lambda x: scal(ad.mul(ad.Tensor(b23), x)), s((2, 1))
    yield "scale", lambda x: scal(ad.scale(x, -1.7)), s((4,))
    yield "sigmoid", lambda x: scal(ad.sigmoid(x)), 3 * s((5,))
    x = s((6,))
    x[np.abs(x) < 1e-2] += 0.1  # keep clear of the kink
    yield "relu", lambda x: scal(ad.relu(x)), x
    yield "log", lambda x: scal(ad.log(x)), rng.uniform(0.5, 2.0, 4)
    yield "exp", lambda x: scal(ad.exp(x)), s((4,))
    yield "sum", lambda x: scal(ad.sum_(x, axis=1)), s((3, 4))
    yield "sum-keepdims", lambda x: scal(ad.sum_(x, axis=0, keepdims=True)), s((3, 4))
    yield "mean", lambda x: scal(ad.mean(x, axis=-1)), s((3, 4))
    yield "reshape", lambda x: scal(ad.reshape(x, (4, 3))), s((2, 6))
    yield "transpose", lambda x: scal(ad.transpose(x, (2, 0, 1))), s((2, 3, 4))
    yield "slice", lambda x: scal(ad.slice_(x, (slice(1, 3), slice(None, None, 2)))), s((4, 5))
    yield "take", lambda x: scal(ad.take(x, np.array([2, 0, 2]), axis=1)), s((2, 4))
    m1, m2, m3, m4 = s((3, 4)), s((2, 4, 5)), s((4, 5)), s((2, 3, 4))
    yield "matmul-left", lambda x: scal(ad.matmul(x, ad.Tensor(m3))), s((3, 4))
    yield "matmul-right", lambda x: scal(ad.matmul(ad.Tensor(m1), x)), s((4, 2))
    yield "matmul-batched", lambda x: scal(ad.matmul(x, ad.Tensor(m2))), s((2, 3, 4))
    yield "matmul-batched-2d", lambda x: scal(ad.matmul(ad.Tensor(m4), x)), s((4, 2))
    yield "softmax", lambda x: scal(ad.softmax(x)), s((3, 4))
    labels = rng.integers(0, 4, 5)
    yield "softmax-cross-entropy", lambda x: ad.softmax_cross_entropy(x, labels), s((5, 4))
    target = s((5, 2))
    yield "mse", lambda x: ad.mse(x, ad.Tensor(target)), s((5, 2))


def _composite_model(seed):
    model = build_supernet(COMPOSITE_SPEC, seed=seed)
    rng = np.random.default_rng(seed + 7)
    for op in model.ops.values():
        op.importance = rng.random(op.units)
        op.set_ratio(rng.uniform(0.05, 0.9 * op.a_max))
    x = rng.standard_normal((4, 3, 6))
    y = rng.integers(0, 3, 4)
    return model, x, y


def _composite_cases(seed, lambda_resource=1.0):
    model, x, y = _composite_model(seed)
    rm = ResourceModel("macs")
    names = list(model.ops)
    a0 = np.array([model.ops[n].ratio for n in names])
    with ad.no_grad():
        r_t = 0.5 * current_consumption(model, rm).item()

    def total_loss():
        task = ad.softmax_cross_entropy(model.forward(x), y)
        return task + ad.scale(resource_loss(current_consumption(model, rm), r_t), lambda_resource)

    def of_ratios(vec):
        saved = {n: model.ops[n].a for n in names}
        try:
            for i, n in enumerate(names):
                model.ops[n].a = ad.slice_(vec, slice(i, i + 1))
            return total_loss()
        finally:
            for n in names:
                model.ops[n].a = saved[n]

    weight = model.layers[1].blocks[0].attn.wq.weight

    def of_weight(w):
        saved = weight.data, weight.requires_grad
        blk = model.layers[1].blocks[0].attn.wq
        blk.weight = w
        try:
            return total_loss()
        finally:
            blk.weight = ad.Tensor(saved[0], requires_grad=saved[1])

    yield "ratios", of_ratios, a0
    yield "attention-weight", of_weight, weight.data.copy()


@dataclass
class GradcheckReport:
    seeds: int
    primitive_max: float = 0.0
    composite_max: float = 0.0
    worst: dict = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def passed(self):
        return self.primitive_max < PRIMITIVE_TOL and self.composite_max < COMPOSITE_TOL

    def lines(self):
        out = [f"seeds: {self.seeds}",
               f"primitives: max relative error {self.primitive_max:.3e} (tolerance {PRIMITIVE_TOL:g})",
               f"composite:  max relative error {self.composite_max:.3e} (tolerance {COMPOSITE_TOL:g})"]
        out += [f"  worst {k}: {v:.3e}" for k, v in sorted(self.worst.items())]
        out.append(f"elapsed: {self.seconds:.1f}s")
        return out


def run_suite(seeds=100, composite=True):
    """Check every primitive (and the composite loss) at ``seeds`` random points each."""
    start = time.perf_counter()
    report = GradcheckReport(seeds)
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        for name, fn, point in _primitive_cases(rng):
            err = ad.grad_check(fn, point)
            report.worst[name] = max(report.worst.get(name, 0.0), err)
            report.primitive_max = max(report.primitive_max, err)
        if composite:
            for name, fn, point in _composite_cases(seed):
                err = ad.grad_check(fn, point)
                key = f"composite/{name}"
                report.worst[key] = max(report.worst.get(key, 0.0), err)
                report.composite_max = max(report.composite_max, err)
    report.seconds = time.perf_counter() - start
    return report
