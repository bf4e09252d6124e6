"""Searchable networks whose widths, depths and head counts are gated by top-k masks.

Masks multiply layer *inputs*: a linear layer sees ``x * m_in`` and a residual
block contributes ``m_L * f(x)`` to the stream.  Exporting keeps the top-k
units of every operator and slices the weights accordingly, producing a model
with no operators left.
"""

import json
import math
from dataclasses import dataclass, field
from typing import Annotated, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveInt

from . import autodiff as ad
from . import topk as tk


# ---------------------------------------------------------------- model specs


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DimSearch(_Strict):
    """Marks a dimension searchable; ``group`` names a shared operator."""

    min_size: Optional[PositiveInt] = None
    step: PositiveInt = 1
    group: Optional[str] = None


class LinearSpec(_Strict):
    kind: Literal["linear"] = "linear"
    out: PositiveInt
    act: Literal["relu", "none"] = "relu"
    search: Optional[DimSearch] = None


class StageSpec(_Strict):
    kind: Literal["stage"] = "stage"
    blocks: PositiveInt
    block: Literal["mlp", "attention", "transformer"] = "mlp"
    hidden: PositiveInt = 64
    heads: PositiveInt = 1
    head_dim: PositiveInt = 8
    depth: Optional[DimSearch] = None
    hidden_search: Optional[DimSearch] = None
    head_search: Optional[DimSearch] = None
    qk_search: Optional[DimSearch] = None
    v_search: Optional[DimSearch] = None


class PoolSpec(_Strict):
    kind: Literal["meanpool"] = "meanpool"


LayerSpec = Annotated[Union[LinearSpec, StageSpec, PoolSpec], Field(discriminator="kind")]


class ModelSpec(_Strict):
    input_dim: PositiveInt
    seq_len: PositiveInt = 1
    input_search: Optional[DimSearch] = None
    layers: List[LayerSpec]


# ---------------------------------------------------------------- cost terms


@dataclass(frozen=True)
class Term:
    """One cost contribution.  Dims are ``(operator name or None, max size)`` pairs."""

    layer_id: str
    kind: str  # "linear" or "attention"
    in_dims: tuple
    out_dims: tuple
    tokens: int
    depth: Optional[tuple] = None  # (depth operator name, block index)


# ---------------------------------------------------------------- layers


def _gate(x, mask):
    """Multiply the last axis of ``x`` by an element mask."""
    if mask is None:
        return x
    return x * ad.reshape(mask, (1,) * (x.ndim - 1) + (-1,))


def _name(op):
    return None if op is None else op.name


class MaskedLinear:
    def __init__(self, f_in, f_out, in_op=None, out_op=None, act="none", name="", tokens=1):
        if in_op is not None and in_op.n != f_in:
            raise ValueError(f"{name}: input operator has {in_op.n} elements, layer expects {f_in}")
        if out_op is not None and out_op.n != f_out:
            raise ValueError(f"{name}: output operator has {out_op.n} elements, layer expects {f_out}")
        self.f_in, self.f_out = f_in, f_out
        self.in_op, self.out_op = in_op, out_op
        self.act = act
        self.name = name
        self.tokens = tokens
        self.weight = ad.Tensor(np.zeros((f_out, f_in)), requires_grad=True)
        self.bias = ad.Tensor(np.zeros(f_out), requires_grad=True)

    def init(self, rng):
        bound = 1.0 / math.sqrt(self.f_in)
        self.weight.data = rng.uniform(-bound, bound, size=(self.f_out, self.f_in))
        self.bias.data = rng.uniform(-bound, bound, size=self.f_out)

    def parameters(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]

    def forward(self, x, masks):
        if x.shape[-1] != self.f_in:
            raise ad.ShapeError(f"{self.name}: expected {self.f_in} input features, got shape {x.shape}")
        if masks is not None and self.in_op is not None:
            x = _gate(x, masks[self.in_op.name])
        y = ad.matmul(x, ad.transpose(self.weight)) + ad.reshape(self.bias, (1,) * (x.ndim - 1) + (self.f_out,))
        return ad.relu(y) if self.act == "relu" else y

    def terms(self, depth=None):
        return [Term(self.name, "linear", ((_name(self.in_op), self.f_in),),
                     ((_name(self.out_op), self.f_out),), self.tokens, depth)]

    def export(self, keep, keep_in=None, keep_out=None):
        if keep_in is None:
            keep_in = keep.get(_name(self.in_op), np.arange(self.f_in))
        if keep_out is None:
            keep_out = keep.get(_name(self.out_op), np.arange(self.f_out))
        out = MaskedLinear(len(keep_in), len(keep_out), act=self.act, name=self.name, tokens=self.tokens)
        out.weight.data = self.weight.data[np.ix_(keep_out, keep_in)].copy()
        out.bias.data = self.bias.data[keep_out].copy()
        return out


class MlpBlock:
    def __init__(self, d, hidden, stream_op=None, hidden_op=None, name="", tokens=1):
        self.name = name
        self.fc1 = MaskedLinear(d, hidden, stream_op, hidden_op, act="relu", name=f"{name}.fc1", tokens=tokens)
        self.fc2 = MaskedLinear(hidden, d, hidden_op, stream_op, name=f"{name}.fc2", tokens=tokens)

    def sublayers(self):
        return [self.fc1, self.fc2]

    def residual(self, x, masks, gate):
        f = self.fc2.forward(self.fc1.forward(x, masks), masks)
        return x + (f if gate is None else f * gate)

    def terms(self, depth=None):
        return self.fc1.terms(depth) + self.fc2.terms(depth)

    def export(self, keep):
        out = MlpBlock.__new__(MlpBlock)
        out.name = self.name
        out.fc1 = self.fc1.export(keep)
        out.fc2 = self.fc2.export(keep)
        return out


class MaskedAttention:
    """Multi-head self-attention over ``(B, L, d)`` with head, qk-dim and v-dim gating.

    ``scale`` stays at ``1/sqrt(head_dim)`` of the supernet after export so the
    pruned model reproduces the gated scores.
    """

    def __init__(self, d, heads, qk_dim, v_dim=None, stream_op=None, head_op=None, qk_op=None, v_op=None,
                 scale=None, name="", seq_len=1):
        v_dim = qk_dim if v_dim is None else v_dim
        self.d, self.heads, self.qk_dim, self.v_dim = d, heads, qk_dim, v_dim
        self.head_op, self.qk_op, self.v_op, self.stream_op = head_op, qk_op, v_op, stream_op
        for op, n in ((head_op, heads), (qk_op, qk_dim), (v_op, v_dim)):
            if op is not None and op.n != n:
                raise ValueError(f"{name}: operator {op.name} has {op.n} elements, expected {n}")
        self.scale = 1.0 / math.sqrt(qk_dim) if scale is None else scale
        self.name = name
        self.seq_len = seq_len
        self.wq = MaskedLinear(d, heads * qk_dim, stream_op, name=f"{name}.q", tokens=seq_len)
        self.wk = MaskedLinear(d, heads * qk_dim, stream_op, name=f"{name}.k", tokens=seq_len)
        self.wv = MaskedLinear(d, heads * v_dim, stream_op, name=f"{name}.v", tokens=seq_len)
        self.wo = MaskedLinear(heads * v_dim, d, None, stream_op, name=f"{name}.o", tokens=seq_len)

    def sublayers(self):
        return [self.wq, self.wk, self.wv, self.wo]

    def _split(self, t, dim):
        b, length, _ = t.shape
        return ad.transpose(ad.reshape(t, (b, length, self.heads, dim)), (0, 2, 1, 3))

    def _head_gate(self, t, masks, dim_op, dim):
        if masks is None:
            return t
        if dim_op is not None:
            t = t * ad.reshape(masks[dim_op.name], (1, 1, 1, dim))
        if self.head_op is not None:
            t = t * ad.reshape(masks[self.head_op.name], (1, self.heads, 1, 1))
        return t

    def forward(self, x, masks):
        if x.ndim != 3:
            raise ad.ShapeError(f"{self.name}: attention expects (B, L, d) input, got {x.shape}")
        b, length, _ = x.shape
        q = self._head_gate(self._split(self.wq.forward(x, masks), self.qk_dim), masks, self.qk_op, self.qk_dim)
        k = self._head_gate(self._split(self.wk.forward(x, masks), self.qk_dim), masks, self.qk_op, self.qk_dim)
        v = self._head_gate(self._split(self.wv.forward(x, masks), self.v_dim), masks, self.v_op, self.v_dim)
        att = ad.softmax(ad.scale(ad.matmul(q, ad.transpose(k)), self.scale))
        o = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (b, length, self.heads * self.v_dim))
        return self.wo.forward(o, masks)

    def residual(self, x, masks, gate):
        f = self.forward(x, masks)
        return x + (f if gate is None else f * gate)

    def terms(self, depth=None):
        h = (_name(self.head_op), self.heads)
        qk = (_name(self.qk_op), self.qk_dim)
        v = (_name(self.v_op), self.v_dim)
        stream = (_name(self.stream_op), self.d)
        tok = self.seq_len
        return [
            Term(self.wq.name, "linear", (stream,), (h, qk), tok, depth),
            Term(self.wk.name, "linear", (stream,), (h, qk), tok, depth),
            Term(self.wv.name, "linear", (stream,), (h, v), tok, depth),
            Term(f"{self.name}.scores", "attention", (h, qk), (), tok * tok, depth),
            Term(f"{self.name}.values", "attention", (h, v), (), tok * tok, depth),
            Term(self.wo.name, "linear", (h, v), (stream,), tok, depth),
        ]

    def export(self, keep):
        heads = keep.get(_name(self.head_op), np.arange(self.heads))
        qk = keep.get(_name(self.qk_op), np.arange(self.qk_dim))
        vd = keep.get(_name(self.v_op), np.arange(self.v_dim))
        rows_qk = (heads[:, None] * self.qk_dim + qk[None, :]).reshape(-1)
        rows_v = (heads[:, None] * self.v_dim + vd[None, :]).reshape(-1)
        out = MaskedAttention.__new__(MaskedAttention)
        out.d = len(keep.get(_name(self.stream_op), np.arange(self.d)))
        out.heads, out.qk_dim, out.v_dim = len(heads), len(qk), len(vd)
        out.head_op = out.qk_op = out.v_op = out.stream_op = None
        out.scale = self.scale
        out.name = self.name
        out.seq_len = self.seq_len
        out.wq = self.wq.export(keep, keep_out=rows_qk)
        out.wk = self.wk.export(keep, keep_out=rows_qk)
        out.wv = self.wv.export(keep, keep_out=rows_v)
        out.wo = self.wo.export(keep, keep_in=rows_v)
        return out


class TransformerBlock:
    """Attention followed by an MLP, both residual, sharing one depth gate."""

    def __init__(self, attn, ffn, name=""):
        self.attn, self.ffn, self.name = attn, ffn, name

    def sublayers(self):
        return self.attn.sublayers() + self.ffn.sublayers()

    def residual(self, x, masks, gate):
        return self.ffn.residual(self.attn.residual(x, masks, gate), masks, gate)

    def terms(self, depth=None):
        return self.attn.terms(depth) + self.ffn.terms(depth)

    def export(self, keep):
        return TransformerBlock(self.attn.export(keep), self.ffn.export(keep), self.name)


class ResidualStage:
    def __init__(self, blocks, depth_op=None, name=""):
        if depth_op is not None and depth_op.n != len(blocks):
            raise ValueError(f"{name}: depth operator has {depth_op.n} elements for {len(blocks)} blocks")
        self.blocks = blocks
        self.depth_op = depth_op
        self.name = name

    def sublayers(self):
        return [lin for blk in self.blocks for lin in blk.sublayers()]

    def forward(self, x, masks):
        m = None
        if masks is not None and self.depth_op is not None:
            m = masks[self.depth_op.name]
        for j, blk in enumerate(self.blocks):
            gate = None
            if m is not None:
                gate = ad.reshape(m[j:j + 1], (1,) * x.ndim)
            x = blk.residual(x, masks, gate)
        return x

    def terms(self):
        out = []
        for j, blk in enumerate(self.blocks):
            depth = None if self.depth_op is None else (self.depth_op.name, j)
            out.extend(blk.terms(depth))
        return out

    def export(self, keep):
        kept = keep.get(_name(self.depth_op), np.arange(len(self.blocks)))
        return ResidualStage([self.blocks[j].export(keep) for j in kept], None, self.name)


class MeanPool:
    name = "pool"

    def sublayers(self):
        return []

    def forward(self, x, masks):
        if x.ndim != 3:
            raise ad.ShapeError(f"meanpool expects (B, L, d) input, got {x.shape}")
        return ad.mean(x, axis=1)

    def terms(self):
        return []

    def export(self, keep):
        return self


# ---------------------------------------------------------------- model


class Model:
    """A stack of layers plus the operators gating them (none once exported)."""

    def __init__(self, spec, layers, ops, input_op=None, input_indices=None):
        self.spec = spec
        self.layers = layers
        self.ops = ops
        self.input_op = input_op
        self.input_indices = input_indices

    @property
    def searchable(self):
        return bool(self.ops)

    def linears(self):
        out = []
        for layer in self.layers:
            if isinstance(layer, MaskedLinear):
                out.append(layer)
            else:
                out.extend(layer.sublayers())
        return out

    def parameters(self):
        return [p for lin in self.linears() for p in lin.parameters()]

    def init_weights(self, seed):
        rng = np.random.default_rng(seed)
        for lin in self.linears():
            lin.init(rng)

    def masks(self):
        return {name: tk.soft_mask(op) for name, op in self.ops.items()}

    def forward(self, x, masks="soft"):
        """``masks`` is ``"soft"`` (current soft masks), ``None`` (ungated) or a dict of element masks."""
        if not isinstance(x, ad.Tensor):
            x = ad.Tensor(x)
        if masks == "soft":
            masks = self.masks() if self.ops else None
        if self.input_indices is not None:
            x = ad.take(x, self.input_indices, axis=x.ndim - 1)
        expected = self.spec.input_dim if self.input_indices is None else len(self.input_indices)
        if x.shape[-1] != expected:
            raise ad.ShapeError(f"model expects {expected} input features, got shape {x.shape}")
        for layer in self.layers:
            x = layer.forward(x, masks)
        return x

    __call__ = forward

    def terms(self):
        return [t for layer in self.layers for t in layer.terms()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.parameters()}

    def load_state_dict(self, state):
        params = dict(self.parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {p.shape}")
            p.data = arr.copy()

    def export(self, keep):
        layers = [layer.export(keep) for layer in self.layers]
        idx = keep.get(_name(self.input_op))
        if self.input_indices is not None and idx is not None:
            idx = self.input_indices[idx]
        return Model(self.spec, layers, {}, None, None if idx is None else np.asarray(idx))


class _Builder:
    def __init__(self, normalize, metric, decay):
        self.ops = {}
        self.groups = {}
        self.normalize, self.metric, self.decay = normalize, metric, decay

    def op(self, search, n, kind, default_name):
        if search is None:
            return None
        name = search.group or default_name
        if name in self.ops:
            op = self.ops[name]
            if op.n != n or op.kind != kind:
                raise ValueError(f"dependency group {name!r} mixes sizes {op.n} and {n}")
            return op
        op = tk.TopkOperator(n, kind=kind, group_size=search.step, min_size=search.min_size,
                             decay=self.decay, metric=self.metric, normalize=self.normalize, name=name)
        self.ops[name] = op
        return op


def build_supernet(spec, seed=0, normalize=True, metric=tk.TAYLOR, decay=0.99):
    """Build a searchable model with one operator per searchable dimension (shared within groups)."""
    if not isinstance(spec, ModelSpec):
        spec = ModelSpec.model_validate(spec)
    b = _Builder(normalize, metric, decay)
    input_op = b.op(spec.input_search, spec.input_dim, tk.WIDTH, "input")
    width, stream, tokens = spec.input_dim, input_op, spec.seq_len
    layers = []
    for i, ls in enumerate(spec.layers):
        name = f"layers.{i}"
        if isinstance(ls, LinearSpec):
            out_op = b.op(ls.search, ls.out, tk.WIDTH, name)
            layers.append(MaskedLinear(width, ls.out, stream, out_op, act=ls.act, name=name, tokens=tokens))
            width, stream = ls.out, out_op
        elif isinstance(ls, StageSpec):
            if ls.block != "mlp" and tokens == 1 and spec.seq_len == 1:
                raise ValueError(f"{name}: attention blocks need sequence input (seq_len > 1)")
            blocks = []
            for j in range(ls.blocks):
                bn = f"{name}.blocks.{j}"
                ffn = None
                if ls.block in ("mlp", "transformer"):
                    hid = b.op(ls.hidden_search, ls.hidden, tk.WIDTH, f"{bn}.hidden")
                    ffn = MlpBlock(width, ls.hidden, stream, hid, name=f"{bn}.ffn" if ls.block != "mlp" else bn,
                                   tokens=tokens)
                if ls.block in ("attention", "transformer"):
                    attn = MaskedAttention(
                        width, ls.heads, ls.head_dim, stream_op=stream,
                        head_op=b.op(ls.head_search, ls.heads, tk.HEAD, f"{bn}.heads"),
                        qk_op=b.op(ls.qk_search, ls.head_dim, tk.WIDTH, f"{bn}.qk"),
                        v_op=b.op(ls.v_search, ls.head_dim, tk.WIDTH, f"{bn}.v"),
                        name=f"{bn}.attn", seq_len=tokens)
                blocks.append(ffn if ls.block == "mlp" else attn if ls.block == "attention"
                              else TransformerBlock(attn, ffn, bn))
            depth_op = b.op(ls.depth, ls.blocks, tk.DEPTH, f"{name}.depth")
            layers.append(ResidualStage(blocks, depth_op, name))
        else:
            if tokens == 1 and spec.seq_len == 1:
                raise ValueError(f"{name}: meanpool needs sequence input")
            layers.append(MeanPool())
            tokens = 1
    model = Model(spec, layers, b.ops, input_op)
    model.init_weights(seed)
    return model


def forward_masked(model, x):
    return model.forward(x, masks="soft")


# ---------------------------------------------------------------- export


@dataclass
class DimEntry:
    name: str
    kind: str
    n_max: int
    k: int
    indices: List[int]


@dataclass
class ArchitectureDescription:
    spec: dict
    dims: List[DimEntry]
    provenance: dict = field(default_factory=dict)

    def keep(self):
        return {d.name: np.asarray(d.indices, dtype=np.intp) for d in self.dims}

    def sizes(self):
        return {d.name: d.k for d in self.dims}

    def to_dict(self):
        return {
            "spec": self.spec,
            "dims": [{"name": d.name, "kind": d.kind, "n_max": d.n_max, "k": d.k, "indices": list(d.indices)}
                     for d in self.dims],
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, data):
        dims = [DimEntry(d["name"], d["kind"], int(d["n_max"]), int(d["k"]), [int(i) for i in d["indices"]])
                for d in data["dims"]]
        for d in dims:
            if not 1 <= d.k <= d.n_max or len(d.indices) != d.k:
                raise ValueError(f"dimension {d.name}: retained count {d.k} invalid for size {d.n_max}")
        return cls(data["spec"], dims, dict(data.get("provenance", {})))

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps() + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def describe(model, keep, provenance=None):
    dims = [DimEntry(name, op.kind, op.n, len(keep[name]), [int(i) for i in keep[name]])
            for name, op in model.ops.items()]
    return ArchitectureDescription(model.spec.model_dump(), dims, dict(provenance or {}))


def export_pruned(model, provenance=None):
    """Retain the top-k units of every operator; returns ``(description, discrete model)``."""
    keep = {name: tk.retained_indices(op) for name, op in model.ops.items()}
    prov = {"a": {name: op.ratio for name, op in model.ops.items()}}
    prov.update(provenance or {})
    return describe(model, keep, prov), model.export(keep)


def discrete_from_description(desc, seed=0):
    """Rebuild the discrete model of ``desc`` with fresh weights drawn from ``seed``."""
    supernet = build_supernet(desc.spec, seed=0)
    model = supernet.export(desc.keep())
    model.init_weights(seed)
    return model


def count_discrete_resource(desc, kind):
    """Exact per-sample MACs or parameter count of the architecture in ``desc``."""
    if kind not in ("macs", "params"):
        raise ValueError(f"cannot count resource {kind!r}; latency is measured, not counted")
    supernet = build_supernet(desc.spec, seed=0)
    sizes = desc.sizes()
    keep = desc.keep()

    def size(dims):
        out = 1
        for name, n in dims:
            out *= n if name is None else sizes[name]
        return out

    total = 0
    for t in supernet.terms():
        if t.depth is not None and t.depth[1] not in keep[t.depth[0]]:
            continue
        fin, fout = size(t.in_dims), size(t.out_dims)
        if t.kind == "attention":
            total += t.tokens * fin if kind == "macs" else 0
        elif kind == "macs":
            total += t.tokens * fin * fout
        else:
            total += fin * fout + fout
    return float(total)
