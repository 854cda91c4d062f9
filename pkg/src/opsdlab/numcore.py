"""Reverse-mode autodiff over a flat tape of float64 tensor primitives.

The primitive set is deliberately small and closed: matmul (with an optional
transpose of the right operand), add, multiply, layer_norm, gelu (tanh
approximation), embed (row gather), log_softmax, softmax, take_last (gather
along the last axis), reduce_mean and stop_gradient. That is enough to express
a decoder-only transformer, a cross-entropy loss and a truncated reverse-KL
loss, while keeping every backward rule short enough to audit by hand.

Shapes: operations act on the trailing one or two axes; any extra leading axes
are treated as batch axes. The only broadcasting allowed is a right operand
whose shape matches the trailing shape of the left operand (leading-batch
broadcast) plus scalar coefficients in multiply.

All arithmetic is in 64-bit floats.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np


class ContractError(ValueError):
    """An operation was invoked outside its documented contract."""


class NumericError(ArithmeticError):
    """Non-finite values where the contract requires finite ones."""


LAYER_NORM_EPS = 1e-5

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def as_tensor(x) -> np.ndarray:
    """Coerce to a C-contiguous float64 array (row-major flat values)."""
    return np.ascontiguousarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# Forward kernels (pure numpy; shared by the tape and the eager path so both
# produce bit-identical values)
# ---------------------------------------------------------------------------


def k_matmul(a: np.ndarray, b: np.ndarray, transpose_b: bool = False) -> np.ndarray:
    if transpose_b:
        b = np.swapaxes(b, -1, -2)
    return np.matmul(a, b)


def k_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a + b


def k_multiply(a: np.ndarray, b: Union[np.ndarray, float]) -> np.ndarray:
    return a * b


def k_layer_norm(x: np.ndarray, scale: np.ndarray, offset: np.ndarray):
    """Normalize the last axis. Returns (y, xhat, inv_std) for the backward."""
    mu = x.mean(axis=-1, keepdims=True)
    var = np.square(x - mu).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = (x - mu) * inv_std
    return xhat * scale + offset, xhat, inv_std


def k_gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation: 0.5 x (1 + tanh(c (x + a x^3)))
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x ** 3)))


def k_gelu_grad(x: np.ndarray) -> np.ndarray:
    u = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du


def k_log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def k_softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def k_embed(table: np.ndarray, ids: np.ndarray) -> np.ndarray:
    return table[ids]


def k_take_last(x: np.ndarray, idx: np.ndarray) -> np.ndarray:
    if idx.ndim == 1:
        return np.take(x, idx, axis=-1)
    return np.take_along_axis(x, idx, axis=-1)


def k_reduce_mean(x: np.ndarray) -> np.ndarray:
    return np.asarray(x.mean(), dtype=np.float64)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class Node:
    op: str
    inputs: tuple
    value: np.ndarray
    ctx: dict


class Tape:
    """Ordered record of primitive applications.

    Single-writer during construction; once built it is read-only and
    `backward` / `replay` may be called from any thread.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.param_ids: dict[str, int] = {}

    # -- leaves ------------------------------------------------------------

    def param(self, name: str, value) -> int:
        """Register a named trainable leaf."""
        if name in self.param_ids:
            raise ContractError(f"duplicate parameter name {name!r}")
        nid = self._record("param", (), as_tensor(value), {"name": name})
        self.param_ids[name] = nid
        return nid

    def constant(self, value) -> int:
        """Register a non-trainable leaf."""
        return self._record("const", (), as_tensor(value), {})

    # -- primitives ---------------------------------------------------------

    def matmul(self, a: int, b: int, transpose_b: bool = False) -> int:
        va, vb = self.value(a), self.value(b)
        if va.ndim < 2 or vb.ndim < 2:
            raise ContractError("matmul operands must have >= 2 dims")
        if vb.ndim != 2 and vb.shape[:-2] != va.shape[:-2]:
            raise ContractError(
                f"matmul leading dims mismatch: {va.shape} vs {vb.shape}")
        inner_b = vb.shape[-1] if transpose_b else vb.shape[-2]
        if va.shape[-1] != inner_b:
            raise ContractError(
                f"matmul inner dims mismatch: {va.shape} vs {vb.shape}")
        out = k_matmul(va, vb, transpose_b)
        return self._record("matmul", (a, b), out, {"transpose_b": transpose_b})

    def add(self, a: int, b: int) -> int:
        va, vb = self.value(a), self.value(b)
        self._check_trailing(va, vb, "add")
        return self._record("add", (a, b), k_add(va, vb), {})

    def multiply(self, a: int, b: Union[int, float]) -> int:
        va = self.value(a)
        if isinstance(b, (int, np.integer)) and not isinstance(b, bool):
            vb = self.value(b)
            self._check_trailing(va, vb, "multiply")
            return self._record("multiply", (a, b), k_multiply(va, vb), {})
        c = float(b)
        return self._record("scale", (a,), k_multiply(va, c), {"c": c})

    def layer_norm(self, x: int, scale: int, offset: int) -> int:
        vx, vs, vo = self.value(x), self.value(scale), self.value(offset)
        if vs.shape != (vx.shape[-1],) or vo.shape != (vx.shape[-1],):
            raise ContractError("layer_norm scale/offset must match last dim")
        y, xhat, inv_std = k_layer_norm(vx, vs, vo)
        return self._record("layer_norm", (x, scale, offset), y,
                            {"xhat": xhat, "inv_std": inv_std})

    def gelu(self, x: int) -> int:
        return self._record("gelu", (x,), k_gelu(self.value(x)), {})

    def embed(self, table: int, ids) -> int:
        vt = self.value(table)
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= vt.shape[0]):
            raise ContractError("embed ids out of range")
        return self._record("embed", (table,), k_embed(vt, ids), {"ids": ids})

    def log_softmax(self, x: int) -> int:
        vx = self.value(x)
        if vx.shape[-1] < 1:
            raise ContractError("log_softmax needs a non-empty last axis")
        if not np.isfinite(vx).all():
            raise NumericError("log_softmax input contains non-finite values")
        y = k_log_softmax(vx)
        return self._record("log_softmax", (x,), y, {})

    def softmax(self, x: int) -> int:
        vx = self.value(x)
        if not np.isfinite(vx).all():
            raise NumericError("softmax input contains non-finite values")
        y = k_softmax(vx)
        return self._record("softmax", (x,), y, {})

    def take_last(self, x: int, idx) -> int:
        vx = self.value(x)
        idx = np.asarray(idx, dtype=np.int64)
        if idx.ndim != 1 and idx.shape[:-1] != vx.shape[:-1]:
            raise ContractError("take_last index must be 1-D or rowwise")
        if idx.size and (idx.min() < 0 or idx.max() >= vx.shape[-1]):
            raise ContractError("take_last index out of range")
        return self._record("take_last", (x,), k_take_last(vx, idx), {"idx": idx})

    def reduce_mean(self, x: int) -> int:
        return self._record("reduce_mean", (x,), k_reduce_mean(self.value(x)), {})

    def stop_gradient(self, x: int) -> int:
        """Forward identity; the backward pass does not cross this node."""
        return self._record("stop_gradient", (x,), self.value(x), {})

    # -- access --------------------------------------------------------------

    def value(self, nid: int) -> np.ndarray:
        if not isinstance(nid, (int, np.integer)) or not 0 <= nid < len(self.nodes):
            raise ContractError(f"unknown tape node {nid!r}")
        return self.nodes[nid].value

    def _record(self, op: str, inputs: tuple, value: np.ndarray, ctx: dict) -> int:
        self.nodes.append(Node(op, inputs, value, ctx))
        return len(self.nodes) - 1

    @staticmethod
    def _check_trailing(va: np.ndarray, vb: np.ndarray, op: str) -> None:
        if vb.shape != va.shape and (vb.ndim > va.ndim
                                     or vb.shape != va.shape[va.ndim - vb.ndim:]):
            raise ContractError(f"{op} shape mismatch: {va.shape} vs {vb.shape}")


def replay(tape: Tape) -> list[np.ndarray]:
    """Recompute every node value from the recorded leaves, in order.

    Used to check the determinism invariant: the recomputed values must be
    bit-identical to the stored ones.
    """
    values: list[np.ndarray] = []
    for node in tape.nodes:
        ins = [values[i] for i in node.inputs]
        if node.op in ("param", "const"):
            values.append(node.value.copy())
        elif node.op == "matmul":
            values.append(k_matmul(ins[0], ins[1], node.ctx["transpose_b"]))
        elif node.op == "add":
            values.append(k_add(ins[0], ins[1]))
        elif node.op == "multiply":
            values.append(k_multiply(ins[0], ins[1]))
        elif node.op == "scale":
            values.append(k_multiply(ins[0], node.ctx["c"]))
        elif node.op == "layer_norm":
            values.append(k_layer_norm(ins[0], ins[1], ins[2])[0])
        elif node.op == "gelu":
            values.append(k_gelu(ins[0]))
        elif node.op == "embed":
            values.append(k_embed(ins[0], node.ctx["ids"]))
        elif node.op == "log_softmax":
            values.append(k_log_softmax(ins[0]))
        elif node.op == "softmax":
            values.append(k_softmax(ins[0]))
        elif node.op == "take_last":
            values.append(k_take_last(ins[0], node.ctx["idx"]))
        elif node.op == "reduce_mean":
            values.append(k_reduce_mean(ins[0]))
        elif node.op == "stop_gradient":
            values.append(ins[0].copy())
        else:  # pragma: no cover
            raise ContractError(f"unknown op {node.op!r}")
    return values


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient over the leading axes it was broadcast across."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra))).reshape(shape)


def _scatter_last(shape: tuple, idx: np.ndarray, g: np.ndarray) -> np.ndarray:
    out = np.zeros(shape, dtype=np.float64)
    v = out.reshape(-1, shape[-1])
    rows = np.arange(v.shape[0])[:, None]
    if idx.ndim == 1:
        cols = np.broadcast_to(idx, (v.shape[0], idx.shape[0]))
    else:
        cols = idx.reshape(v.shape[0], -1)
    np.add.at(v, (rows, cols), g.reshape(v.shape[0], -1))
    return out


def backward(tape: Tape, seed_node: int) -> dict[str, np.ndarray]:
    """Accumulate d(seed)/d(param) for every named parameter on the tape.

    The seed must be a scalar node. Parameters only reachable through
    stop_gradient receive exact zeros. Nodes are visited in reverse record
    order, which is a reverse topological order of the DAG, exactly once.
    """
    seed_val = tape.value(seed_node)
    if seed_val.size != 1:
        raise ContractError("backward seed node must be scalar")

    grads: dict[int, np.ndarray] = {seed_node: np.ones_like(seed_val)}
    for nid in range(seed_node, -1, -1):
        g = grads.pop(nid, None)
        if g is None:
            continue
        node = tape.nodes[nid]
        op = node.op
        if op in ("param", "const", "stop_gradient"):
            if op == "param":
                grads[nid] = g  # keep for collection below
            continue
        ins = node.inputs
        if op == "matmul":
            a, b = ins
            va, vb = tape.value(a), tape.value(b)
            if node.ctx["transpose_b"]:
                ga = np.matmul(g, vb)
                gb = np.matmul(np.swapaxes(g, -1, -2), va)
            else:
                ga = np.matmul(g, np.swapaxes(vb, -1, -2))
                gb = np.matmul(np.swapaxes(va, -1, -2), g)
            if vb.ndim == 2 and va.ndim > 2:
                gb = gb.sum(axis=tuple(range(gb.ndim - 2)))
            _accum(grads, a, ga)
            _accum(grads, b, gb)
        elif op == "add":
            a, b = ins
            _accum(grads, a, g)
            _accum(grads, b, _sum_to_shape(g, tape.value(b).shape))
        elif op == "multiply":
            a, b = ins
            _accum(grads, a, g * tape.value(b))
            _accum(grads, b, _sum_to_shape(g * tape.value(a),
                                           tape.value(b).shape))
        elif op == "scale":
            _accum(grads, ins[0], g * node.ctx["c"])
        elif op == "layer_norm":
            x, scale, offset = ins
            xhat, inv_std = node.ctx["xhat"], node.ctx["inv_std"]
            vs = tape.value(scale)
            dxhat = g * vs
            n = xhat.shape[-1]
            gx = inv_std * (dxhat
                            - dxhat.mean(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
            _accum(grads, x, gx)
            _accum(grads, scale, _sum_to_shape(g * xhat, vs.shape))
            _accum(grads, offset, _sum_to_shape(g, vs.shape))
        elif op == "gelu":
            _accum(grads, ins[0], g * k_gelu_grad(tape.value(ins[0])))
        elif op == "embed":
            table = ins[0]
            vt = tape.value(table)
            gt = np.zeros_like(vt)
            flat_ids = node.ctx["ids"].reshape(-1)
            np.add.at(gt, flat_ids, g.reshape(flat_ids.shape[0], *vt.shape[1:]))
            _accum(grads, table, gt)
        elif op == "log_softmax":
            y = node.value
            gx = g - np.exp(y) * g.sum(axis=-1, keepdims=True)
            _accum(grads, ins[0], gx)
        elif op == "softmax":
            s = node.value
            gx = s * (g - (g * s).sum(axis=-1, keepdims=True))
            _accum(grads, ins[0], gx)
        elif op == "take_last":
            vx = tape.value(ins[0])
            _accum(grads, ins[0], _scatter_last(vx.shape, node.ctx["idx"], g))
        elif op == "reduce_mean":
            vx = tape.value(ins[0])
            _accum(grads, ins[0], np.full(vx.shape, float(g) / vx.size))
        else:  # pragma: no cover
            raise ContractError(f"no backward rule for {op!r}")

    out: dict[str, np.ndarray] = {}
    for name, nid in tape.param_ids.items():
        if nid in grads and nid <= seed_node:
            out[name] = grads[nid]
        else:
            out[name] = np.zeros_like(tape.value(nid))
    return out


def _accum(grads: dict[int, np.ndarray], nid: int, g: np.ndarray) -> None:
    if nid in grads:
        grads[nid] = grads[nid] + g
    else:
        grads[nid] = g


class EagerOps:
    """Numpy mirror of the tape API: same kernels, no recording.

    Handles are plain ndarrays, so forward code written against a Tape also
    runs eagerly (used for sampling and evaluation, where no gradients are
    needed). Values are bit-identical to the taped path because both call the
    same kernels.
    """

    def param(self, name, value):
        return as_tensor(value)

    def constant(self, value):
        return as_tensor(value)

    def value(self, h):
        return h

    def matmul(self, a, b, transpose_b=False):
        return k_matmul(a, b, transpose_b)

    def add(self, a, b):
        return k_add(a, b)

    def multiply(self, a, b):
        return k_multiply(a, b if isinstance(b, np.ndarray) else float(b))

    def layer_norm(self, x, scale, offset):
        return k_layer_norm(x, scale, offset)[0]

    def gelu(self, x):
        return k_gelu(x)

    def embed(self, table, ids):
        return k_embed(table, np.asarray(ids, dtype=np.int64))

    def log_softmax(self, x):
        return k_log_softmax(x)

    def softmax(self, x):
        return k_softmax(x)

    def take_last(self, x, idx):
        return k_take_last(x, np.asarray(idx, dtype=np.int64))

    def reduce_mean(self, x):
        return k_reduce_mean(x)

    def stop_gradient(self, x):
        return x
