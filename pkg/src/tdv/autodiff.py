"""Tape-based reverse-mode differentiation over float64 numpy arrays.

A Tape records primitive operations as they execute. `backward` replays the
record in reverse for gradients; `forward_dots` pushes directional tangents
through the stored record; `dual_backward` runs a second reverse sweep over
tangent-carrying cotangents, which yields Hessian-vector products and mixed
second derivatives (forward-over-reverse).

Activations are channel-major (C, N, H, W) inside the engine; scalars are
0-d arrays. Inputs to tape methods may be Nodes or plain arrays (constants);
gradients only flow to Nodes.

Each primitive supplies four rules:

    forward(ctx, *vals)                      value
    jvp(ctx, vals, dots, out)                tangent of the value
    vjp(ctx, vals, out, g, need)             cotangents per input
    vjp_dot(ctx, vals, dots, out, g, gdot, need)   tangents of the cotangents

`vjp_dot` never recomputes plain cotangents: dual_backward always runs over
a cotangent cache produced by a prior `backward(..., keep=True)`.
"""

from __future__ import annotations

import numpy as np

from . import conv as _c
from .errors import NumericError


def _val(x):
    return x.value if isinstance(x, Node) else x


def _dot(x):
    return x.dot if isinstance(x, Node) else None


def _acc(store: dict, idx: int, delta):
    if delta is None:
        return
    cur = store.get(idx)
    store[idx] = delta if cur is None else cur + delta


def _addn(a, b):
    """a + b where either side may be None (treated as zero)."""
    if a is None:
        return b
    if b is None:
        return a
    return a + b


class Node:
    __slots__ = ("tape", "idx", "value", "dot")

    def __init__(self, tape, idx, value):
        self.tape = tape
        self.idx = idx
        self.value = value
        self.dot = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.idx}, shape={self.value.shape})"


class Record:
    __slots__ = ("op", "inputs", "out", "ctx")

    def __init__(self, op, inputs, out, ctx):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.ctx = ctx


# ---------------------------------------------------------------------------
# primitive rules


class _Add:
    name = "add"

    @staticmethod
    def forward(ctx, a, b):
        return a + b

    @staticmethod
    def jvp(ctx, vals, dots, out):
        return _addn(dots[0], dots[1])

    @staticmethod
    def vjp(ctx, vals, out, g, need):
        return (g if need[0] else None, g if need[1] else None)

    @staticmethod
    def vjp_dot(ctx, vals, dots, out, g, gdot, need):
        return (gdot if need[0] else None, gdot if need[1] else None)


class _Sub:
    name = "sub"

    @staticmethod
    def forward(ctx, a, b):
        return a - b

    @staticmethod
    def jvp(ctx, vals, dots, out):
        da, db = dots
        if da is None and db is None:
            return None
        if da is None:
            return -db
        if db is None:
            return da
        return da - db

    @staticmethod
    def vjp(ctx, vals, out, g, need):
        return (g if need[0] else None, -g if need[1] else None)

    @staticmethod
    def vjp_dot(ctx, vals, dots, out, g, gdot, need):
        if gdot is None:
            return (None, None)
        return (gdot if need[0] else None, -gdot if need[1] else None)


class _Neg:
    name = "neg"

    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def jvp(ctx, vals, dots, out):
        return None if dots[0] is None else -dots[0]

    @staticmethod
    def vjp(ctx, vals, out, g, need):
        return (-g,)

    @staticmethod
    def vjp_dot(ctx, vals, dots, out, g, gdot, need):
        return (None if gdot is None else -gdot,)


def _scalar_side(shapes):
    """Which operand of mul is the 0-d scalar, if any."""
    a_scalar = shapes[0] == ()
    b_scalar = shapes[1] == ()
    if a_scalar == b_scalar:
        return None
    return 0 if a_scalar else 1


class _Mul:
    """Elementwise product; one operand may be a 0-d scalar."""

    name = "mul"

    @staticmethod
    def forward(ctx, a, b):
        return a * b

    @staticmethod
    def jvp(ctx, vals, dots, out):
        a, b = vals
        da, db = dots
        t1 = None if da is None else da * b
        t2 = None if db is None else a * db
        return _addn(t1, t2)

    @staticmethod
    def vjp(ctx, vals, out, g, need):
        a, b = vals
        sc = _scalar_side((np.shape(a), np.shape(b)))
        ga = gb = None
        if need[0]:
            ga = np.asarray((g * b).sum()) if sc == 0 else g * b
        if need[1]:
            gb = np.asarray((g * a).sum()) if sc == 1 else g * a
        return (ga, gb)

    @staticmethod
    def vjp_dot(ctx, vals, dots, out, g, gdot, need):
        a, b = vals
        da, db = dots
        sc = _scalar_side((np.shape(a), np.shape(b)))
        out_a = out_b = None
        if need[0]:
            t = _addn(None if gdot is None else gdot * b,
                      None if db is None else g * db)
            out_a = np.asarray(t.sum()) if (sc == 0 and t is not None) else t
        if need[1]:
            t = _addn(None if gdot is None else gdot * a,
                      None if da is None else g * da)
            out_b = np.asarray(t.sum()) if (sc == 1 and t is not None) else t
        return (out_a, out_b)


class _Smul:
    """Multiply by a fixed python float (ctx)."""

    name = "smul"

    @staticmethod
    def forward(ctx, a):
        return ctx * a

    @staticmethod
    def jvp(ctx, vals, dots, out):
        return None if dots[0] is None else ctx * dots[0]

    @staticmethod
    def vjp(ctx, vals, out, g, need):
        return (ctx * g,)

    @staticmethod
    def vjp_dot(ctx, vals, dots, out, g, gdot, need):
        return (None if gdot is None else ctx * gdot,)


class _Ssum:
    name = "ssum"

    @staticmethod
    def forward(ctx, a):
        return np.asarray(a.sum())

    @staticmethod
    def jvp(ctx, vals, dots, out):
        return None if dots[0] is None else np.asarray(dots[0].sum())

    @staticmethod
    def vjp(ctx, vals, out, g, need):
        return (np.broadcast_to(g, vals[0].shape),)

    @staticmethod
    def vjp_dot(ctx, vals, dots, out, g, gdot, need):
        if gdot is None:
            return (None,)
        return (np.broadcast_to(gdot, vals[0].shape),)


class _Vdot:
    name = "vdot"

    @staticmethod
    def forward(ctx, a, b):
        return np.asarray(np.vdot(a, b))

    @staticmethod
    def jvp(ctx, vals, dots, out):
        a, b = vals
        da, db = dots
        t1 = None if da is None else np.asarray(np.vdot(da, b))
        t2 = None if db is None else np.asarray(np.vdot(a, db))
        return _addn(t1, t2)

    @staticmethod
    def vjp(ctx, vals, out, g, need):
        a, b = vals
        return (g * b if need[0] else None, g * a if need[1] else None)

    @staticmethod
    def vjp_dot(ctx, vals, dots, out, g, gdot, need):
        a, b = vals
        da, db = dots
        out_a = out_b = None
        if need[0]:
            out_a = _addn(None if gdot is None else gdot * b,
                          None if db is None else g * db)
        if need[1]:
            out_b = _addn(None if gdot is None else gdot * a,
                          None if da is None else g * da)
        return (out_a, out_b)


# elementwise function registry: name -> (f, df, d2f), each vectorized


def _phi(v):
    return 0.5 * np.log1p(v * v)


def _phi_d(v):
    return v / (1.0 + v * v)


def _phi_dd(v):
    t = 1.0 + v * v
    return (1.0 - v * v) / (t * t)


def _lncosh(v):
    a = np.abs(v)
    return a + np.log1p(np.exp(-2.0 * a)) - np.log(2.0)


def _lncosh_d(v):
    return np.tanh(v)


def _lncosh_dd(v):
    e = np.exp(-2.0 * np.abs(v))
    t = 1.0 + e
    return 4.0 * e / (t * t)


EW_FUNCS = {
    "phi": (_phi, _phi_d, _phi_dd),
    "ln_cosh": (_lncosh, _lncosh_d, _lncosh_dd),
    "charbonnier": (
        lambda v, eps: np.sqrt(v * v + eps * eps),
        lambda v, eps: v / np.sqrt(v * v + eps * eps),
        lambda v, eps: eps * eps / np.sqrt(v * v + eps * eps) ** 3,
    ),
    "inv": (
        lambda v: 1.0 / v,
        lambda v: -1.0 / (v * v),
        lambda v: 2.0 / (v * v * v),
    ),
    "posquad": (
        lambda v: np.square(np.maximum(v, 0.0)),
        lambda v: 2.0 * np.maximum(v, 0.0),
        lambda v: 2.0 * (v > 0.0),
    ),
}


class _Ew:
    """Pointwise map from EW_FUNCS; ctx = (name, params tuple)."""

    name = "ew"

    @staticmethod
    def forward(ctx, a):
        f = EW_FUNCS[ctx[0]][0]
        return f(a, *ctx[1])

    @staticmethod
    def jvp(ctx, vals, dots, out):
        if dots[0] is None:
            return None
        df = EW_FUNCS[ctx[0]][1]
        return df(vals[0], *ctx[1]) * dots[0]

    @staticmethod
    def vjp(ctx, vals, out, g, need):
        df = EW_FUNCS[ctx[0]][1]
        return (g * df(vals[0], *ctx[1]),)

    @staticmethod
    def vjp_dot(ctx, vals, dots, out, g, gdot, need):
        _, df, d2f = EW_FUNCS[ctx[0]]
        t = None if gdot is None else gdot * df(vals[0], *ctx[1])
        if dots[0] is not None:
            t = _addn(t, g * d2f(vals[0], *ctx[1]) * dots[0])
        return (t,)


class _Conv:
    """Correlation (or its exact adjoint when ctx['transposed']).

    ctx: stride, mode, transposed, in_hw (spatial extents of the data-side
    input) and out_hw (extents of the output grid).
    """

    name = "conv"

    @staticmethod
    def forward(ctx, x, w):
        if not ctx["transposed"]:
            return _c.conv_forward_cm(x, w, ctx["stride"], ctx["mode"])
        return _c.conv_adjoint_cm(x, w, ctx["stride"], ctx["mode"],
                                  ctx["out_hw"])

    @staticmethod
    def jvp(ctx, vals, dots, out):
        x, w = vals
        dx, dw = dots
        t = None
        if dx is not None:
            t = _Conv.forward(ctx, dx, w)
        if dw is not None:
            t = _addn(t, _Conv.forward(ctx, x, dw))
        return t

    @staticmethod
    def vjp(ctx, vals, out, g, need):
        x, w = vals
        stride, mode = ctx["stride"], ctx["mode"]
        kh, kw = w.shape[2], w.shape[3]
        gx = gw = None
        if not ctx["transposed"]:
            if need[0]:
                gx = _c.conv_adjoint_cm(g, w, stride, mode, ctx["in_hw"])
            if need[1]:
                gw = _c.conv_kernel_grad_cm(x, g, stride, mode, kh, kw)
        else:
            if need[0]:
                gx = _c.conv_forward_cm(g, w, stride, mode)
            if need[1]:
                gw = _c.conv_kernel_grad_cm(g, x, stride, mode, kh, kw)
        return (gx, gw)

    @staticmethod
    def vjp_dot(ctx, vals, dots, out, g, gdot, need):
        x, w = vals
        dx, dw = dots
        stride, mode = ctx["stride"], ctx["mode"]
        kh, kw = w.shape[2], w.shape[3]
        tx = tw = None
        if not ctx["transposed"]:
            if need[0]:
                pairs = []
                if gdot is not None:
                    pairs.append((gdot, w))
                if dw is not None:
                    pairs.append((g, dw))
                if pairs:
                    tx = _c.conv_adjoint_sum_cm(pairs, stride, mode,
                                                ctx["in_hw"])
            if need[1]:
                if dx is not None:
                    tw = _c.conv_kernel_grad_cm(dx, g, stride, mode, kh, kw)
                if gdot is not None:
                    tw = _addn(tw, _c.conv_kernel_grad_cm(x, gdot, stride,
                                                          mode, kh, kw))
        else:
            if need[0]:
                if gdot is not None:
                    tx = _c.conv_forward_cm(gdot, w, stride, mode)
                if dw is not None:
                    tx = _addn(tx, _c.conv_forward_cm(g, dw, stride, mode))
            if need[1]:
                if gdot is not None:
                    tw = _c.conv_kernel_grad_cm(gdot, x, stride, mode, kh, kw)
                if dx is not None:
                    tw = _addn(tw, _c.conv_kernel_grad_cm(g, dx, stride,
                                                          mode, kh, kw))
        return (tx, tw)


class _Blur:
    name = "blur"

    @staticmethod
    def forward(ctx, x):
        return _c.blur_cm(x)

    @staticmethod
    def jvp(ctx, vals, dots, out):
        return None if dots[0] is None else _c.blur_cm(dots[0])

    @staticmethod
    def vjp(ctx, vals, out, g, need):
        return (_c.blur_adjoint_cm(g),)

    @staticmethod
    def vjp_dot(ctx, vals, dots, out, g, gdot, need):
        return (None if gdot is None else _c.blur_adjoint_cm(gdot),)


class _Pad:
    """ctx = (pads, mode)."""

    name = "pad"

    @staticmethod
    def forward(ctx, x):
        return _c.pad_cm(x, ctx[0], ctx[1])

    @staticmethod
    def jvp(ctx, vals, dots, out):
        return None if dots[0] is None else _c.pad_cm(dots[0], *ctx)

    @staticmethod
    def vjp(ctx, vals, out, g, need):
        return (_c.pad_adjoint_cm(g, ctx[0], ctx[1]),)

    @staticmethod
    def vjp_dot(ctx, vals, dots, out, g, gdot, need):
        return (None if gdot is None else _c.pad_adjoint_cm(gdot, *ctx),)


class _Crop:
    """Remove pads from the spatial axes; adjoint embeds with zeros."""

    name = "crop"

    @staticmethod
    def forward(ctx, x):
        return _c.pad_adjoint_cm(x, ctx, "zero")

    @staticmethod
    def jvp(ctx, vals, dots, out):
        return None if dots[0] is None else _c.pad_adjoint_cm(dots[0], ctx,
                                                              "zero")

    @staticmethod
    def vjp(ctx, vals, out, g, need):
        return (_c.pad_cm(g, ctx, "zero"),)

    @staticmethod
    def vjp_dot(ctx, vals, dots, out, g, gdot, need):
        return (None if gdot is None else _c.pad_cm(gdot, ctx, "zero"),)


class _LinOp:
    """Fixed measurement operator application; ctx = (op, which)."""

    name = "linop"

    @staticmethod
    def _apply(ctx, v):
        op, which = ctx
        return op.apply_cm(v, which)

    @staticmethod
    def _pair(ctx, v):
        op, which = ctx
        paired = {"forward": "adjoint", "adjoint": "forward",
                  "init": "init_adjoint"}[which]
        return op.apply_cm(v, paired)

    @staticmethod
    def forward(ctx, x):
        return _LinOp._apply(ctx, x)

    @staticmethod
    def jvp(ctx, vals, dots, out):
        return None if dots[0] is None else _LinOp._apply(ctx, dots[0])

    @staticmethod
    def vjp(ctx, vals, out, g, need):
        return (_LinOp._pair(ctx, g),)

    @staticmethod
    def vjp_dot(ctx, vals, dots, out, g, gdot, need):
        return (None if gdot is None else _LinOp._pair(ctx, gdot),)


class _Prox:
    """y = (Id + (T/S) A^T A)^{-1} r, differentiable in r and T.

    ctx = (op, S). Derivatives use the implicit function theorem on the
    linear solve, so they are exact up to the solver tolerance.
    """

    name = "prox"

    @staticmethod
    def forward(ctx, r, T):
        op, S = ctx
        return op.prox_cm(r, float(T) / S)

    @staticmethod
    def jvp(ctx, vals, dots, out):
        op, S = ctx
        r, T = vals
        dr, dT = dots
        rhs = dr
        if dT is not None:
            ata = op.apply_cm(op.apply_cm(out, "forward"), "adjoint")
            rhs = _addn(rhs, -(float(dT) / S) * ata)
        if rhs is None:
            return None
        return op.prox_cm(rhs, float(T) / S)

    @staticmethod
    def vjp(ctx, vals, out, g, need):
        op, S = ctx
        r, T = vals
        gr = op.prox_cm(g, float(T) / S)
        gT = None
        if need[1]:
            ata = op.apply_cm(op.apply_cm(out, "forward"), "adjoint")
            gT = np.asarray(-np.vdot(gr, ata) / S)
        return (gr if need[0] else None, gT)

    @staticmethod
    def vjp_dot(ctx, vals, dots, out, g, gdot, need):
        raise NotImplementedError(
            "prox appears only in first-order (outer) graphs")


OPS = {}
for _op in (_Add, _Sub, _Neg, _Mul, _Smul, _Ssum, _Vdot, _Ew, _Conv, _Blur,
            _Pad, _Crop, _LinOp, _Prox):
    OPS[_op.name] = _op


def register_op(opdef) -> None:
    """Install an externally defined primitive (e.g. regularizer calls)."""
    OPS[opdef.name] = opdef


# ---------------------------------------------------------------------------


class Tape:
    """Ordered record of primitive operations with reverse/tangent sweeps."""

    def __init__(self):
        self.records: list[Record] = []
        self.nodes: list[Node] = []
        self.leaves: list[Node] = []
        # optional designations set by graph builders
        self.input: Node | None = None
        self.output: Node | None = None

    # -- construction -------------------------------------------------

    def leaf(self, value) -> Node:
        value = np.asarray(value, dtype=np.float64)
        if not np.isfinite(value).all():
            raise NumericError("tape leaf received non-finite values")
        node = Node(self, len(self.nodes), value)
        self.nodes.append(node)
        self.leaves.append(node)
        return node

    def apply(self, opname: str, inputs: tuple, ctx=None) -> Node:
        op = OPS[opname]
        vals = tuple(_val(i) for i in inputs)
        out_val = op.forward(ctx, *vals)
        node = Node(self, len(self.nodes), out_val)
        self.nodes.append(node)
        self.records.append(Record(op, inputs, node, ctx))
        return node

    def add(self, a, b):
        return self.apply("add", (a, b))

    def sub(self, a, b):
        return self.apply("sub", (a, b))

    def neg(self, a):
        return self.apply("neg", (a,))

    def mul(self, a, b):
        return self.apply("mul", (a, b))

    def smul(self, a, c: float):
        return self.apply("smul", (a,), float(c))

    def ssum(self, a):
        return self.apply("ssum", (a,))

    def vdot(self, a, b):
        return self.apply("vdot", (a, b))

    def ew(self, a, fname: str, *params):
        return self.apply("ew", (a,), (fname, params))

    def conv(self, x, w, *, stride=1, mode="replicate", transposed=False,
             out_hw=None):
        xv = _val(x)
        wv = _val(w)
        in_hw = (xv.shape[2], xv.shape[3])
        if not transposed:
            out_hw = _c.conv_out_hw(in_hw, wv.shape[2], stride)
        elif out_hw is None:
            out_hw = (in_hw[0] * stride, in_hw[1] * stride)
        ctx = {"stride": stride, "mode": mode, "transposed": transposed,
               "in_hw": in_hw, "out_hw": out_hw}
        return self.apply("conv", (x, w), ctx)

    def blur(self, x):
        return self.apply("blur", (x,))

    def pad(self, x, pads, mode="replicate"):
        return self.apply("pad", (x,), (tuple(pads), mode))

    def crop(self, x, pads):
        return self.apply("crop", (x,), tuple(pads))

    def linop(self, z, op, which: str):
        return self.apply("linop", (z,), (op, which))

    def prox(self, r, T, op, S: int):
        return self.apply("prox", (r, T), (op, S))

    # -- sweeps ---------------------------------------------------------

    def _dependent(self, want_idx: set[int]) -> np.ndarray:
        dep = np.zeros(len(self.nodes), dtype=bool)
        for i in want_idx:
            dep[i] = True
        for rec in self.records:
            if any(isinstance(i, Node) and dep[i.idx] for i in rec.inputs):
                dep[rec.out.idx] = True
        return dep

    def backward(self, out: Node, seed=1.0, want=None, keep=False):
        """Cotangents of `out` with respect to `want` (default: all leaves).

        Returns a dict {Node: grad}; with keep=True returns (grads, cache)
        where cache maps node index -> cotangent for reuse by dual_backward.
        """
        if want is None:
            want = self.leaves
        want = list(want)
        dep = self._dependent({n.idx for n in want})
        cot: dict[int, np.ndarray] = {
            out.idx: np.broadcast_to(np.asarray(seed, dtype=np.float64),
                                     out.value.shape)}
        for rec in reversed(self.records):
            g = cot.get(rec.out.idx)
            if g is None:
                continue
            need = tuple(isinstance(i, Node) and dep[i.idx]
                         for i in rec.inputs)
            if not any(need):
                continue
            vals = tuple(_val(i) for i in rec.inputs)
            gs = rec.op.vjp(rec.ctx, vals, rec.out.value, g, need)
            for inp, gi in zip(rec.inputs, gs):
                if gi is not None:
                    _acc(cot, inp.idx, gi)
        grads = {n: cot.get(n.idx, np.zeros_like(n.value)) for n in want}
        if keep:
            return grads, cot
        return grads

    def clear_dots(self):
        for n in self.nodes:
            n.dot = None

    def forward_dots(self, seeds: dict) -> None:
        """Propagate tangents through the record; seeds keyed by Node."""
        self.clear_dots()
        for node, d in seeds.items():
            node.dot = np.asarray(d, dtype=np.float64)
        for rec in self.records:
            dots = tuple(_dot(i) for i in rec.inputs)
            if all(d is None for d in dots):
                rec.out.dot = None
                continue
            vals = tuple(_val(i) for i in rec.inputs)
            rec.out.dot = rec.op.jvp(rec.ctx, vals, dots, rec.out.value)

    def dual_backward(self, out: Node, cot: dict, want, seed_dot=0.0):
        """Tangents of the cotangents (second reverse sweep).

        Requires forward_dots to have run, and `cot` from backward(keep=True)
        issued with a superset of `want`. Returns {Node: cotangent_dot}.
        """
        want = list(want)
        dep = self._dependent({n.idx for n in want})
        cotdot: dict[int, np.ndarray] = {}
        if seed_dot is not None:
            cotdot[out.idx] = np.broadcast_to(
                np.asarray(seed_dot, dtype=np.float64), out.value.shape)
        for rec in reversed(self.records):
            g = cot.get(rec.out.idx)
            if g is None:
                continue
            gdot = cotdot.get(rec.out.idx)
            dots = tuple(_dot(i) for i in rec.inputs)
            if gdot is None and all(d is None for d in dots):
                continue
            need = tuple(isinstance(i, Node) and dep[i.idx]
                         for i in rec.inputs)
            if not any(need):
                continue
            vals = tuple(_val(i) for i in rec.inputs)
            ds = rec.op.vjp_dot(rec.ctx, vals, dots, rec.out.value, g, gdot,
                                need)
            for inp, di in zip(rec.inputs, ds):
                if di is not None:
                    _acc(cotdot, inp.idx, di)
        return {n: cotdot.get(n.idx, np.zeros_like(n.value)) for n in want}

    def hvp(self, out: Node, leaf: Node, direction: np.ndarray) -> np.ndarray:
        """Hessian-vector product of scalar `out` at `leaf` along `direction`.

        Runs reverse for the gradient, a tangent sweep seeded with the
        direction, then the dual reverse sweep (forward-over-reverse).
        """
        _, cache = self.backward(out, want=[leaf], keep=True)
        self.forward_dots({leaf: direction})
        dots = self.dual_backward(out, cache, want=[leaf])
        return dots[leaf]

    def replay(self) -> None:
        """Recompute every recorded value from the current leaf values."""
        for rec in self.records:
            vals = tuple(_val(i) for i in rec.inputs)
            rec.out.value = rec.op.forward(rec.ctx, *vals)


def hvp(tape: Tape, direction: np.ndarray) -> np.ndarray:
    """Module-level convenience for tapes with designated input/output."""
    if tape.input is None or tape.output is None:
        raise NumericError("tape has no designated input/output")
    return tape.hvp(tape.output, tape.input, direction)
