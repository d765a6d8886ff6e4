"""Learned multiscale regularizer: energy, gradients, curvature, bounds.

The regularizer is a scalar field over images,

    R(x) = sum_i psi( w * N(K x) )_i,

where K lifts the image into feature space with a zero-mean 3x3 convolution,
N is a stack of U-shaped macro-blocks built from residual units
r(x) = x + K2 phi(K1 x) at several dyadic scales, w is a learned 1x1
collapse back to one channel, and psi is a pointwise potential. The smoothed
activation phi(v) = 0.5*log(1+v^2) has derivative v/(1+v^2), so |phi'| <= 1/2
everywhere, which drives the certified gradient bound below.

Zero tap sums in K make R invariant to constant intensity shifts.

Gradients and Hessian-vector products run over the autodiff tape; this module
also registers "tdv_grad" / "tdv_energy" as primitives so outer graphs
(unrolled flows, attack and bound objectives) can differentiate through them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as _t
from .autodiff import Tape, Node, register_op
from .conv import ConvKernel, conv_out_hw, blur_cm, blur_adjoint_cm, \
    conv_forward_cm, conv_adjoint_cm, pad_cm, pad_adjoint_cm
from .errors import ConfigError, FormatError, NumericError

POTENTIALS = ("identity", "log_student_t", "ln_cosh")

# sup |psi'| per potential, used by the certified bound
_C_PSI = {"identity": 1.0, "log_student_t": 0.5, "ln_cosh": 1.0}

# sup |phi'| of the residual-unit activation
C_PHI = 0.5


@dataclass(frozen=True)
class TdvArch:
    """Architecture descriptor: `blocks` macro-blocks over `scales` scales."""

    scales: int = 3
    blocks: int = 3
    features: int = 32
    channels: int = 1
    potential: str = "identity"
    padding: str = "replicate"

    def __post_init__(self):
        if self.scales < 1 or self.blocks < 1 or self.features < 1:
            raise ConfigError("scales, blocks, features must be >= 1")
        if self.channels not in (1, 3):
            raise ConfigError(f"unsupported channel count {self.channels}")
        if self.potential not in POTENTIALS:
            raise ConfigError(f"unknown potential {self.potential!r}")
        if self.padding not in ("replicate", "zero"):
            raise ConfigError(f"unknown padding {self.padding!r}")

    def admissible(self, h: int, w: int) -> bool:
        """Extents that survive `scales-1` halvings with >= 1 px left."""
        floor = 2 ** (self.scales - 1)
        return h >= floor and w >= floor

    def strict_admissible(self, h: int, w: int) -> bool:
        """Stricter rule: the coarsest grid still covers a 3x3 window."""
        floor = 3 * 2 ** (self.scales - 1)
        return h >= floor and w >= floor


@dataclass
class ResidualPair:
    """The two m->m kernels of one residual unit x + K2 phi(K1 x)."""

    k1: ConvKernel
    k2: ConvKernel


@dataclass
class MacroBlockParams:
    """Kernels of one macro-block.

    res_down[j] is the residual unit entered on the contracting leg at scale
    j+1 (j = 0..scales-1); res_up[j] the one on the expanding leg at scale
    j+1 (j = 0..scales-2): 2*scales - 1 residual units per block. down[j] and
    up[j] are the learned stride-2 resampling kernels between scales j+1 and
    j+2.
    """

    res_down: list[ResidualPair]
    res_up: list[ResidualPair]
    down: list[ConvKernel]
    up: list[ConvKernel]


@dataclass
class TdvParams:
    arch: TdvArch
    K: ConvKernel
    w: ConvKernel
    blocks: list[MacroBlockParams] = field(default_factory=list)

    def named_kernels(self) -> list[tuple[str, ConvKernel]]:
        """Stable (name, kernel) ordering used for checkpoints and theta."""
        out = [("K", self.K)]
        for i, blk in enumerate(self.blocks):
            for j, pair in enumerate(blk.res_down):
                out.append((f"b{i}.rd{j}.k1", pair.k1))
                out.append((f"b{i}.rd{j}.k2", pair.k2))
            for j, pair in enumerate(blk.res_up):
                out.append((f"b{i}.ru{j}.k1", pair.k1))
                out.append((f"b{i}.ru{j}.k2", pair.k2))
            for j, k in enumerate(blk.down):
                out.append((f"b{i}.down{j}", k))
            for j, k in enumerate(blk.up):
                out.append((f"b{i}.up{j}", k))
        out.append(("w", self.w))
        return out

    @property
    def num_parameters(self) -> int:
        return sum(k.weights.size for _, k in self.named_kernels())

    def theta_vector(self) -> np.ndarray:
        return np.concatenate(
            [k.weights.ravel() for _, k in self.named_kernels()])

    def set_theta_vector(self, vec: np.ndarray) -> None:
        pos = 0
        for _, k in self.named_kernels():
            n = k.weights.size
            k.weights = vec[pos:pos + n].reshape(k.weights.shape).copy()
            pos += n
        if pos != vec.size:
            raise ConfigError("theta vector length mismatch")

    def project(self) -> None:
        """Return to the constraint set (zero-mean K)."""
        self.K.project()

    def copy(self) -> "TdvParams":
        clone = init_params(self.arch, np.random.default_rng(0))
        clone.set_theta_vector(self.theta_vector())
        return clone


def parameter_count(arch: TdvArch) -> int:
    """Closed-form count of learnable scalars."""
    m, C, a, b = arch.features, arch.channels, arch.scales, arch.blocks
    lift = m * C * 9
    collapse = m
    residual = b * (2 * a - 1) * 2 * m * m * 9
    resample = b * 2 * (a - 1) * m * m * 9
    return lift + collapse + residual + resample


def init_params(arch: TdvArch, rng: np.random.Generator) -> TdvParams:
    """Gaussian initialization, std 1/sqrt(fan_in); K projected zero-mean."""
    m, C = arch.features, arch.channels

    def gauss(out_c, in_c, k):
        std = 1.0 / np.sqrt(in_c * k * k)
        return rng.standard_normal((out_c, in_c, k, k)) * std

    K = ConvKernel(gauss(m, C, 3), padding=arch.padding, zero_mean=True)
    K.project()
    w = ConvKernel(gauss(1, m, 1), padding=arch.padding)
    blocks = []
    for _ in range(arch.blocks):
        res_down = [ResidualPair(ConvKernel(gauss(m, m, 3),
                                            padding=arch.padding),
                                 ConvKernel(gauss(m, m, 3),
                                            padding=arch.padding))
                    for _ in range(arch.scales)]
        res_up = [ResidualPair(ConvKernel(gauss(m, m, 3),
                                          padding=arch.padding),
                               ConvKernel(gauss(m, m, 3),
                                          padding=arch.padding))
                  for _ in range(arch.scales - 1)]
        down = [ConvKernel(gauss(m, m, 3), stride=2, padding=arch.padding)
                for _ in range(arch.scales - 1)]
        up = [ConvKernel(gauss(m, m, 3), stride=2, padding=arch.padding,
                         transposed=True)
              for _ in range(arch.scales - 1)]
        blocks.append(MacroBlockParams(res_down, res_up, down, up))
    return TdvParams(arch, K, w, blocks)


# ---------------------------------------------------------------------------
# graph construction


def _residual_unit(tape: Tape, x, k1, k2, mode: str):
    t = tape.conv(x, k1, mode=mode)
    t = tape.ew(t, "phi")
    t = tape.conv(t, k2, mode=mode)
    return tape.add(x, t)


def _macro_block(tape: Tape, h, carries: dict, kget, i: int, arch: TdvArch):
    """One U-shaped macro-block; returns (output, new carries)."""
    a, mode = arch.scales, arch.padding
    d = {}
    odd = {}
    cur = h
    for j in range(1, a + 1):
        if j > 1:
            hw = (cur.value.shape[2], cur.value.shape[3])
            pads = (0, hw[0] % 2, 0, hw[1] % 2)
            odd[j - 1] = pads
            if pads[1] or pads[3]:
                cur = tape.pad(cur, pads, "replicate")
            cur = tape.blur(cur)
            cur = tape.conv(cur, kget(f"b{i}.down{j - 2}"), stride=2,
                            mode=mode)
            if carries.get(j) is not None:
                cur = tape.add(cur, carries[j])
        cur = _residual_unit(tape, cur, kget(f"b{i}.rd{j - 1}.k1"),
                             kget(f"b{i}.rd{j - 1}.k2"), mode)
        d[j] = cur
    u = {a: d[a]}
    for j in range(a - 1, 0, -1):
        coarse = u[j + 1]
        pads = odd[j]
        fine_hw = (d[j].value.shape[2] + pads[1], d[j].value.shape[3] + pads[3])
        t = tape.conv(coarse, kget(f"b{i}.up{j - 1}"), stride=2, mode=mode,
                      transposed=True, out_hw=fine_hw)
        t = tape.blur(t)
        if pads[1] or pads[3]:
            t = tape.crop(t, pads)
        u[j] = _residual_unit(tape, tape.add(d[j], t),
                              kget(f"b{i}.ru{j - 1}.k1"),
                              kget(f"b{i}.ru{j - 1}.k2"), mode)
    new_carries = {j: u[j] for j in range(2, a + 1)}
    return u[1], new_carries


def field_graph(tape: Tape, x, kget, arch: TdvArch):
    """Record the pointwise energy field psi(w N(K x)); node is (1,N,H,W)."""
    h = tape.conv(x, kget("K"), mode=arch.padding)
    carries = {j: None for j in range(2, arch.scales + 1)}
    for i in range(arch.blocks):
        h, carries = _macro_block(tape, h, carries, kget, i, arch)
    v = tape.conv(h, kget("w"), mode=arch.padding)
    if arch.potential == "identity":
        return v
    if arch.potential == "log_student_t":
        return tape.ew(v, "phi")
    return tape.ew(v, "ln_cosh")


def energy_graph(tape: Tape, x, kget, arch: TdvArch):
    """Record R(x) on the tape; returns the scalar energy node."""
    return tape.ssum(field_graph(tape, x, kget, arch))


def _check_extents(arch: TdvArch, h: int, w: int) -> None:
    if not arch.admissible(h, w):
        raise ConfigError(
            f"{h}x{w} input cannot pass {arch.scales} scales "
            f"(needs >= {2 ** (arch.scales - 1)} per side)")


def _to_cm(x: np.ndarray) -> tuple[np.ndarray, bool]:
    """Public NCHW (or CHW) -> engine (C, N, H, W)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ConfigError("expected CHW or NCHW input")
    return np.ascontiguousarray(np.moveaxis(x, 1, 0)), single


def _from_cm(x: np.ndarray, single: bool) -> np.ndarray:
    out = np.moveaxis(x, 0, 1)
    return out[0] if single else np.ascontiguousarray(out)


def energy_tape(x_cm: np.ndarray, params: TdvParams,
                theta_values: list[np.ndarray] | None = None):
    """Build a fresh tape computing R at x_cm (channel-major).

    With `theta_values` (ordered like named_kernels) the kernels become tape
    leaves at those values and the returned theta_nodes list is populated;
    otherwise kernels enter as constants and theta_nodes is None.
    """
    arch = params.arch
    _check_extents(arch, x_cm.shape[2], x_cm.shape[3])
    if x_cm.shape[0] != arch.channels:
        raise ConfigError(
            f"input has {x_cm.shape[0]} channels, arch wants {arch.channels}")
    tape = Tape()
    xn = tape.leaf(x_cm)
    names = [n for n, _ in params.named_kernels()]
    if theta_values is not None:
        nodes = {name: tape.leaf(v) for name, v in zip(names, theta_values)}
        theta_nodes = [nodes[n] for n in names]
        kget = nodes.__getitem__
    else:
        theta_nodes = None
        weights = {name: k.weights for name, k in params.named_kernels()}
        kget = weights.__getitem__
    out = energy_graph(tape, xn, kget, arch)
    tape.input, tape.output = xn, out
    return tape, xn, theta_nodes, out


def tdv_energy(x: np.ndarray, params: TdvParams) -> float:
    """R(x); for batched input the sum over the whole batch."""
    x_cm, _ = _to_cm(x)
    _, _, _, out = energy_tape(x_cm, params)
    val = float(out.value)
    if not np.isfinite(val):
        raise NumericError("regularizer energy is non-finite")
    return val


def tdv_energy_batch(x: np.ndarray, params: TdvParams) -> np.ndarray:
    """Per-sample energies R(x_i) for an NCHW batch; returns shape (N,)."""
    x_cm, _ = _to_cm(x)
    arch = params.arch
    _check_extents(arch, x_cm.shape[2], x_cm.shape[3])
    tape = Tape()
    xn = tape.leaf(x_cm)
    weights = {name: k.weights for name, k in params.named_kernels()}
    r = field_graph(tape, xn, weights.__getitem__, arch)
    return r.value.sum(axis=(0, 2, 3))


def tdv_grad(x: np.ndarray, params: TdvParams) -> np.ndarray:
    """Gradient of R with respect to the image, same shape as x."""
    x_cm, single = _to_cm(x)
    tape, xn, _, out = energy_tape(x_cm, params)
    g = tape.backward(out, want=[xn])[xn]
    return _from_cm(g, single)


def tdv_hvp(x: np.ndarray, params: TdvParams, v: np.ndarray) -> np.ndarray:
    """Hessian-vector product D^2 R(x) v (image Hessian only)."""
    x_cm, single = _to_cm(x)
    v_cm, _ = _to_cm(np.asarray(v, dtype=np.float64))
    tape, xn, _, out = energy_tape(x_cm, params)
    hv = tape.hvp(out, xn, v_cm)
    return _from_cm(hv, single)


# ---------------------------------------------------------------------------
# registered primitives for outer graphs


class _TdvGradOp:
    """Outer primitive: value is grad_x R; vjp gives exact second-order
    pullbacks (Hessian and mixed image/parameter terms) via a tangent sweep
    over the cached inner tape. First-order outer graphs only."""

    name = "tdv_grad"

    @staticmethod
    def forward(ctx, x, *thetas):
        params: TdvParams = ctx["params"]
        tape, xn, theta_nodes, out = energy_tape(x, params,
                                                 theta_values=list(thetas))
        grads, cache = tape.backward(out, want=[xn], keep=True)
        ctx["inner"] = (tape, xn, theta_nodes, out, cache)
        return grads[xn]

    @staticmethod
    def jvp(ctx, vals, dots, out):
        raise NotImplementedError("tdv_grad is first-order in outer graphs")

    @staticmethod
    def vjp(ctx, vals, out, g, need):
        if ctx.get("inner") is None:  # released by an earlier sweep
            _TdvGradOp.forward(ctx, *vals)
        tape, xn, theta_nodes, out_node, cache = ctx["inner"]
        want = []
        if need[0]:
            want.append(xn)
        want += [tn for tn, nd in zip(theta_nodes, need[1:]) if nd]
        tape.forward_dots({xn: g})
        dots = tape.dual_backward(out_node, cache, want=want)
        res = [dots[xn] if need[0] else None]
        res += [dots[tn] if nd else None
                for tn, nd in zip(theta_nodes, need[1:])]
        ctx["inner"] = None  # release activation memory
        return tuple(res)

    @staticmethod
    def vjp_dot(ctx, vals, dots, out, g, gdot, need):
        raise NotImplementedError("tdv_grad is first-order in outer graphs")


class _TdvEnergyOp:
    """Outer primitive: scalar R(x); vjp is the plain gradient."""

    name = "tdv_energy"

    @staticmethod
    def forward(ctx, x, *thetas):
        params: TdvParams = ctx["params"]
        tape, xn, theta_nodes, out = energy_tape(x, params,
                                                 theta_values=list(thetas))
        ctx["inner"] = (tape, xn, theta_nodes, out)
        return np.asarray(out.value)

    @staticmethod
    def jvp(ctx, vals, dots, out):
        raise NotImplementedError("tdv_energy is first-order in outer graphs")

    @staticmethod
    def vjp(ctx, vals, out, g, need):
        if ctx.get("inner") is None:
            _TdvEnergyOp.forward(ctx, *vals)
        tape, xn, theta_nodes, out_node = ctx["inner"]
        want = ([xn] if need[0] else []) + \
            [tn for tn, nd in zip(theta_nodes, need[1:]) if nd]
        grads = tape.backward(out_node, want=want)
        res = [g * grads[xn] if need[0] else None]
        res += [g * grads[tn] if nd else None
                for tn, nd in zip(theta_nodes, need[1:])]
        ctx["inner"] = None
        return tuple(res)

    @staticmethod
    def vjp_dot(ctx, vals, dots, out, g, gdot, need):
        raise NotImplementedError("tdv_energy is first-order in outer graphs")


register_op(_TdvGradOp)
register_op(_TdvEnergyOp)


def grad_node(tape: Tape, x: Node, theta_nodes: list[Node] | None,
              params: TdvParams) -> Node:
    """Record grad_x R(x) on an outer tape (channel-major node)."""
    inputs = (x, *theta_nodes) if theta_nodes is not None \
        else (x, *[k.weights for _, k in params.named_kernels()])
    return tape.apply("tdv_grad", inputs, {"params": params})


def energy_node(tape: Tape, x: Node, theta_nodes: list[Node] | None,
                params: TdvParams) -> Node:
    """Record R(x) on an outer tape."""
    inputs = (x, *theta_nodes) if theta_nodes is not None \
        else (x, *[k.weights for _, k in params.named_kernels()])
    return tape.apply("tdv_energy", inputs, {"params": params})


# ---------------------------------------------------------------------------
# certified gradient bound


def _power_opnorm(apply_fn, adjoint_fn, shape, iters=200, tol=1e-12) -> float:
    rng = np.random.default_rng(1357)
    v = rng.standard_normal(shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w_ = adjoint_fn(apply_fn(v))
        lam_new = float(np.vdot(v, w_))
        norm = np.linalg.norm(w_)
        if norm == 0.0:
            return 0.0
        v = w_ / norm
        if abs(lam_new - lam) <= tol * max(abs(lam_new), 1e-30):
            lam = lam_new
            break
        lam = lam_new
    return float(np.sqrt(max(lam, 0.0)))


def _kernel_opnorm(k: ConvKernel, in_c: int, hw: tuple[int, int]) -> float:
    shape = (in_c, 1, *hw)
    out_hw = conv_out_hw(hw, k.height, k.stride)
    return _power_opnorm(
        lambda v: conv_forward_cm(v, k.weights, k.stride, k.padding),
        lambda y: conv_adjoint_cm(y, k.weights, k.stride, k.padding, hw),
        shape)


def _resample_opnorm(k: ConvKernel, hw: tuple[int, int], up: bool) -> float:
    """Operator norm of the resampler exactly as the network applies it:
    pad-to-even, blur, strided conv going down; transposed conv, blur, crop
    coming back up. hw is the fine-scale extent before any padding."""
    m = k.weights.shape[1]
    pads = (0, hw[0] % 2, 0, hw[1] % 2)
    even = (hw[0] + hw[0] % 2, hw[1] + hw[1] % 2)
    coarse = conv_out_hw(even, 3, 2)
    if not up:
        def ap(v):
            v = pad_cm(v, pads, "replicate")
            return conv_forward_cm(blur_cm(v), k.weights, 2, k.padding)

        def adj(y):
            g = blur_adjoint_cm(
                conv_adjoint_cm(y, k.weights, 2, k.padding, even))
            return pad_adjoint_cm(g, pads, "replicate")
        return _power_opnorm(ap, adj, (m, 1, *hw))

    def ap(v):
        g = blur_cm(conv_adjoint_cm(v, k.weights, 2, k.padding, even))
        return pad_adjoint_cm(g, pads, "zero")

    def adj(y):
        y = pad_cm(y, pads, "zero")
        return conv_forward_cm(blur_adjoint_cm(y), k.weights, 2, k.padding)
    return _power_opnorm(ap, adj, (m, 1, *coarse))


def bound_CR(params: TdvParams, hw: tuple[int, int]) -> float:
    """Upper bound on sup_x ||grad_x R(x)||_2 at the given image extents.

    Composes per-layer operator norms: each residual unit contributes a
    factor 1 + 0.5*||K1|| ||K2|| (0.5 = sup |phi'|), resamplers and the
    lift/collapse convolutions their operator norms, and the potential its
    sup |psi'|. Additive skips add their Lipschitz bounds.
    """
    arch = params.arch
    _check_extents(arch, *hw)
    a = arch.scales
    # extents per scale, tracking the pad-to-even rule
    hws = {1: hw}
    for j in range(2, a + 1):
        ph, pw = hws[j - 1]
        ph, pw = ph + ph % 2, pw + pw % 2
        hws[j] = (ph // 2, pw // 2)

    nK = _kernel_opnorm(params.K, arch.channels, hw)
    nw = float(np.linalg.norm(params.w.weights))

    lip = 1.0
    carry = {j: 0.0 for j in range(2, a + 1)}
    for blk in params.blocks:
        factors_down = [
            1.0 + C_PHI * _kernel_opnorm(p.k1, arch.features, hws[j + 1])
            * _kernel_opnorm(p.k2, arch.features, hws[j + 1])
            for j, p in enumerate(blk.res_down)]
        factors_up = [
            1.0 + C_PHI * _kernel_opnorm(p.k1, arch.features, hws[j + 1])
            * _kernel_opnorm(p.k2, arch.features, hws[j + 1])
            for j, p in enumerate(blk.res_up)]
        d = {}
        cur = lip
        for j in range(1, a + 1):
            if j > 1:
                cur = cur * _resample_opnorm(blk.down[j - 2], hws[j - 1],
                                             up=False)
                cur += carry[j]
            cur *= factors_down[j - 1]
            d[j] = cur
        u = {a: d[a]}
        for j in range(a - 1, 0, -1):
            t = u[j + 1] * _resample_opnorm(blk.up[j - 1], hws[j], up=True)
            u[j] = (d[j] + t) * factors_up[j - 1]
        lip = u[1]
        carry = {j: u[j] for j in range(2, a + 1)}

    return nK * lip * nw * _C_PSI[arch.potential]


# ---------------------------------------------------------------------------
# checkpoints


_HEADER_END = b"end-header\n"


def save_checkpoint(path, params: TdvParams, T: float,
                    meta: dict | None = None) -> None:
    """Arch header (plain text) followed by named tensor records."""
    arch = params.arch
    lines = [
        "tdv-checkpoint 1",
        f"scales {arch.scales}",
        f"blocks {arch.blocks}",
        f"features {arch.features}",
        f"channels {arch.channels}",
        f"potential {arch.potential}",
        f"padding {arch.padding}",
    ]
    for key, val in (meta or {}).items():
        lines.append(f"meta.{key} {val}")
    header = "\n".join(lines) + "\n" + _HEADER_END.decode()
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        _t.write_named(f, "T", np.asarray(float(T)))
        for name, k in params.named_kernels():
            _t.write_named(f, name, k.weights)


def load_checkpoint(path) -> tuple[TdvParams, float, dict]:
    with open(path, "rb") as f:
        header = b""
        while not header.endswith(_HEADER_END):
            c = f.read(1)
            if not c:
                raise FormatError(f"{path}: missing checkpoint header")
            header += c
            if len(header) > 65536:
                raise FormatError(f"{path}: runaway header")
        fields: dict[str, str] = {}
        meta: dict[str, str] = {}
        lines = header.decode("ascii").strip().splitlines()[:-1]
        if not lines or lines[0] != "tdv-checkpoint 1":
            raise FormatError(f"{path}: bad checkpoint signature")
        for line in lines[1:]:
            key, _, val = line.partition(" ")
            if key.startswith("meta."):
                meta[key[5:]] = val
            else:
                fields[key] = val
        try:
            arch = TdvArch(scales=int(fields["scales"]),
                           blocks=int(fields["blocks"]),
                           features=int(fields["features"]),
                           channels=int(fields["channels"]),
                           potential=fields["potential"],
                           padding=fields["padding"])
        except KeyError as e:
            raise FormatError(f"{path}: header missing {e}") from e
        tensors: dict[str, np.ndarray] = {}
        while True:
            rec = _t.read_named(f)
            if rec is None:
                break
            tensors[rec[0]] = rec[1]
    if "T" not in tensors:
        raise FormatError(f"{path}: checkpoint lacks stopping time T")
    T = float(tensors.pop("T"))
    params = init_params(arch, np.random.default_rng(0))
    for name, k in params.named_kernels():
        if name not in tensors:
            raise FormatError(f"{path}: checkpoint lacks kernel {name}")
        if tensors[name].shape != k.weights.shape:
            raise FormatError(
                f"{path}: kernel {name} has shape {tensors[name].shape}, "
                f"arch implies {k.weights.shape}")
        k.weights = tensors[name]
    return params, T, meta
