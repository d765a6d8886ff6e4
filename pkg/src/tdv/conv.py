"""2-D convolutions with exact adjoints.

Everything here works on channel-major activations shaped (C, N, H, W); the
batch axis N is mandatory inside the engine and added/stripped at public
boundaries. Kernels are (out_c, in_c, kh, kw) with odd kh == kw, "same"
padding of (kh-1)//2 per side, and stride 1 or 2.

The adjoint routines are built from the transpose of each forward stage
(pad -> gather windows -> weight contraction), so <conv(x), y> == <x,
conv_adjoint(y)> holds to floating-point rounding, not just approximately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

PAD_MODES = ("replicate", "zero")


def pad_cm(x: np.ndarray, pads: tuple[int, int, int, int],
           mode: str) -> np.ndarray:
    """Pad spatial axes of (C, N, H, W) by (top, bottom, left, right)."""
    pt, pb, pl, pr = pads
    if pt == pb == pl == pr == 0:
        return x
    C, N, H, W = x.shape
    out = np.zeros((C, N, H + pt + pb, W + pl + pr)) if mode == "zero" \
        else np.empty((C, N, H + pt + pb, W + pl + pr))
    out[:, :, pt:pt + H, pl:pl + W] = x
    if mode == "replicate":
        for i in range(pt):
            out[:, :, i, pl:pl + W] = x[:, :, 0, :]
        for i in range(pb):
            out[:, :, pt + H + i, pl:pl + W] = x[:, :, H - 1, :]
        for j in range(pl):
            out[:, :, :, j] = out[:, :, :, pl]
        for j in range(pr):
            out[:, :, :, pl + W + j] = out[:, :, :, pl + W - 1]
    elif mode != "zero":
        raise ConfigError(f"unknown padding mode {mode!r}")
    return out


def pad_adjoint_cm(g: np.ndarray, pads: tuple[int, int, int, int],
                   mode: str) -> np.ndarray:
    """Exact adjoint of pad_cm: fold replicated strips back, or crop."""
    pt, pb, pl, pr = pads
    if pt == pb == pl == pr == 0:
        return g
    C, N, Hp, Wp = g.shape
    H, W = Hp - pt - pb, Wp - pl - pr
    if mode == "zero":
        return g[:, :, pt:pt + H, pl:pl + W]
    buf = g.copy()
    for j in range(pl):
        buf[:, :, :, pl] += buf[:, :, :, j]
    for j in range(pr):
        buf[:, :, :, pl + W - 1] += buf[:, :, :, pl + W + j]
    for i in range(pt):
        buf[:, :, pt, pl:pl + W] += buf[:, :, i, pl:pl + W]
    for i in range(pb):
        buf[:, :, pt + H - 1, pl:pl + W] += buf[:, :, pt + H + i, pl:pl + W]
    return buf[:, :, pt:pt + H, pl:pl + W].copy()


def _out_extent(n: int, k: int, stride: int) -> int:
    pad = (k - 1) // 2
    return (n + 2 * pad - k) // stride + 1


def conv_out_hw(in_hw: tuple[int, int], k: int,
                stride: int) -> tuple[int, int]:
    return _out_extent(in_hw[0], k, stride), _out_extent(in_hw[1], k, stride)


def _cols(xp: np.ndarray, kh: int, kw: int, stride: int,
          out_hw: tuple[int, int]) -> np.ndarray:
    """im2col on a padded (C, N, Hp, Wp) buffer -> (C*kh*kw, N*Ho*Wo)."""
    C, N, _, _ = xp.shape
    Ho, Wo = out_hw
    cols = np.empty((C, kh, kw, N, Ho, Wo))
    for di in range(kh):
        for dj in range(kw):
            cols[:, di, dj] = xp[:, :,
                                 di:di + (Ho - 1) * stride + 1:stride,
                                 dj:dj + (Wo - 1) * stride + 1:stride]
    return cols.reshape(C * kh * kw, N * Ho * Wo)


def conv_forward_cm(x: np.ndarray, weights: np.ndarray, stride: int,
                    mode: str) -> np.ndarray:
    """Correlate (C, N, H, W) with (m, C, kh, kw) -> (m, N, Ho, Wo)."""
    m, C, kh, kw = weights.shape
    if x.shape[0] != C:
        raise ConfigError(
            f"input has {x.shape[0]} channels, kernel expects {C}")
    N = x.shape[1]
    if kh == 1 and kw == 1 and stride == 1:
        out = weights.reshape(m, C) @ x.reshape(C, -1)
        return out.reshape(m, N, x.shape[2], x.shape[3])
    pad = (kh - 1) // 2
    out_hw = conv_out_hw((x.shape[2], x.shape[3]), kh, stride)
    xp = pad_cm(x, (pad, pad, pad, pad), mode)
    cols = _cols(xp, kh, kw, stride, out_hw)
    out = weights.reshape(m, C * kh * kw) @ cols
    return out.reshape(m, N, *out_hw)


def conv_adjoint_cm(g: np.ndarray, weights: np.ndarray, stride: int,
                    mode: str, in_hw: tuple[int, int]) -> np.ndarray:
    """Exact transpose of conv_forward_cm, back onto an (in_hw) grid."""
    m, C, kh, kw = weights.shape
    if g.shape[0] != m:
        raise ConfigError(
            f"cotangent has {g.shape[0]} channels, kernel produces {m}")
    N = g.shape[1]
    H, W = in_hw
    if kh == 1 and kw == 1 and stride == 1:
        out = weights.reshape(m, C).T @ g.reshape(m, -1)
        return out.reshape(C, N, H, W)
    pad = (kh - 1) // 2
    Ho, Wo = g.shape[2], g.shape[3]
    gcols = (weights.reshape(m, C * kh * kw).T @ g.reshape(m, -1))
    gcols = gcols.reshape(C, kh, kw, N, Ho, Wo)
    xp = np.zeros((C, N, H + 2 * pad, W + 2 * pad))
    for di in range(kh):
        for dj in range(kw):
            xp[:, :,
               di:di + (Ho - 1) * stride + 1:stride,
               dj:dj + (Wo - 1) * stride + 1:stride] += gcols[:, di, dj]
    return pad_adjoint_cm(xp, (pad, pad, pad, pad), mode)


def conv_adjoint_sum_cm(pairs, stride: int, mode: str,
                        in_hw: tuple[int, int]) -> np.ndarray:
    """Sum of adjoints over (g, weights) pairs sharing one scatter pass.

    All pairs must share the output grid; used by second-order sweeps where
    the product rule needs adj(g1,w1) + adj(g2,w2) on the same geometry.
    """
    g0, w0 = pairs[0]
    m, C, kh, kw = w0.shape
    N = g0.shape[1]
    H, W = in_hw
    if kh == 1 and kw == 1 and stride == 1:
        acc = sum(w.reshape(-1, C).T @ g.reshape(g.shape[0], -1)
                  for g, w in pairs)
        return acc.reshape(C, N, H, W)
    pad = (kh - 1) // 2
    Ho, Wo = g0.shape[2], g0.shape[3]
    gcols = sum(w.reshape(-1, C * kh * kw).T @ g.reshape(g.shape[0], -1)
                for g, w in pairs)
    gcols = gcols.reshape(C, kh, kw, N, Ho, Wo)
    xp = np.zeros((C, N, H + 2 * pad, W + 2 * pad))
    for di in range(kh):
        for dj in range(kw):
            xp[:, :,
               di:di + (Ho - 1) * stride + 1:stride,
               dj:dj + (Wo - 1) * stride + 1:stride] += gcols[:, di, dj]
    return pad_adjoint_cm(xp, (pad, pad, pad, pad), mode)


def conv_kernel_grad_cm(x: np.ndarray, g: np.ndarray, stride: int, mode: str,
                        kh: int, kw: int) -> np.ndarray:
    """Gradient of <conv(x, w), g> with respect to w -> (m, C, kh, kw)."""
    C, N = x.shape[0], x.shape[1]
    m = g.shape[0]
    if kh == 1 and kw == 1 and stride == 1:
        out = g.reshape(m, -1) @ x.reshape(C, -1).T
        return out.reshape(m, C, 1, 1)
    pad = (kh - 1) // 2
    out_hw = (g.shape[2], g.shape[3])
    xp = pad_cm(x, (pad, pad, pad, pad), mode)
    cols = _cols(xp, kh, kw, stride, out_hw)
    out = g.reshape(m, -1) @ cols.T
    return out.reshape(m, C, kh, kw)


# Fixed 3x3 binomial blur used by all resampling stages. Applied per channel
# with replicate padding; rows and columns both sum to one, so the operator
# norm never exceeds 1 and constants are preserved in the interior.
BLUR_TAPS = np.array([[1., 2., 1.], [2., 4., 2.], [1., 2., 1.]]) / 16.0


def blur_cm(x: np.ndarray) -> np.ndarray:
    """Depthwise 3x3 binomial blur of (C, N, H, W), replicate boundary."""
    C, N, H, W = x.shape
    xp = pad_cm(x, (1, 1, 1, 1), "replicate")
    out = np.zeros((C, N, H, W))
    for di in range(3):
        for dj in range(3):
            out += BLUR_TAPS[di, dj] * xp[:, :, di:di + H, dj:dj + W]
    return out


def blur_adjoint_cm(g: np.ndarray) -> np.ndarray:
    """Exact adjoint of blur_cm."""
    C, N, H, W = g.shape
    xp = np.zeros((C, N, H + 2, W + 2))
    for di in range(3):
        for dj in range(3):
            xp[:, :, di:di + H, dj:dj + W] += BLUR_TAPS[di, dj] * g
    return pad_adjoint_cm(xp, (1, 1, 1, 1), "replicate")


def project_zero_mean(weights: np.ndarray) -> np.ndarray:
    """Project kernel taps so each output channel sums to zero exactly.

    Exactly-rounded sums (math.fsum) drive both the mean subtraction and a
    residual fold into the smallest tap, so the per-channel sum lands below
    half an ulp of every tap. At that point a repeat projection changes no
    bits: the projection is idempotent, not just approximately so.
    """
    w = np.array(weights, dtype=np.float64)
    flat = w.reshape(w.shape[0], -1)
    taps = flat.shape[1]
    for row in flat:
        mean = math.fsum(row) / taps
        row -= mean
        for _ in range(60):
            resid = math.fsum(row)
            if resid == 0.0:
                break
            i = int(np.argmin(np.abs(row)))
            folded = row[i] - resid
            if folded == row[i]:
                break
            row[i] = folded
    return w


@dataclass
class ConvKernel:
    """Learnable convolution: weights (out_c, in_c, kh, kw) plus geometry.

    `transposed` kernels apply the exact adjoint of the forward convolution
    their weights define, mapping out_c-channel input back to in_c channels.
    `zero_mean` marks kernels constrained to zero tap sum per output channel;
    call project() after every parameter update to stay on the constraint set.
    """

    weights: np.ndarray
    stride: int = 1
    padding: str = "replicate"
    transposed: bool = False
    zero_mean: bool = False

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 4:
            raise ConfigError("kernel weights must be 4-D")
        kh, kw = self.weights.shape[2:]
        if kh != kw or kh % 2 == 0:
            raise ConfigError(f"kernel window must be square odd, got {kh}x{kw}")
        if self.stride not in (1, 2):
            raise ConfigError(f"unsupported stride {self.stride}")
        if self.padding not in PAD_MODES:
            raise ConfigError(f"unknown padding mode {self.padding!r}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def height(self) -> int:
        return self.weights.shape[2]

    @property
    def width(self) -> int:
        return self.weights.shape[3]

    def project(self) -> None:
        if self.zero_mean:
            self.weights = project_zero_mean(self.weights)


def conv2d(x: np.ndarray, k: ConvKernel,
           out_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Apply a kernel to NCHW (or CHW) input; public-layout convenience.

    For transposed kernels `out_hw` selects the target grid; it defaults to
    stride * input extent.
    """
    single = x.ndim == 3
    if single:
        x = x[None]
    want = k.out_channels if k.transposed else k.in_channels
    if x.shape[1] != want:
        raise ConfigError(
            f"input {tuple(x.shape)} has {x.shape[1]} channels, kernel "
            f"{tuple(k.weights.shape)} expects {want}")
    if not k.transposed and (x.shape[2] < k.height or x.shape[3] < k.width):
        raise ConfigError(
            f"input {tuple(x.shape)} smaller than kernel window "
            f"{k.height}x{k.width}")
    xcm = np.ascontiguousarray(np.moveaxis(x, 1, 0))
    if not k.transposed:
        ycm = conv_forward_cm(xcm, k.weights, k.stride, k.padding)
    else:
        if out_hw is None:
            out_hw = (x.shape[2] * k.stride, x.shape[3] * k.stride)
        ycm = conv_adjoint_cm(xcm, k.weights, k.stride, k.padding, out_hw)
    y = np.moveaxis(ycm, 0, 1)
    return y[0] if single else y
