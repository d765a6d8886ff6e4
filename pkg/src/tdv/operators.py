"""Measurement operators for reconstruction tasks, their adjoints, init
maps, and exact solvers for the semi-implicit system (Id + tau*A^T A) v = r.

Every operator works on channel-major batches (C, N, H, W) internally via
apply_cm / prox_cm / normal_cm, which is what the autodiff tape records; the
public forward / adjoint / init_map / prox accept CHW or NCHW and convert.
Operators are immutable after construction and hold no per-call state, so
they are safe to share across samples and tapes.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse

from .errors import ConfigError, SolverError

CG_TOL = 1e-10
CG_MAX_ITER = 500


def conjugate_gradient(matvec, rhs: np.ndarray, x0: np.ndarray | None = None,
                       tol: float = CG_TOL, max_iter: int = CG_MAX_ITER,
                       check: bool = True) -> np.ndarray:
    """Solve M v = rhs for symmetric positive definite M given as a matvec.

    Plain CG on ndarrays of any shape. Stops when ||M v - rhs|| <=
    tol * ||rhs||; raises SolverError carrying the residual if max_iter
    is exhausted first (unless check=False, used for the fixed-step
    reconstruction init where the iteration count itself is the contract).
    """
    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm == 0.0:
        return np.zeros_like(rhs)
    v = np.zeros_like(rhs) if x0 is None else x0.copy()
    r = rhs - matvec(v) if x0 is not None else rhs.copy()
    p = r.copy()
    rr = float(np.vdot(r, r))
    for it in range(max_iter):
        if np.sqrt(rr) <= tol * rhs_norm:
            return v
        mp = matvec(p)
        alpha = rr / float(np.vdot(p, mp))
        v = v + alpha * p
        r = r - alpha * mp
        rr_new = float(np.vdot(r, r))
        p = r + (rr_new / rr) * p
        rr = rr_new
    if check and np.sqrt(rr) > tol * rhs_norm:
        raise SolverError(
            f"conjugate gradient stalled at relative residual "
            f"{np.sqrt(rr) / rhs_norm:.3e} after {max_iter} iterations",
            residual=float(np.sqrt(rr) / rhs_norm), iterations=max_iter)
    return v


def power_iteration(matvec, shape, iters: int = 200, tol: float = 1e-12,
                    seed: int = 0) -> float:
    """Largest singular value of the symmetric PSD operator sqrt; pass the
    normal operator A^T A as matvec to estimate ||A||_2."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = matvec(v)
        lam_new = float(np.vdot(v, w))
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        v = w / norm
        if abs(lam_new - lam) <= tol * max(abs(lam_new), 1e-30):
            lam = lam_new
            break
        lam = lam_new
    return float(np.sqrt(max(lam, 0.0)))


def _split_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return np.ascontiguousarray(np.asarray(x, dtype=np.float64)[:, None]), True
    if x.ndim == 4:
        return np.ascontiguousarray(
            np.moveaxis(np.asarray(x, dtype=np.float64), 1, 0)), False
    raise ConfigError("expected CHW or NCHW layout")


def _join_batch(x: np.ndarray, single: bool) -> np.ndarray:
    return x[:, 0] if single else np.ascontiguousarray(np.moveaxis(x, 0, 1))


class LinearOp:
    """Fixed measurement map A with adjoint, init map, and prox solves.

    Subclasses fill in apply_cm (forward / adjoint / init / init_adjoint on
    channel-major batches) and prox_cm; the public wrappers and the shared
    normal / opnorm machinery live here.

    image_shape and data_shape are per-sample (C, H, W) layouts; data uses a
    channel axis too (real/imag for Fourier, a singleton for the rest).
    """

    kind = "abstract"

    def __init__(self, image_shape, data_shape):
        self.image_shape = tuple(image_shape)
        self.data_shape = tuple(data_shape)
        self._opnorm = None

    # channel-major engine points -------------------------------------

    def apply_cm(self, v: np.ndarray, which: str) -> np.ndarray:
        raise NotImplementedError

    def prox_cm(self, r: np.ndarray, tau: float) -> np.ndarray:
        raise NotImplementedError

    def normal_cm(self, v: np.ndarray) -> np.ndarray:
        return self.apply_cm(self.apply_cm(v, "forward"), "adjoint")

    # public layout wrappers -------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        v, single = _split_batch(x)
        self._check(v, self.image_shape, "image")
        return _join_batch(self.apply_cm(v, "forward"), single)

    def adjoint(self, z: np.ndarray) -> np.ndarray:
        v, single = _split_batch(z)
        self._check(v, self.data_shape, "data")
        return _join_batch(self.apply_cm(v, "adjoint"), single)

    def init_map(self, z: np.ndarray) -> np.ndarray:
        v, single = _split_batch(z)
        self._check(v, self.data_shape, "data")
        return _join_batch(self.apply_cm(v, "init"), single)

    def prox(self, r: np.ndarray, tau: float) -> np.ndarray:
        if tau < 0:
            raise ConfigError(f"prox needs tau >= 0, got {tau}")
        v, single = _split_batch(r)
        self._check(v, self.image_shape, "image")
        return _join_batch(self.prox_cm(v, tau), single)

    def normal(self, x: np.ndarray) -> np.ndarray:
        v, single = _split_batch(x)
        return _join_batch(self.normal_cm(v), single)

    def _check(self, v: np.ndarray, shape, label: str) -> None:
        got = (v.shape[0], *v.shape[2:])
        if got != tuple(shape):
            raise ConfigError(
                f"{self.kind}: {label} shaped {got}, expected {tuple(shape)}")

    @property
    def opnorm(self) -> float:
        """||A||_2 via power iteration on the normal operator (cached)."""
        if self._opnorm is None:
            shape = (self.image_shape[0], 1, *self.image_shape[1:])
            self._opnorm = power_iteration(self.normal_cm, shape, seed=11)
        return self._opnorm

    @property
    def init_opnorm(self) -> float:
        """||A_init||_2 via power iteration on A_init A_init^T."""
        def nm(z):
            return self.apply_cm(self.apply_cm(z, "init"), "init_adjoint")
        shape = (self.data_shape[0], 1, *self.data_shape[1:])
        return power_iteration(nm, shape, seed=12)


class IdentityOp(LinearOp):
    """A = Id: denoising. Prox is the scalar closed form r / (1 + tau)."""

    kind = "identity"

    def __init__(self, channels: int, height: int, width: int):
        shape = (channels, height, width)
        super().__init__(shape, shape)
        self._opnorm = 1.0

    def apply_cm(self, v, which):
        if which not in ("forward", "adjoint", "init", "init_adjoint"):
            raise ConfigError(f"unknown apply mode {which!r}")
        return v

    def prox_cm(self, r, tau):
        return r / (1.0 + tau)

    def inv_norm(self, tau: float) -> float:
        # ||(Id + tau A^T A)^{-1}|| exactly
        return 1.0 / (1.0 + tau)


def _keys_cubic(t: np.ndarray) -> np.ndarray:
    """Keys bicubic profile with a = -0.5, support (-2, 2)."""
    at = np.abs(t)
    out = np.zeros_like(at)
    near = at <= 1.0
    far = (at > 1.0) & (at < 2.0)
    out[near] = 1.5 * at[near] ** 3 - 2.5 * at[near] ** 2 + 1.0
    out[far] = -0.5 * at[far] ** 3 + 2.5 * at[far] ** 2 - 4.0 * at[far] + 2.0
    return out


def _resample_matrix(n: int, gamma: int, boundary: str) -> np.ndarray:
    """Dense (n/gamma, n) one-axis bicubic downsampling matrix.

    Output sample i averages input around position (i + 0.5)*gamma - 0.5
    with the antialiased kernel k(t) = cubic(t / gamma) / gamma. Replicate
    boundaries clamp indices, periodic boundaries wrap; every row is
    renormalized to unit sum so constants survive exactly.
    """
    nc = n // gamma
    rows = np.zeros((nc, n))
    half = 2 * gamma  # kernel support in input samples
    for i in range(nc):
        center = (i + 0.5) * gamma - 0.5
        lo = int(np.floor(center)) - half + 1
        idx = np.arange(lo, lo + 2 * half)
        taps = _keys_cubic((idx - center) / gamma) / gamma
        if boundary == "replicate":
            np.add.at(rows[i], np.clip(idx, 0, n - 1), taps)
        else:
            np.add.at(rows[i], idx % n, taps)
    rows /= rows.sum(axis=1, keepdims=True)
    return rows


class DownsampleOp(LinearOp):
    """Bicubic antialiased downsampling by an integer factor (SISR).

    Separable: rows and columns each go through the one-axis matrix. The
    adjoint is the exact transpose, i.e. bicubic upsampling, and the init
    map is gamma * adjoint. With periodic boundaries the prox has a closed
    form in Fourier space; replicate boundaries solve by CG.
    """

    kind = "downsample"

    def __init__(self, gamma: int, channels: int, height: int, width: int,
                 boundary: str = "replicate"):
        if gamma not in (2, 3, 4):
            raise ConfigError(f"downsample factor must be 2, 3, or 4, "
                              f"got {gamma}")
        if height % gamma or width % gamma:
            raise ConfigError(
                f"extents {height}x{width} not divisible by {gamma}")
        if boundary not in ("replicate", "periodic"):
            raise ConfigError(f"unknown boundary {boundary!r}")
        super().__init__((channels, height, width),
                         (channels, height // gamma, width // gamma))
        self.gamma = gamma
        self.boundary = boundary
        self.rows = _resample_matrix(height, gamma, boundary)
        self.cols = _resample_matrix(width, gamma, boundary)
        if boundary == "periodic":
            self._spectra()

    def _spectra(self) -> None:
        # circulant frequency responses of the two one-axis filters; the
        # prox then needs the alias-folded power spectrum on the coarse grid
        h, w = self.image_shape[1:]
        g = self.gamma
        row_hat = np.conj(np.fft.fft(self.rows[0]))
        col_hat = np.conj(np.fft.fft(self.cols[0]))
        self._bhat = np.outer(row_hat, col_hat)
        fold = np.abs(self._bhat) ** 2
        self._mhat = fold.reshape(g, h // g, g, w // g).mean(axis=(0, 2))

    def apply_cm(self, v, which):
        if which == "forward":
            return np.einsum("ij,cnjk,lk->cnil", self.rows, v, self.cols,
                             optimize=True)
        if which in ("adjoint", "init"):
            up = np.einsum("ji,cnjk,kl->cnil", self.rows, v, self.cols,
                           optimize=True)
            return up * self.gamma if which == "init" else up
        if which == "init_adjoint":
            down = np.einsum("ij,cnjk,lk->cnil", self.rows, v, self.cols,
                             optimize=True)
            return down * self.gamma
        raise ConfigError(f"unknown apply mode {which!r}")

    def prox_cm(self, r, tau):
        if tau == 0.0:
            return r.copy()
        if self.boundary == "periodic":
            return self._prox_fourier(r, tau)
        return self._prox_cg(r, tau)

    def _prox_fourier(self, r, tau):
        # Woodbury identity: v = r - tau * B^T S^T w with
        # (Id + tau * S B B^T S^T) w = S B r. The coarse operator is
        # diagonal in Fourier space with symbol mhat (mean of |bhat|^2 over
        # the gamma x gamma alias block), and F(S^T w) tiles the coarse
        # spectrum across the fine grid, so everything is one division.
        g = self.gamma
        rhat = np.fft.fft2(r)
        s = np.fft.ifft2(self._bhat * rhat)[:, :, ::g, ::g]
        what = np.fft.fft2(s) / (1.0 / tau + self._mhat)
        fine = np.conj(self._bhat) * np.tile(what, (1, 1, g, g))
        return np.real(r - np.fft.ifft2(fine))

    def _prox_cg(self, r, tau):
        def matvec(v):
            return v + tau * self.normal_cm(v)
        return conjugate_gradient(matvec, r)


class MaskedFourierOp(LinearOp):
    """Undersampled Fourier measurements (MRI): A x = mask * unitary FFT2.

    Measurements carry real and imaginary parts as two channels. The
    adjoint is the zero-filled inverse transform, which also serves as the
    init map. A mask symmetric under k -> -k keeps A^T A real-diagonal in
    Fourier space, giving an exact one-shot prox; any other mask falls back
    to CG on the real-linear normal system.
    """

    kind = "masked_fourier"

    def __init__(self, mask: np.ndarray):
        mask = np.asarray(mask, dtype=np.float64)
        if mask.ndim != 2:
            raise ConfigError("mask must be 2-D (H, W)")
        if not np.all((mask == 0.0) | (mask == 1.0)):
            raise ConfigError("mask entries must be 0 or 1")
        h, w = mask.shape
        super().__init__((1, h, w), (2, h, w))
        self.mask = mask
        flip = mask[(-np.arange(h)) % h][:, (-np.arange(w)) % w]
        self.hermitian = bool(np.array_equal(mask, flip))

    def apply_cm(self, v, which):
        if which == "forward":
            spec = np.fft.fft2(v[0], norm="ortho") * self.mask
            return np.stack([spec.real, spec.imag])
        if which in ("adjoint", "init"):
            spec = (v[0] + 1j * v[1]) * self.mask
            img = np.fft.ifft2(spec, norm="ortho").real
            return img[None]
        if which == "init_adjoint":
            spec = np.fft.fft2(v[0], norm="ortho") * self.mask
            return np.stack([spec.real, spec.imag])
        raise ConfigError(f"unknown apply mode {which!r}")

    def normal_cm(self, v):
        spec = np.fft.fft2(v[0], norm="ortho") * self.mask
        return np.fft.ifft2(spec, norm="ortho").real[None]

    def prox_cm(self, r, tau):
        if tau == 0.0:
            return r.copy()
        if self.hermitian:
            rhat = np.fft.fft2(r[0], norm="ortho")
            vhat = rhat / (1.0 + tau * self.mask)
            return np.fft.ifft2(vhat, norm="ortho").real[None]

        def matvec(v):
            return v + tau * self.normal_cm(v)
        return conjugate_gradient(matvec, r)


def cartesian_mask(height: int, width: int, accel: int,
                   center_rows: int = 4) -> np.ndarray:
    """R-fold Cartesian undersampling: every accel-th row of k-space plus a
    fully sampled low-frequency band around DC. Symmetric under k -> -k so
    the Fourier prox stays exactly diagonal."""
    if accel < 1 or height % accel:
        raise ConfigError(
            f"acceleration {accel} must divide the row count {height}")
    mask = np.zeros((height, width))
    mask[::accel] = 1.0
    half = center_rows // 2
    mask[:half + 1] = 1.0
    if half > 0:
        mask[-half:] = 1.0
    return mask


class RadonOp(LinearOp):
    """Parallel-beam line integrals (CT) with a Joseph-style interpolating
    footprint, assembled once as a sparse matrix.

    The adjoint is the exact transpose (matched backprojection). The init
    map runs a fixed 50 CG iterations on the normal equations of the data
    term; it is an iterative routine, not a linear map the tape can
    differentiate, so init_adjoint raises.
    """

    kind = "radon"
    INIT_CG_STEPS = 50

    def __init__(self, n_angles: int, n_detectors: int, height: int,
                 width: int):
        if height != width:
            raise ConfigError("radon geometry requires square images")
        if n_angles < 1 or n_detectors < 1:
            raise ConfigError("need at least one angle and one detector")
        super().__init__((1, height, width), (1, n_angles, n_detectors))
        self.angles = np.arange(n_angles) * np.pi / n_angles
        self.n_detectors = n_detectors
        self.matrix = self._assemble(height)
        self.matrix_t = self.matrix.T.tocsr()

    def _assemble(self, n: int) -> sparse.csr_matrix:
        # Joseph kernel: march along the axis closest to the ray direction,
        # linear interpolation across the other; rows are scaled by the
        # step length so values approximate continuous line integrals
        center = (n - 1) / 2.0
        det_center = (self.n_detectors - 1) / 2.0
        rows, cols, vals = [], [], []
        for ai, theta in enumerate(self.angles):
            ct, st = np.cos(theta), np.sin(theta)
            # ray direction (-st, ct); detector axis (ct, st)
            steep = abs(ct) >= abs(st)
            for di in range(self.n_detectors):
                offset = di - det_center
                row_id = ai * self.n_detectors + di
                if steep:
                    # march over image rows y; ray: x*ct + y*st = offset
                    # (coordinates relative to the center)
                    step = 1.0 / abs(ct)
                    for yi in range(n):
                        y = yi - center
                        x = (offset - y * st) / ct
                        xf = x + center
                        i0 = int(np.floor(xf))
                        frac = xf - i0
                        for ii, wt in ((i0, 1 - frac), (i0 + 1, frac)):
                            if 0 <= ii < n and wt > 0:
                                rows.append(row_id)
                                cols.append(yi * n + ii)
                                vals.append(wt * step)
                else:
                    step = 1.0 / abs(st)
                    for xi in range(n):
                        x = xi - center
                        y = (offset - x * ct) / st
                        yf = y + center
                        j0 = int(np.floor(yf))
                        frac = yf - j0
                        for jj, wt in ((j0, 1 - frac), (j0 + 1, frac)):
                            if 0 <= jj < n and wt > 0:
                                rows.append(row_id)
                                cols.append(jj * n + xi)
                                vals.append(wt * step)
        shape = (len(self.angles) * self.n_detectors, n * n)
        return sparse.csr_matrix(
            (vals, (rows, cols)), shape=shape, dtype=np.float64)

    def apply_cm(self, v, which):
        n = self.image_shape[1]
        if which == "forward":
            flat = v.reshape(v.shape[1], -1).T  # (H*W, N)
            sino = self.matrix @ flat
            return sino.T.reshape(1, v.shape[1], len(self.angles),
                                  self.n_detectors)
        if which == "adjoint":
            flat = v.reshape(v.shape[1], -1).T
            img = self.matrix_t @ flat
            return img.T.reshape(1, v.shape[1], n, n)
        if which == "init":
            out = np.empty((1, v.shape[1], n, n))
            for b in range(v.shape[1]):
                rhs = (self.matrix_t @ v[0, b].ravel()).reshape(n, n)

                def matvec(img):
                    return (self.matrix_t @ (self.matrix @ img.ravel())
                            ).reshape(n, n)
                out[0, b] = conjugate_gradient(
                    matvec, rhs, tol=0.0, max_iter=self.INIT_CG_STEPS,
                    check=False)
            return out
        if which == "init_adjoint":
            raise SolverError(
                "radon init map is an iterative solve; adjoint undefined")
        raise ConfigError(f"unknown apply mode {which!r}")

    def prox_cm(self, r, tau):
        if tau == 0.0:
            return r.copy()

        def matvec(v):
            return v + tau * self.normal_cm(v)
        return conjugate_gradient(matvec, r)


def make_identity(channels: int, height: int, width: int) -> IdentityOp:
    return IdentityOp(channels, height, width)


def make_downsample(gamma: int, channels: int, height: int, width: int,
                    boundary: str = "replicate") -> DownsampleOp:
    return DownsampleOp(gamma, channels, height, width, boundary)


def make_masked_fourier(mask: np.ndarray) -> MaskedFourierOp:
    return MaskedFourierOp(mask)


def make_radon(n_angles: int, n_detectors: int, height: int,
               width: int) -> RadonOp:
    return RadonOp(n_angles, n_detectors, height, width)
