"""Empirical analysis of a trained flow: probabilistic stability bounds
along trajectories, nonlinear eigenfunction extraction, adversarial attack
search, and worst-case generalization estimates.

The stability machinery estimates quantiles of local Lipschitz constants by
Monte-Carlo sampling of paired trajectories, then assembles per-step bound
curves from a geometric recursion: each semi-implicit step contracts the
trajectory gap by ||B^-1||_2 times the Lipschitz constant of the explicit
half-update, plus a constant injection term from the data (or parameter)
difference. All bound curves and trajectory differences are normalized by
the total element count of the image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, NumericError, SolverError
from .flow import NagConfig, nag_minimize, run_flow
from .operators import LinearOp, power_iteration
from .regularizer import TdvParams, tdv_energy, tdv_grad, tdv_hvp
from .training import LossFn, unroll_tape

INV_NORM_ITERS = 20
INV_NORM_TOL = 1e-8
ATTACK_STEPS = 300
BARRIER_ROUNDS = 4
BARRIER_GROWTH = 10.0
BARRIER_FEAS_TOL = 1e-3


# ------------------------------------------------------------ empirical CDF


@dataclass(frozen=True)
class EmpiricalCdf:
    """Sorted sample values with order-statistic quantile queries."""

    values: np.ndarray

    @staticmethod
    def from_samples(samples) -> "EmpiricalCdf":
        arr = np.sort(np.asarray(samples, dtype=np.float64).ravel())
        if arr.size == 0:
            raise ConfigError("empirical CDF needs at least one sample")
        if not np.all(np.isfinite(arr)):
            raise NumericError("empirical CDF received non-finite samples")
        return EmpiricalCdf(values=arr)

    def quantile(self, q: float) -> float:
        """Smallest sample value whose empirical mass reaches q."""
        if not 0.0 < q <= 1.0:
            raise ConfigError(f"quantile level must lie in (0, 1], got {q}")
        n = self.values.size
        # k/n >= q <=> k >= q*n; the fuzz guards against 0.95*n style
        # float excess flipping the order statistic by one
        k = max(int(math.ceil(q * n - 1e-9)), 1)
        return float(self.values[k - 1])

    def evaluate(self, v: float) -> float:
        """Empirical mass at or below v."""
        return float(np.searchsorted(self.values, v, side="right")
                     / self.values.size)


# ------------------------------------------------- local Lipschitz constants


def local_lipschitz_x(x: np.ndarray, x_tilde: np.ndarray, T: float,
                      params: TdvParams, S: int) -> float:
    """Lipschitz ratio of the explicit half-update x - (T/S) grad R(x)
    between the two points; 0 by convention when they coincide."""
    x = np.asarray(x, dtype=np.float64)
    x_tilde = np.asarray(x_tilde, dtype=np.float64)
    if x.shape != x_tilde.shape:
        raise ConfigError("point pair shapes differ")
    den = float(np.linalg.norm(x - x_tilde))
    if den == 0.0:
        return 0.0
    tau = float(T) / S
    num = float(np.linalg.norm(
        x - tau * tdv_grad(x, params) - x_tilde
        + tau * tdv_grad(x_tilde, params)))
    return num / den


def local_lipschitz_theta(x: np.ndarray, params: TdvParams,
                          params_tilde: TdvParams) -> float:
    """Lipschitz ratio of grad_x R(x, .) between two parameter sets."""
    if params.arch != params_tilde.arch:
        raise ConfigError("parameter sets have different architectures")
    den = float(np.linalg.norm(
        params.theta_vector() - params_tilde.theta_vector()))
    if den == 0.0:
        return 0.0
    num = float(np.linalg.norm(
        tdv_grad(x, params) - tdv_grad(x, params_tilde)))
    return num / den


def perturb_params(params: TdvParams, eps: float,
                   rng: np.random.Generator) -> TdvParams:
    """Uniform draw from the component-wise relative eps-ball around
    params (inf-norm per kernel group), then the admissibility projection."""
    if eps < 0:
        raise ConfigError(f"perturbation radius must be >= 0, got {eps}")
    out = params.copy()
    for _, kernel in out.named_kernels():
        radius = eps * float(np.max(np.abs(kernel.weights)))
        kernel.weights = kernel.weights + rng.uniform(
            -radius, radius, kernel.weights.shape)
    out.project()
    return out


# ------------------------------------------------- paired trajectory samples


def _pair_flows(y, xi_a, xi_b, T, params_a, params_b, op, S):
    y = np.asarray(y, dtype=np.float64)[None]
    za = op.forward(y) + np.asarray(xi_a, dtype=np.float64)
    zb = op.forward(y) + np.asarray(xi_b, dtype=np.float64)
    fa = run_flow(za, T, params_a, op, S)
    fb = run_flow(zb, T, params_b, op, S)
    return fa, fb, float(np.linalg.norm(za - zb))


def input_lipschitz_sample(y, xi, xi_tilde, T, params: TdvParams,
                           op: LinearOp, S: int) -> float:
    """Max over s of the explicit-update Lipschitz constant between the
    trajectories of two noise draws on the same ground truth."""
    fa, fb, _ = _pair_flows(y, xi, xi_tilde, T, params, params, op, S)
    return max(local_lipschitz_x(fa.states[s], fb.states[s], T, params, S)
               for s in range(S + 1))


def param_lipschitz_sample(y, xi, params_tilde: TdvParams, T,
                           params: TdvParams, op: LinearOp, S: int):
    """(max L_x, max L_theta) between the trajectories of the reference and
    perturbed parameters on one observation; L_theta is evaluated along the
    perturbed trajectory."""
    fa, fb, _ = _pair_flows(y, xi, xi, T, params, params_tilde, op, S)
    lx = max(local_lipschitz_x(fa.states[s], fb.states[s], T, params, S)
             for s in range(S + 1))
    lt = max(local_lipschitz_theta(fb.states[s], params, params_tilde)
             for s in range(S + 1))
    return lx, lt


def estimate_cdfs(sampler, T: float, params: TdvParams, op: LinearOp,
                  S: int, n_samples: int):
    """Monte-Carlo CDFs of trajectory-max Lipschitz constants.

    sampler(i) yields either (y, xi, xi_tilde) for the input analysis,
    returning (cdf,), or (y, xi, params_tilde) for the parameter analysis,
    returning (cdf_x, cdf_theta).
    """
    if n_samples < 1:
        raise ConfigError("need at least one Monte-Carlo sample")
    first = sampler(0)
    param_mode = isinstance(first[2], TdvParams)
    lx_samples, lt_samples = [], []
    for i in range(n_samples):
        y, xi, third = sampler(i) if i else first
        if isinstance(third, TdvParams) != param_mode:
            raise ConfigError("sampler mixed input and parameter draws")
        if param_mode:
            lx, lt = param_lipschitz_sample(y, xi, third, T, params, op, S)
            lx_samples.append(lx)
            lt_samples.append(lt)
        else:
            lx_samples.append(
                input_lipschitz_sample(y, xi, third, T, params, op, S))
    if param_mode:
        return (EmpiricalCdf.from_samples(lx_samples),
                EmpiricalCdf.from_samples(lt_samples))
    return (EmpiricalCdf.from_samples(lx_samples),)


def input_pair_sampler(dataset, op: LinearOp, sigma: float, seed: int):
    """(y, xi, xi_tilde) draws with per-sample generator streams."""
    def sampler(i):
        rng = np.random.default_rng([seed, i])
        y = dataset.sample(rng)
        xi = sigma * rng.standard_normal(op.data_shape)
        xi_tilde = sigma * rng.standard_normal(op.data_shape)
        return y, xi, xi_tilde
    return sampler


def param_pair_sampler(dataset, op: LinearOp, sigma: float, eps: float,
                       params: TdvParams, seed: int):
    """(y, xi, params_tilde) draws from the relative eps-ball."""
    def sampler(i):
        rng = np.random.default_rng([seed, i])
        y = dataset.sample(rng)
        xi = sigma * rng.standard_normal(op.data_shape)
        return y, xi, perturb_params(params, eps, rng)
    return sampler


def input_difference_curve(y, xi, xi_tilde, T, params: TdvParams,
                           op: LinearOp, S: int):
    """(normalized per-step trajectory gap, ||z - z_tilde||_2)."""
    fa, fb, z_gap = _pair_flows(y, xi, xi_tilde, T, params, params, op, S)
    n_el = float(np.prod(op.image_shape))
    curve = np.array([np.linalg.norm(fa.states[s] - fb.states[s]) / n_el
                      for s in range(S + 1)])
    return curve, z_gap


def param_difference_curve(y, xi, params_tilde: TdvParams, T,
                           params: TdvParams, op: LinearOp, S: int):
    """(normalized per-step trajectory gap, ||theta - theta_tilde||_2)."""
    fa, fb, _ = _pair_flows(y, xi, xi, T, params, params_tilde, op, S)
    n_el = float(np.prod(op.image_shape))
    curve = np.array([np.linalg.norm(fa.states[s] - fb.states[s]) / n_el
                      for s in range(S + 1)])
    gap = float(np.linalg.norm(
        params.theta_vector() - params_tilde.theta_vector()))
    return curve, gap


# ----------------------------------------------------------- bound curves


def operator_inv_norm(op: LinearOp, tau: float) -> float:
    """||(Id + tau A^T A)^{-1}||_2: closed form when the operator provides
    one, otherwise power iteration on the squared prox map."""
    if tau < 0:
        raise ConfigError(f"needs tau >= 0, got {tau}")
    if hasattr(op, "inv_norm"):
        return float(op.inv_norm(tau))
    if tau == 0.0:
        return 1.0
    shape = (op.image_shape[0], 1, *op.image_shape[1:])
    # B^-1 is SPD, so ||B^-1||_2 is its top eigenvalue: run the PSD power
    # iteration on B^-2 and take the square root it reports
    return power_iteration(
        lambda v: op.prox_cm(op.prox_cm(v, tau), tau), shape,
        iters=INV_NORM_ITERS, tol=INV_NORM_TOL, seed=13)


def geometric_factor(alpha: float, terms: int) -> float:
    """sum_{i=0}^{terms-1} alpha^i via the closed form; alpha == 1 is the
    limit value terms."""
    if terms < 1:
        raise ConfigError("geometric sum needs at least one term")
    if alpha == 1.0:
        return float(terms)
    return float((1.0 - alpha ** terms) / (1.0 - alpha))


@dataclass(frozen=True)
class BoundCurve:
    """Per-step bounds on the normalized trajectory gap for s = 0..S."""

    values: np.ndarray
    alpha: float
    beta: float
    delta: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise NumericError("bound curve is non-finite")


def stability_bound_input(delta: float, cdf: EmpiricalCdf, T: float, S: int,
                          op: LinearOp, a_init_norm: float,
                          z_gap: float) -> BoundCurve:
    """High-probability per-step bound on the normalized trajectory gap for
    two observations z, z_tilde with ||z - z_tilde||_2 = z_gap."""
    if not 0.0 <= delta < 1.0:
        raise ConfigError(f"delta must lie in [0, 1), got {delta}")
    tau = float(T) / S
    binv = operator_inv_norm(op, tau)
    alpha = binv * cdf.quantile(1.0 - delta)
    beta = tau * binv * op.opnorm
    n_el = float(np.prod(op.image_shape))
    values = np.empty(S + 1)
    values[0] = a_init_norm * z_gap / n_el
    for s in range(S):
        coef = alpha ** (s + 1) * a_init_norm \
            + geometric_factor(alpha, s + 1) * beta
        values[s + 1] = coef * z_gap / n_el
    return BoundCurve(values=values, alpha=alpha, beta=beta, delta=delta)


def stability_bound_params(delta: float, cdf_x: EmpiricalCdf,
                           cdf_theta: EmpiricalCdf, T: float, S: int,
                           op: LinearOp, theta_gap: float) -> BoundCurve:
    """High-probability per-step bound on the normalized trajectory gap for
    two parameter sets at distance theta_gap, same observation."""
    if not 0.0 <= delta < 1.0:
        raise ConfigError(f"delta must lie in [0, 1), got {delta}")
    tau = float(T) / S
    binv = operator_inv_norm(op, tau)
    alpha = binv * cdf_x.quantile(1.0 - delta / 2.0)
    beta = binv * tau * cdf_theta.quantile(1.0 - delta / 2.0)
    n_el = float(np.prod(op.image_shape))
    values = np.empty(S + 1)
    values[0] = 0.0  # the trajectories share the initial state
    for s in range(S):
        values[s + 1] = geometric_factor(alpha, s + 1) * beta \
            * theta_gap / n_el
    return BoundCurve(values=values, alpha=alpha, beta=beta, delta=delta)


def input_violation_frequency(sampler, cdf: EmpiricalCdf, delta: float,
                              T: float, params: TdvParams, op: LinearOp,
                              S: int, a_init_norm: float,
                              n_trials: int) -> float:
    """Fraction of fresh paired trajectories whose gap curve exceeds the
    delta-level input bound anywhere."""
    violations = 0
    for i in range(n_trials):
        y, xi, xi_tilde = sampler(i)
        curve, z_gap = input_difference_curve(y, xi, xi_tilde, T, params,
                                              op, S)
        bound = stability_bound_input(delta, cdf, T, S, op, a_init_norm,
                                      z_gap)
        if np.any(curve > bound.values):
            violations += 1
    return violations / n_trials


def param_violation_frequency(sampler, cdf_x: EmpiricalCdf,
                              cdf_theta: EmpiricalCdf, delta: float,
                              T: float, params: TdvParams, op: LinearOp,
                              S: int, n_trials: int) -> float:
    """Fraction of fresh perturbed-parameter trajectories violating the
    delta-level parameter bound anywhere."""
    violations = 0
    for i in range(n_trials):
        y, xi, params_tilde = sampler(i)
        curve, gap = param_difference_curve(y, xi, params_tilde, T, params,
                                            op, S)
        bound = stability_bound_params(delta, cdf_x, cdf_theta, T, S, op,
                                       gap)
        if np.any(curve > bound.values):
            violations += 1
    return violations / n_trials


# ----------------------------------------------------------- eigenfunctions


@dataclass
class EigenResult:
    x: np.ndarray
    eigenvalue: float
    residual: float


def eigen_objective(x: np.ndarray, params: TdvParams):
    """(residual value, exact gradient, Rayleigh quotient) of the
    eigenfunction objective 0.5 ||grad R(x) - Lambda(x) x||_2^2.

    Lambda(x) = <grad R(x), x> / ||x||^2 is differentiated through, which
    brings in two Hessian-vector products.
    """
    x = np.asarray(x, dtype=np.float64)
    n2 = float(np.vdot(x, x))
    if n2 == 0.0 or not np.isfinite(n2):
        raise NumericError("Rayleigh quotient undefined: ||x|| underflow")
    g = tdv_grad(x, params)
    lam = float(np.vdot(g, x)) / n2
    r = g - lam * x
    value = 0.5 * float(np.vdot(r, r))
    h_r = tdv_hvp(x, params, r)
    h_x = tdv_hvp(x, params, x)
    dlam = (h_x + g - 2.0 * lam * x) / n2
    grad = h_r - lam * r - float(np.vdot(x, r)) * dlam
    return value, grad, lam


def eigen_extract(x_init: np.ndarray, params: TdvParams,
                  box=(0.0, 1.0), cfg: NagConfig | None = None,
                  callback=None) -> EigenResult:
    """Minimize the eigenfunction residual over the box from x_init."""
    x_init = np.asarray(x_init, dtype=np.float64)
    lo, hi = float(box[0]), float(box[1])
    if lo >= hi:
        raise ConfigError(f"empty box [{lo}, {hi}]")
    if np.min(x_init) < lo or np.max(x_init) > hi:
        raise ConfigError("eigen initialization leaves the box")
    if not np.any(x_init):
        raise NumericError("Rayleigh quotient undefined: ||x|| underflow")
    cfg = replace(cfg if cfg is not None else NagConfig(), box=(lo, hi))

    def objective(x):
        value, grad, _ = eigen_objective(x, params)
        return value, grad

    x_star = nag_minimize(objective, x_init, cfg, callback=callback)
    residual, _, lam = eigen_objective(x_star, params)
    return EigenResult(x=x_star, eigenvalue=lam, residual=residual)


# ------------------------------------------------------- adversarial attack


def _flow_data_gradient(z, y, T, params: TdvParams, op: LinearOp, S: int,
                        loss: LossFn):
    """(loss value, d loss / d z, output) of z -> loss(x_S(z) - y).

    Reverse-mode through the unroll; the observation enters through both
    the init map and the data-term drift, so the pullback combines the
    init-map adjoint with a forward application.
    """
    zs = np.asarray(z, dtype=np.float64)[None]
    tape, _, _, x0_node, atz_node, xS = unroll_tape(zs, T, params, op, S)
    y_cm = np.moveaxis(np.asarray(y, dtype=np.float64)[None], 1, 0)
    cost_node = loss.on_tape(tape, tape.sub(xS, y_cm))
    grads = tape.backward(cost_node, want=[x0_node, atz_node])
    gz_cm = op.apply_cm(grads[x0_node], "init_adjoint") \
        + op.apply_cm(grads[atz_node], "forward")
    output = np.moveaxis(xS.value, 0, 1)[0]
    return float(cost_node.value), np.moveaxis(gz_cm, 0, 1)[0], output


def project_l2_ball(v: np.ndarray, radius: float) -> np.ndarray:
    """Nearest point of the l2 ball; the constraint holds exactly on
    return, shaving float excess from the rescale if needed."""
    norm = float(np.linalg.norm(v))
    if norm <= radius:
        return v
    out = v * (radius / norm)
    while float(np.linalg.norm(out)) > radius:
        out = out * (1.0 - 1e-15)
    return out


def adversarial_attack(y, xi, eps: float, T, params: TdvParams,
                       op: LinearOp, S: int, steps: int = ATTACK_STEPS,
                       xi_init: np.ndarray | None = None):
    """Worst-case data perturbation within the l2 eps-ball.

    Projected gradient ascent on ||x_S(y, xi + d) - y||^2 with step-size
    backtracking; returns the best iterate (d*, attacked output). The
    origin is always a candidate, so the attacked objective never falls
    below the unattacked one; pass xi_init to warm-start, e.g. from the
    solution of a smaller radius.
    """
    if eps < 0:
        raise ConfigError(f"attack radius must be >= 0, got {eps}")
    y = np.asarray(y, dtype=np.float64)
    z_base = op.forward(y[None])[0] + np.asarray(xi, dtype=np.float64)
    loss = LossFn("squared_l2")

    def evaluate(d):
        return _flow_data_gradient(z_base + d, y, T, params, op, S, loss)

    zero = np.zeros(op.data_shape)
    val0, grad0, out0 = evaluate(zero)
    best_val, best_d, best_out = val0, zero, out0
    if eps == 0.0:
        return best_d, best_out
    if xi_init is not None and np.any(xi_init):
        d = project_l2_ball(np.asarray(xi_init, dtype=np.float64), eps)
        cur_val, grad, out = evaluate(d)
        if cur_val > best_val:
            best_val, best_d, best_out = cur_val, d, out
    else:
        d, cur_val, grad = zero, val0, grad0
    lr = eps / max(float(np.linalg.norm(grad)), 1e-30)
    for _ in range(steps):
        cand = project_l2_ball(d + lr * grad, eps)
        val, cand_grad, out = evaluate(cand)
        if val < cur_val:
            lr *= 0.5  # backtrack without moving
            if lr < 1e-20:
                break
            continue
        d, cur_val, grad = cand, val, cand_grad
        if val > best_val:
            best_val, best_d, best_out = val, d, out
    return best_d, best_out


# ------------------------------------------------------ generalization bound


def patch_losses(patch_set, T, params: TdvParams, op: LinearOp, S: int,
                 loss: LossFn | None = None) -> np.ndarray:
    """Per-patch reconstruction losses l(x_S(y, xi) - y) for (y, xi)
    pairs with a priori sampled noise."""
    loss = loss or LossFn("squared_l2")
    out = np.empty(len(patch_set))
    for i, (y, xi) in enumerate(patch_set):
        z = op.forward(np.asarray(y, dtype=np.float64)[None]) \
            + np.asarray(xi, dtype=np.float64)[None]
        flow = run_flow(z, T, params, op, S, record=False)
        out[i] = loss.value(flow.output[0] - y)
    return out


def loss_energy_regression(losses: np.ndarray,
                           energies: np.ndarray) -> dict:
    """Least-squares line of loss against regularizer energy with the
    coefficient of determination; a report statistic, not a guarantee."""
    losses = np.asarray(losses, dtype=np.float64)
    energies = np.asarray(energies, dtype=np.float64)
    if losses.size != energies.size or losses.size < 2:
        raise ConfigError("regression needs two matched samples or more")
    slope, intercept = np.polyfit(energies, losses, 1)
    fit = slope * energies + intercept
    ss_res = float(np.sum((losses - fit) ** 2))
    ss_tot = float(np.sum((losses - losses.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return {"slope": float(slope), "intercept": float(intercept), "r2": r2}


def generalization_bound(patch_set, q: float, xi_fixed: np.ndarray,
                         T, params: TdvParams, op: LinearOp, S: int,
                         barrier_weight: float = 1e3,
                         cfg: NagConfig | None = None,
                         rng: np.random.Generator | None = None,
                         y_init: np.ndarray | None = None):
    """(worst-case patch, bound value) for the energy-quantile subset.

    Builds the empirical energy CDF over the patch set, restricts to the
    patches at or below the q-quantile, and maximizes the reconstruction
    loss over the box [0,1] subject to the energy constraint via a
    quadratic barrier whose weight grows geometrically across rounds. The
    bound is the worst-case loss minus the subset's empirical risk.
    y_init warm-starts the search, e.g. from a subset member (feasible by
    construction); the default start is a uniform draw from rng.
    """
    if not patch_set:
        raise ConfigError("patch set must be nonempty")
    if not 0.0 < q <= 1.0:
        raise ConfigError(f"quantile level must lie in (0, 1], got {q}")
    if barrier_weight <= 0:
        raise ConfigError("barrier weight must be positive")
    loss = LossFn("squared_l2")
    energies = np.array([tdv_energy(y, params) for y, _ in patch_set])
    f_r = EmpiricalCdf.from_samples(energies)
    h_q = f_r.quantile(q)
    subset = [pair for pair, e in zip(patch_set, energies) if e <= h_q]
    e_emp = float(patch_losses(subset, T, params, op, S, loss).mean())

    xi_fixed = np.asarray(xi_fixed, dtype=np.float64)
    if y_init is not None:
        y_cur = np.asarray(y_init, dtype=np.float64)
        if y_cur.shape != tuple(op.image_shape):
            raise ConfigError(
                f"y_init shape {y_cur.shape} does not match operator "
                f"image shape {tuple(op.image_shape)}")
        if np.min(y_cur) < 0.0 or np.max(y_cur) > 1.0:
            raise ConfigError("y_init leaves the [0, 1] box")
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        y_cur = rng.uniform(0.0, 1.0, op.image_shape)
    cfg = replace(cfg if cfg is not None else NagConfig(max_steps=250),
                  box=(0.0, 1.0))
    weight = float(barrier_weight)
    for _ in range(BARRIER_ROUNDS):
        def objective(yv, _w=weight):
            z = op.forward(yv[None])[0] + xi_fixed
            val, gz, out = _flow_data_gradient(z, yv, T, params, op, S,
                                               loss)
            grad = op.adjoint(gz) - loss.dvalue(out - yv)
            gap = tdv_energy(yv, params) - h_q
            if gap > 0.0:
                val_b = _w * gap * gap
                grad_b = 2.0 * _w * gap * tdv_grad(yv, params)
            else:
                val_b, grad_b = 0.0, 0.0
            return -val + val_b, -grad + grad_b

        y_cur = nag_minimize(objective, y_cur, cfg)
        weight *= BARRIER_GROWTH
    slack = tdv_energy(y_cur, params) - h_q
    # the quantile can sit arbitrarily close to zero, so the feasibility
    # scale also considers the energy spread of the patch set
    feas_scale = max(abs(h_q), float(energies.max() - energies.min()))
    if slack > BARRIER_FEAS_TOL * feas_scale:
        raise SolverError(
            f"worst-case patch infeasible: energy exceeds the quantile "
            f"by {slack:.3e}", residual=float(slack),
            iterations=BARRIER_ROUNDS * cfg.max_steps)
    worst_loss = float(patch_losses([(y_cur, xi_fixed)], T, params, op, S,
                                    loss)[0])
    return y_cur, worst_loss - e_emp
