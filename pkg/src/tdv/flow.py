"""Unrolled semi-implicit gradient flow for inference, and the accelerated
projected descent used when the reconstruction is posed variationally.

One flow step is

    x_{s+1} = (Id + (T/S) A^T A)^{-1} (x_s + (T/S)(A^T z - grad R(x_s)))

with x_0 = A_init z. T is the learned stopping time, S the number of steps;
only the ratio T/S enters a single step, so refining S at fixed T tightens
the discretization without changing the flow being followed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as _t
from .errors import ConfigError, NumericError
from .operators import LinearOp
from .regularizer import TdvParams, tdv_grad

T_MAX = 1.0


@dataclass
class FlowState:
    """Full trajectory of one unrolled run (states[0] is the init image).

    Carries the regularizer parameters that generated it so backward sweeps
    (the adjoint recursion) need no side channel.
    """

    states: list
    T: float
    S: int
    z: np.ndarray
    op: LinearOp
    params: TdvParams | None = None

    @property
    def output(self) -> np.ndarray:
        return self.states[-1]


def _check_T(T: float) -> float:
    T = float(T)
    if not 0.0 <= T <= T_MAX:
        raise ConfigError(f"stopping time {T} outside [0, {T_MAX}]")
    return T


def semi_implicit_step(x: np.ndarray, z: np.ndarray, T: float,
                       params: TdvParams, op: LinearOp, S: int) -> np.ndarray:
    """One step of the unrolled flow; T=0 returns x unchanged."""
    T = _check_T(T)
    if S < 1:
        raise ConfigError(f"step count must be >= 1, got {S}")
    if T == 0.0:
        return np.array(x, copy=True)
    tau = T / S
    drift = op.adjoint(z) - tdv_grad(x, params)
    return op.prox(x + tau * drift, tau)


def run_flow(z: np.ndarray, T: float, params: TdvParams, op: LinearOp,
             S: int, record: bool = True) -> FlowState:
    """Unroll S steps from x_0 = A_init z and record the trajectory.

    With record=False only the initial and final states are kept (the
    memory-light mode for large stability sweeps).
    """
    T = _check_T(T)
    if S < 1:
        raise ConfigError(f"step count must be >= 1, got {S}")
    x = op.init_map(z)
    states = [x]
    for _ in range(S):
        x = semi_implicit_step(x, z, T, params, op, S)
        if not _t.all_finite(x):
            raise NumericError("flow state became non-finite")
        if record:
            states.append(x)
    if not record:
        states.append(x)
    return FlowState(states=states, T=T, S=S, z=np.asarray(z, float), op=op,
                     params=params)


def save_trajectory(path, flow: FlowState) -> None:
    """Dump a trajectory as named tensor records (z, T, x0000..xS)."""
    frames = {"z": flow.z, "T": np.asarray(float(flow.T))}
    for s, x in enumerate(flow.states):
        frames[f"x{s:04d}"] = x
    _t.save_tensors(path, frames)


@dataclass
class NagConfig:
    """Accelerated projected descent with Lipschitz backtracking."""

    max_steps: int = 1000
    initial_lipschitz: float = 1.0
    backtrack_factor: float = 2.0
    box: tuple[float, float] | None = None
    step_tol: float = 0.0  # stop early when the iterate stalls

    def __post_init__(self):
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.backtrack_factor <= 1.0:
            raise ConfigError("backtracking factor must exceed 1")
        if self.initial_lipschitz <= 0.0:
            raise ConfigError("Lipschitz estimate must be positive")


def nag_minimize(objective, x0: np.ndarray, cfg: NagConfig,
                 callback=None) -> np.ndarray:
    """Minimize a smooth objective(x) -> (value, grad) from x0.

    Nesterov momentum with backtracking on the quadratic upper bound; a
    failed candidate raises the Lipschitz estimate and restarts momentum, so
    the objective at accepted iterates never increases. The box projection,
    when configured, is applied to every candidate. callback(it, x, fx) fires
    after each accepted iterate.
    """

    def proj(v):
        if cfg.box is None:
            return v
        return np.clip(v, cfg.box[0], cfg.box[1])

    x = proj(np.asarray(x0, dtype=np.float64))
    fx, _ = _eval(objective, x, 0)
    x_prev = x
    lip = cfg.initial_lipschitz
    t_momentum = 1.0
    for it in range(cfg.max_steps):
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_momentum ** 2))
        beta = (t_momentum - 1.0) / t_next
        y = x + beta * (x - x_prev)
        fy, gy = _eval(objective, y, it)
        accepted = None
        for _ in range(60):
            cand = proj(y - gy / lip)
            fc, _ = _eval(objective, cand, it)
            gap = cand - y
            bound = fy + float(np.vdot(gy, gap)) + 0.5 * lip * float(
                np.vdot(gap, gap))
            if fc <= bound + 1e-12 * max(1.0, abs(bound)):
                accepted = (cand, fc)
                break
            lip *= cfg.backtrack_factor
        if accepted is None:
            raise NumericError(
                f"backtracking exhausted at iterate {it} (L={lip:.3e})")
        cand, fc = accepted
        if fc > fx:
            # momentum overshoot: restart from the best point
            t_momentum = 1.0
            x_prev = x
            fy, gy = _eval(objective, x, it)
            for _ in range(60):
                cand = proj(x - gy / lip)
                fc, _ = _eval(objective, cand, it)
                gap = cand - x
                bound = fy + float(np.vdot(gy, gap)) + 0.5 * lip * float(
                    np.vdot(gap, gap))
                if fc <= bound + 1e-12 * max(1.0, abs(bound)):
                    break
                lip *= cfg.backtrack_factor
            if fc > fx:  # flat to machine precision
                return x
        step = float(np.linalg.norm(cand - x))
        x_prev, x, fx = x, cand, fc
        t_momentum = t_next
        if callback is not None:
            callback(it, x, fx)
        if cfg.step_tol > 0.0 and step <= cfg.step_tol * max(
                1.0, float(np.linalg.norm(x))):
            break
    return x


def _eval(objective, x, it):
    val, grad = objective(x)
    val = float(val)
    if not np.isfinite(val) or not _t.all_finite(np.asarray(grad)):
        raise NumericError(f"objective non-finite at iterate {it}")
    return val, grad


def variational_reconstruct(z: np.ndarray, op: LinearOp, params: TdvParams,
                            lam: float, cfg: NagConfig | None = None,
                            x0: np.ndarray | None = None) -> np.ndarray:
    """Minimize (lam/2)||A x - z||^2 + R(x) from the operator's init map."""
    from .regularizer import tdv_energy

    if lam <= 0:
        raise ConfigError(f"data weight must be positive, got {lam}")
    if cfg is None:
        cfg = NagConfig()
    if x0 is None:
        x0 = op.init_map(z)

    def objective(x):
        misfit = op.forward(x) - z
        value = 0.5 * lam * float(np.vdot(misfit, misfit)) + tdv_energy(
            x, params)
        grad = lam * op.adjoint(misfit) + tdv_grad(x, params)
        return value, grad

    return nag_minimize(objective, x0, cfg)
