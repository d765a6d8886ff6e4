"""Sampled optimal-control training of the flow's controls (T, theta).

The cost is the batch mean of l(x_S - y) where x_S comes from the unrolled
semi-implicit scheme on z = A y + xi. Gradients with respect to both
controls are reverse-mode through the entire unroll, prox solves included
(differentiated implicitly: the cotangent solves the same SPD system). The
adjoint recursion of the costate

    p_S = -Dl(x_S - y)
    p_s = (Id - (T/S) D^2 R(x_s)) (Id + (T/S) A^T A)^{-1} p_{s+1}

is implemented independently of the tape and cross-checked against it, and
the first-order condition for the stopping time is evaluated as

    E[ sum_s <p_{s+1}, (Id + (T/S) A^T A)^{-1} (x_{s+1} - x_s)> ]

which equals -T * dJ/dT and vanishes at a trained optimum.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .dataset import Dataset
from .errors import ConfigError, NumericError
from .flow import T_MAX, FlowState, run_flow
from .operators import LinearOp
from .regularizer import (TdvArch, TdvParams, grad_node, init_params,
                          save_checkpoint, tdv_hvp)

LOG_COLUMNS = ("iter", "cost", "stop_cond", "lr", "T")


@dataclass(frozen=True)
class LossFn:
    """Pointwise training loss: squared l2 or the smooth-l1 charbonnier."""

    kind: str = "squared_l2"
    eps: float = 0.01

    def __post_init__(self):
        if self.kind not in ("squared_l2", "charbonnier"):
            raise ConfigError(f"unknown loss kind '{self.kind}'")
        if self.eps <= 0:
            raise ConfigError("charbonnier eps must be positive")

    def value(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "squared_l2":
            return float(np.vdot(x, x))
        return float(np.sum(np.sqrt(x * x + self.eps * self.eps)))

    def dvalue(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "squared_l2":
            return 2.0 * x
        return x / np.sqrt(x * x + self.eps * self.eps)

    def on_tape(self, tape: Tape, diff):
        if self.kind == "squared_l2":
            return tape.vdot(diff, diff)
        return tape.ssum(tape.ew(diff, "charbonnier", self.eps))


@dataclass
class TrainConfig:
    batch_size: int = 32
    iterations: int = 2000
    lr: float = 4e-4
    lr_halving_period: int = 25000
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    patch_size: int = 93
    steps: int = 10
    sigma: float = 25.0 / 255.0
    seed: int = 0
    T_init: float = 0.1
    theta_box: float | None = None  # optional global inf-norm projection
    checkpoint_every: int = 0
    arch: TdvArch | None = None

    def __post_init__(self):
        positive = ("batch_size", "iterations", "lr", "lr_halving_period",
                    "patch_size", "steps", "sigma")
        for name in positive:
            val = getattr(self, name)
            if val < 0 or (val == 0 and name not in ("iterations",)):
                raise ConfigError(f"{name} must be positive, got {val}")
        for name in ("beta1", "beta2"):
            val = getattr(self, name)
            if not 0.0 < val < 1.0:
                raise ConfigError(f"{name} must lie in (0,1), got {val}")
        if self.eps_adam <= 0:
            raise ConfigError("eps_adam must be positive")
        if not 0.0 <= self.T_init <= T_MAX:
            raise ConfigError(f"T_init outside [0, {T_MAX}]")
        if self.theta_box is not None and self.theta_box <= 0:
            raise ConfigError("theta_box must be positive when set")


@dataclass
class AdjointState:
    """Costates p_0..p_S of one (possibly batched) trajectory."""

    p: list


@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray

    @staticmethod
    def zeros(n: int) -> "AdamMoments":
        return AdamMoments(np.zeros(n), np.zeros(n))


# ------------------------------------------------------------------ cost


def _assemble_batch(batch, op: LinearOp):
    """Stack [(y, xi), ...] into (N,C,H,W) truths and (N,...) observations."""
    if not batch:
        raise ConfigError("batch must be nonempty")
    ys, zs = [], []
    for y, xi in batch:
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 3:
            y = y[None]
        zs.append(op.forward(y) + np.asarray(xi, dtype=np.float64))
        ys.append(y)
    return np.concatenate(ys), np.concatenate(zs)


def sampled_cost(batch, T: float, params: TdvParams, op: LinearOp, S: int,
                 loss: LossFn) -> float:
    """Mean loss over the batch trajectories."""
    ys, zs = _assemble_batch(batch, op)
    flow = run_flow(zs, T, params, op, S, record=False)
    return loss.value(flow.output - ys) / ys.shape[0]


# --------------------------------------------------------------- adjoint


def adjoint_sweep(flow: FlowState, y: np.ndarray, loss: LossFn
                  ) -> AdjointState:
    """Costates by the backward recursion; needs a recorded trajectory."""
    if flow.params is None:
        raise ConfigError("flow carries no regularizer parameters")
    if len(flow.states) != flow.S + 1:
        raise ConfigError("adjoint sweep needs the full recorded trajectory")
    y = np.asarray(y, dtype=np.float64)
    tau = flow.T / flow.S
    p = [None] * (flow.S + 1)
    p[flow.S] = -loss.dvalue(flow.states[flow.S] - y)
    for s in range(flow.S - 1, -1, -1):
        pulled = flow.op.prox(p[s + 1], tau)
        p[s] = pulled - tau * tdv_hvp(flow.states[s], flow.params, pulled)
    return AdjointState(p=p)


# ------------------------------------------------- reverse-mode controls


def unroll_tape(zs: np.ndarray, T: float, params: TdvParams, op: LinearOp,
                S: int):
    """Record the full unrolled scheme on a fresh tape.

    Returns (tape, T_node, theta_nodes, x0_node, atz_node, xS_node). zs is
    a stacked observation batch; the graph is batched along the sample
    axis. The observation enters twice, as x0 = A_init z and as A^T z;
    both are leaves so callers can also pull gradients back to the data.
    """
    tape = Tape()
    theta_nodes = [tape.leaf(k.weights) for _, k in params.named_kernels()]
    T_node = tape.leaf(np.asarray(float(T)))
    zs_cm = np.moveaxis(np.asarray(zs, dtype=np.float64), 1, 0)
    x0_node = tape.leaf(op.apply_cm(zs_cm, "init"))
    atz_node = tape.leaf(op.apply_cm(zs_cm, "adjoint"))
    tau_node = tape.smul(T_node, 1.0 / S)
    x = x0_node
    for _ in range(S):
        drift = tape.sub(atz_node, grad_node(tape, x, theta_nodes, params))
        x = tape.prox(tape.add(x, tape.mul(drift, tau_node)), T_node, op, S)
    return tape, T_node, theta_nodes, x0_node, atz_node, x


def _cost_grads(batch, T, params, op, S, loss, want_x0=False):
    ys, zs = _assemble_batch(batch, op)
    n = ys.shape[0]
    tape, T_node, theta_nodes, x0_node, _, xS = unroll_tape(
        zs, T, params, op, S)
    ys_cm = np.moveaxis(ys, 1, 0)
    cost_node = loss.on_tape(tape, tape.sub(xS, ys_cm))
    want = [T_node] + theta_nodes + ([x0_node] if want_x0 else [])
    grads = tape.backward(cost_node, want=want)
    cost = float(cost_node.value) / n
    dT = float(grads[T_node]) / n
    dtheta = np.concatenate(
        [grads[tn].ravel() for tn in theta_nodes]) / n
    if want_x0:
        return cost, dT, dtheta, np.moveaxis(grads[x0_node], 0, 1) / n
    return cost, dT, dtheta


def control_gradients(batch, T: float, params: TdvParams, op: LinearOp,
                      S: int, loss: LossFn):
    """(dJ/dT, dJ/dtheta) of the sampled cost, reverse-mode through the
    unroll. The theta gradient is flat, ordered like theta_vector()."""
    _, dT, dtheta = _cost_grads(batch, T, params, op, S, loss)
    return dT, dtheta


# ---------------------------------------------------------------- ADAM


def learning_rate(cfg: TrainConfig, step_index: int) -> float:
    """Step-index (1-based) schedule: halve every lr_halving_period."""
    return cfg.lr * 0.5 ** ((step_index - 1) // cfg.lr_halving_period)


def adam_update(params: TdvParams, T: float, grads, moments: AdamMoments,
                step_index: int, cfg: TrainConfig):
    """One bias-corrected moment update of the joint control vector.

    grads = (dtheta, dT). Afterward K is re-projected to zero mean, theta
    optionally boxed, and T clamped to [0, T_max]. Returns (T, moments);
    params is updated in place.
    """
    dtheta, dT = grads
    vec = np.concatenate([params.theta_vector(), [float(T)]])
    g = np.concatenate([np.asarray(dtheta, dtype=np.float64).ravel(),
                        [float(dT)]])
    if g.shape != vec.shape:
        raise ConfigError(
            f"gradient length {g.size} does not match controls {vec.size}")
    m = cfg.beta1 * moments.m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * moments.v + (1.0 - cfg.beta2) * g * g
    mhat = m / (1.0 - cfg.beta1 ** step_index)
    vhat = v / (1.0 - cfg.beta2 ** step_index)
    vec = vec - learning_rate(cfg, step_index) * mhat / (
        np.sqrt(vhat) + cfg.eps_adam)
    theta = vec[:-1]
    if cfg.theta_box is not None:
        theta = np.clip(theta, -cfg.theta_box, cfg.theta_box)
    params.set_theta_vector(theta)
    params.project()
    T_new = float(np.clip(vec[-1], 0.0, T_MAX))
    return T_new, AdamMoments(m=m, v=v)


# ------------------------------------------------- stopping-time condition


def stopping_time_report(batch, T: float, params: TdvParams, op: LinearOp,
                         S: int, loss: LossFn):
    """(condition value, mean |per-sample summand|) of the first-order
    stopping-time optimality condition."""
    ys, zs = _assemble_batch(batch, op)
    flow = run_flow(zs, T, params, op, S)
    adj = adjoint_sweep(flow, ys, loss)
    tau = T / S if S else 0.0
    axes = tuple(range(1, ys.ndim))
    per_sample = np.zeros(ys.shape[0])
    for s in range(S):
        inc = op.prox(flow.states[s + 1] - flow.states[s], tau)
        per_sample += np.sum(adj.p[s + 1] * inc, axis=axes)
    value = float(per_sample.mean())
    scale = float(np.abs(per_sample).mean())
    return value, scale


def stopping_time_condition(batch, T: float, params: TdvParams,
                            op: LinearOp, S: int, loss: LossFn) -> float:
    return stopping_time_report(batch, T, params, op, S, loss)[0]


# ---------------------------------------------------------------- train


def _draw_batch(dataset: Dataset, op: LinearOp, cfg: TrainConfig,
                iteration: int):
    """Batch of (y, xi) with per-sample generators seeded from
    (seed, iteration, sample); reproducible regardless of batching."""
    batch = []
    for j in range(cfg.batch_size):
        rng = np.random.default_rng([cfg.seed, iteration, j])
        y = dataset.sample(rng)
        xi = cfg.sigma * rng.standard_normal(op.data_shape)
        batch.append((y, xi))
    return batch


def train(dataset: Dataset, op: LinearOp, cfg: TrainConfig, loss: LossFn,
          params: TdvParams | None = None, out_dir=None):
    """Run the sampled optimal-control loop; returns (T, params, log).

    The log is a list of per-iteration dicts with LOG_COLUMNS keys. With
    out_dir set, a CSV log and periodic checkpoints are written there.
    """
    if params is None:
        if cfg.arch is None:
            raise ConfigError("train needs params or cfg.arch")
        params = init_params(cfg.arch, np.random.default_rng(cfg.seed))
    else:
        params = params.copy()
    expected = (dataset.channels, dataset.patch_size, dataset.patch_size)
    if tuple(op.image_shape) != expected:
        raise ConfigError(
            f"operator image shape {tuple(op.image_shape)} does not match "
            f"dataset patches {expected}")
    T = float(cfg.T_init)
    moments = AdamMoments.zeros(params.num_parameters + 1)
    log = []
    writer = _LogWriter(out_dir) if out_dir is not None else None
    started = time.time()
    for it in range(1, cfg.iterations + 1):
        batch = _draw_batch(dataset, op, cfg, it)
        try:
            cost, dT, dtheta = _cost_grads(batch, T, params, op, cfg.steps,
                                           loss)
        except NumericError as err:
            _abort_dump(out_dir, params, T, it)
            raise NumericError(
                f"non-finite cost at iteration {it}") from err
        if not np.isfinite(cost):
            _abort_dump(out_dir, params, T, it)
            raise NumericError(f"non-finite cost at iteration {it}")
        stop_cond = -T * dT
        row = {"iter": it, "cost": cost, "stop_cond": stop_cond,
               "lr": learning_rate(cfg, it), "T": T}
        log.append(row)
        if writer is not None:
            writer.write(row)
        T, moments = adam_update(params, T, (dtheta, dT), moments, it, cfg)
        if out_dir is not None and cfg.checkpoint_every and \
                it % cfg.checkpoint_every == 0:
            save_checkpoint(_ospath(out_dir, f"checkpoint_{it:06d}.tdvc"),
                            params, T, meta={"iteration": it})
    if writer is not None:
        writer.close()
    if out_dir is not None:
        save_checkpoint(_ospath(out_dir, "checkpoint_final.tdvc"), params, T,
                        meta={"iterations": cfg.iterations,
                              "seconds": round(time.time() - started, 3)})
    return T, params, log


def _ospath(out_dir, name):
    import os

    return os.path.join(os.fspath(out_dir), name)


def _abort_dump(out_dir, params, T, iteration):
    if out_dir is not None:
        save_checkpoint(_ospath(out_dir, "abort.tdvc"), params, T,
                        meta={"iteration": iteration})


class _LogWriter:
    """Streams training rows to train_log.csv with stable formatting."""

    def __init__(self, out_dir):
        self.fh = open(_ospath(out_dir, "train_log.csv"), "w", newline="")
        self.writer = csv.writer(self.fh)
        self.writer.writerow(LOG_COLUMNS)

    def write(self, row: dict) -> None:
        self.writer.writerow([format_cell(row[c]) for c in LOG_COLUMNS])

    def close(self) -> None:
        self.fh.close()


def format_cell(value) -> str:
    """Deterministic CSV cell rendering (shortest round-trip floats)."""
    if isinstance(value, float):
        return repr(float(value))  # plain repr; numpy scalars would tag it
    return str(value)
