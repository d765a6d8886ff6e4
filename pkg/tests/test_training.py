"""Training controls: losses, costs, adjoint recursion, ADAM, train loop."""

import numpy as np
import pytest

from tdv.dataset import Dataset, dihedral_orbit, make_synthetic_images
from tdv.errors import ConfigError, NumericError
from tdv.flow import run_flow
from tdv.operators import (cartesian_mask, make_downsample, make_identity,
                           make_masked_fourier)
from tdv.regularizer import TdvArch, init_params, load_checkpoint
from tdv.training import (AdamMoments, LossFn, TrainConfig, _cost_grads,
                          adam_update, adjoint_sweep, control_gradients,
                          learning_rate, sampled_cost,
                          stopping_time_condition, stopping_time_report,
                          train)

from oracles import adam_scalar_reference, fd_directional, rel_err


def small_params(seed=0, features=4, scales=2, channels=1):
    arch = TdvArch(scales=scales, blocks=1, features=features,
                   channels=channels)
    return init_params(arch, np.random.default_rng(seed))


def zero_w_params(seed=0):
    params = small_params(seed)
    params.w.weights[:] = 0.0
    return params


def make_batch(rng, n, shape=(1, 8, 8), op=None, sigma=0.1):
    batch = []
    for _ in range(n):
        y = rng.uniform(0, 1, shape)
        data_shape = op.data_shape if op is not None else shape
        batch.append((y, sigma * rng.standard_normal(data_shape)))
    return batch


# ---------------------------------------------------------------- losses


def test_squared_l2_value_and_derivative():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 5))
    loss = LossFn("squared_l2")
    assert loss.value(x) == pytest.approx(float(np.sum(x * x)), abs=1e-14)
    assert np.allclose(loss.dvalue(x), 2 * x)


def test_charbonnier_value_and_derivative():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(40) * 0.05
    loss = LossFn("charbonnier")
    assert loss.eps == 0.01
    expect = np.sum(np.sqrt(x * x + 1e-4))
    assert loss.value(x) == pytest.approx(float(expect), rel=1e-14)
    v = rng.standard_normal(40)
    fd = fd_directional(lambda t: loss.value(t), x, v, h=1e-6)
    assert abs(float(np.vdot(loss.dvalue(x), v)) - fd) < 1e-7


def test_loss_on_tape_matches_plain_value():
    from tdv.autodiff import Tape

    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 2, 6, 6))
    for loss in (LossFn("squared_l2"), LossFn("charbonnier", eps=0.05)):
        tape = Tape()
        node = tape.leaf(x)
        out = loss.on_tape(tape, node)
        assert float(out.value) == pytest.approx(loss.value(x), rel=1e-14)


def test_loss_validation():
    with pytest.raises(ConfigError):
        LossFn("huber")
    with pytest.raises(ConfigError):
        LossFn("charbonnier", eps=0.0)


# ---------------------------------------------------------------- cost


def test_cost_zero_when_output_equals_truth():
    rng = np.random.default_rng(3)
    op = make_identity(1, 8, 8)
    batch = [(rng.uniform(0, 1, (1, 8, 8)), np.zeros((1, 8, 8)))
             for _ in range(3)]
    cost = sampled_cost(batch, 0.0, small_params(), op, 4,
                        LossFn("squared_l2"))
    assert cost == 0.0


def test_cost_single_sample_is_plain_loss():
    rng = np.random.default_rng(4)
    op = make_identity(1, 8, 8)
    params = small_params(seed=5)
    loss = LossFn("squared_l2")
    y = rng.uniform(0, 1, (1, 8, 8))
    xi = 0.1 * rng.standard_normal((1, 8, 8))
    cost = sampled_cost([(y, xi)], 0.4, params, op, 5, loss)
    flow = run_flow(y + xi, 0.4, params, op, 5)
    assert cost == pytest.approx(loss.value(flow.output - y), rel=1e-14)


def test_cost_batch_is_mean_of_singles():
    rng = np.random.default_rng(5)
    op = make_identity(1, 8, 8)
    params = small_params(seed=6)
    loss = LossFn("charbonnier")
    batch = make_batch(rng, 4, op=op)
    whole = sampled_cost(batch, 0.3, params, op, 4, loss)
    singles = [sampled_cost([b], 0.3, params, op, 4, loss) for b in batch]
    assert abs(whole - np.mean(singles)) < 1e-12


def test_cost_batch_mean_iterative_prox():
    # the downsample prox solves a linear system iteratively, so batching
    # reorders roundoff; agreement is to solver tolerance, not bitwise
    rng = np.random.default_rng(5)
    op = make_downsample(2, 1, 8, 8)
    params = small_params(seed=6)
    loss = LossFn("charbonnier")
    batch = make_batch(rng, 4, op=op)
    whole = sampled_cost(batch, 0.3, params, op, 4, loss)
    singles = [sampled_cost([b], 0.3, params, op, 4, loss) for b in batch]
    assert abs(whole - np.mean(singles)) / abs(whole) < 1e-8


def test_cost_empty_batch_rejected():
    with pytest.raises(ConfigError):
        sampled_cost([], 0.1, small_params(), make_identity(1, 8, 8), 3,
                     LossFn())


# ---------------------------------------------------------------- adjoint


def test_adjoint_scalar_recursion_zero_regularizer():
    rng = np.random.default_rng(6)
    op = make_identity(1, 8, 8)
    params = zero_w_params()
    loss = LossFn("squared_l2")
    y = rng.uniform(0, 1, (1, 1, 8, 8))
    z = y + 0.1 * rng.standard_normal(y.shape)
    T, S = 0.7, 6
    flow = run_flow(z, T, params, op, S)
    adj = adjoint_sweep(flow, y, loss)
    tau = T / S
    for s in range(S + 1):
        expect = adj.p[S] / (1.0 + tau) ** (S - s)
        assert np.max(np.abs(adj.p[s] - expect)) < 1e-12


def test_adjoint_zero_time_is_constant():
    rng = np.random.default_rng(7)
    op = make_identity(1, 8, 8)
    params = small_params(seed=8)
    y = rng.uniform(0, 1, (1, 1, 8, 8))
    flow = run_flow(y + 0.05, 0.0, params, op, 4)
    adj = adjoint_sweep(flow, y, LossFn("squared_l2"))
    for s in range(5):
        assert np.array_equal(adj.p[s], adj.p[4])


def every_op_8x8():
    mask = cartesian_mask(8, 8, 2)
    return [make_identity(1, 8, 8), make_downsample(2, 1, 8, 8),
            make_masked_fourier(mask)]


@pytest.mark.parametrize("op_idx", range(3))
def test_adjoint_matches_backprop_input_gradient(op_idx):
    op = every_op_8x8()[op_idx]
    rng = np.random.default_rng(10 + op_idx)
    params = small_params(seed=11)
    loss = LossFn("squared_l2")
    y = rng.uniform(0, 1, (1, 8, 8))
    xi = 0.05 * rng.standard_normal(op.data_shape)
    T, S = 0.5, 3
    z = op.forward(y[None])[0] + xi
    flow = run_flow(z[None], T, params, op, S)
    adj = adjoint_sweep(flow, y[None], loss)
    _, _, _, dx0 = _cost_grads([(y, xi)], T, params, op, S, loss,
                               want_x0=True)
    assert rel_err(adj.p[0], -dx0) < 1e-8


def test_adjoint_needs_recorded_trajectory():
    rng = np.random.default_rng(12)
    op = make_identity(1, 8, 8)
    y = rng.uniform(0, 1, (1, 1, 8, 8))
    flow = run_flow(y, 0.5, small_params(), op, 4, record=False)
    with pytest.raises(ConfigError):
        adjoint_sweep(flow, y, LossFn())


# ------------------------------------------------------------- gradients


def test_theta_gradient_vanishes_without_regularizer_at_zero_time():
    rng = np.random.default_rng(13)
    op = make_identity(1, 8, 8)
    batch = make_batch(rng, 2)
    dT, dtheta = control_gradients(batch, 0.0, zero_w_params(), op, 3,
                                   LossFn("squared_l2"))
    assert np.all(dtheta == 0.0)


@pytest.mark.parametrize("op_idx", range(3))
def test_time_gradient_matches_fd(op_idx):
    op = every_op_8x8()[op_idx]
    rng = np.random.default_rng(14 + op_idx)
    params = small_params(seed=15)
    loss = LossFn("squared_l2")
    batch = make_batch(rng, 2, op=op)
    T = 0.37
    dT, _ = control_gradients(batch, T, params, op, 3, loss)
    h = 1e-6
    fd = (sampled_cost(batch, T + h, params, op, 3, loss) -
          sampled_cost(batch, T - h, params, op, 3, loss)) / (2 * h)
    assert abs(dT - fd) / abs(fd) < 1e-5


def test_theta_gradient_matches_fd_coordinates():
    rng = np.random.default_rng(16)
    op = make_identity(1, 8, 8)
    params = small_params(seed=17)
    loss = LossFn("squared_l2")
    batch = make_batch(rng, 2)
    T = 0.4
    _, dtheta = control_gradients(batch, T, params, op, 3, loss)
    vec = params.theta_vector()
    h = 1e-5
    picks = rng.choice(vec.size, 10, replace=False)
    for i in picks:
        stepped = []
        for sign in (+1, -1):
            probe = params.copy()
            bumped = vec.copy()
            bumped[i] += sign * h
            probe.set_theta_vector(bumped)
            stepped.append(sampled_cost(batch, T, probe, op, 3, loss))
        fd = (stepped[0] - stepped[1]) / (2 * h)
        assert abs(dtheta[i] - fd) / max(abs(fd), 1e-10) < 1e-4


def test_gradients_charbonnier_loss_fd():
    rng = np.random.default_rng(18)
    op = make_downsample(2, 1, 8, 8)
    params = small_params(seed=19)
    loss = LossFn("charbonnier")
    batch = make_batch(rng, 2, op=op)
    T = 0.3
    dT, _ = control_gradients(batch, T, params, op, 3, loss)
    h = 1e-6
    fd = (sampled_cost(batch, T + h, params, op, 3, loss) -
          sampled_cost(batch, T - h, params, op, 3, loss)) / (2 * h)
    assert abs(dT - fd) / abs(fd) < 1e-5


# ---------------------------------------------------------------- ADAM


def test_adam_zero_gradient_keeps_parameters():
    params = small_params(seed=20)
    before = params.theta_vector()
    cfg = TrainConfig(arch=params.arch)
    moments = AdamMoments.zeros(params.num_parameters + 1)
    T, moments = adam_update(params, 0.25, (np.zeros(params.num_parameters),
                                            0.0), moments, 1, cfg)
    assert np.array_equal(params.theta_vector(), before)
    assert T == 0.25
    assert np.all(moments.m == 0.0) and np.all(moments.v == 0.0)


def test_adam_first_step_closed_form():
    params = small_params(seed=21)
    before = params.theta_vector()
    cfg = TrainConfig(arch=params.arch, lr=1e-3)
    rng = np.random.default_rng(22)
    g = rng.standard_normal(params.num_parameters)
    gT = 0.3
    moments = AdamMoments.zeros(params.num_parameters + 1)
    T, _ = adam_update(params, 0.5, (g, gT), moments, 1, cfg)
    expect_vec = before - cfg.lr * g / (np.abs(g) + cfg.eps_adam)
    expect = params.copy()
    expect.set_theta_vector(expect_vec)
    expect.project()
    assert np.max(np.abs(params.theta_vector() -
                         expect.theta_vector())) < 1e-15
    assert T == pytest.approx(0.5 - cfg.lr * gT / (abs(gT) + cfg.eps_adam),
                              abs=1e-15)


def test_adam_hundred_steps_match_scalar_reference():
    # only T moves: theta gradients stay zero, so the T history must equal
    # the textbook scalar recursion
    params = small_params(seed=23)
    cfg = TrainConfig(arch=params.arch, lr=1e-3,
                      lr_halving_period=10 ** 6)
    rng = np.random.default_rng(24)
    grads = rng.standard_normal(100) * 0.1
    moments = AdamMoments.zeros(params.num_parameters + 1)
    T = 0.5
    history = [T]
    for t, g in enumerate(grads, start=1):
        T, moments = adam_update(
            params, T, (np.zeros(params.num_parameters), float(g)),
            moments, t, cfg)
        history.append(T)
    expect = adam_scalar_reference(grads, cfg.lr, cfg.beta1, cfg.beta2,
                                   cfg.eps_adam, x0=0.5)
    assert np.max(np.abs(np.array(history) - expect)) < 1e-12


def test_adam_clamps_time_and_boxes_theta():
    params = small_params(seed=25)
    cfg = TrainConfig(arch=params.arch, lr=0.5, theta_box=0.01)
    moments = AdamMoments.zeros(params.num_parameters + 1)
    g = np.ones(params.num_parameters)
    T, _ = adam_update(params, 0.2, (g, 1.0), moments, 1, cfg)
    assert T == 0.0  # 0.2 - 0.5 clamps at the lower end
    assert np.max(np.abs(params.w.weights)) <= 0.01 + 1e-15


def test_learning_rate_schedule_halves():
    cfg = TrainConfig(lr=4e-4, lr_halving_period=100)
    assert learning_rate(cfg, 1) == 4e-4
    assert learning_rate(cfg, 100) == 4e-4
    assert learning_rate(cfg, 101) == 2e-4
    assert learning_rate(cfg, 201) == 1e-4


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(beta1=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(T_init=2.0)
    with pytest.raises(ConfigError):
        TrainConfig(theta_box=-1.0)


# ------------------------------------------------- stopping-time condition


def test_stopping_condition_zero_at_zero_time():
    rng = np.random.default_rng(26)
    op = make_identity(1, 8, 8)
    batch = make_batch(rng, 2)
    value = stopping_time_condition(batch, 0.0, small_params(), op, 4,
                                    LossFn())
    assert value == 0.0


@pytest.mark.parametrize("op_idx", range(3))
def test_stopping_condition_equals_negative_T_time_gradient(op_idx):
    op = every_op_8x8()[op_idx]
    rng = np.random.default_rng(27 + op_idx)
    params = small_params(seed=28)
    loss = LossFn("squared_l2")
    batch = make_batch(rng, 3, op=op)
    T, S = 0.45, 4
    value = stopping_time_condition(batch, T, params, op, S, loss)
    dT, _ = control_gradients(batch, T, params, op, S, loss)
    assert abs(value + T * dT) / max(abs(value), 1e-12) < 1e-8


def test_stopping_report_scale_bounds_value():
    rng = np.random.default_rng(30)
    op = make_identity(1, 8, 8)
    batch = make_batch(rng, 4)
    value, scale = stopping_time_report(batch, 0.5, small_params(seed=31),
                                        op, 4, LossFn())
    assert scale >= abs(value)


# ---------------------------------------------------------------- train


def tiny_dataset(channels=1, size=16, count=6):
    images = make_synthetic_images(count=count, size=size,
                                   channels=channels, seed=9)
    return Dataset(images=images, patch_size=size)


def tiny_config(**kw):
    base = dict(batch_size=2, iterations=4, lr=1e-3, patch_size=16,
                steps=3, sigma=0.1, seed=7, T_init=0.2,
                arch=TdvArch(scales=2, blocks=1, features=4, channels=1))
    base.update(kw)
    return TrainConfig(**base)


def test_train_zero_iterations_returns_initialization():
    dataset = tiny_dataset()
    op = make_identity(1, 16, 16)
    cfg = tiny_config(iterations=0)
    T, params, log = train(dataset, op, cfg, LossFn())
    assert T == cfg.T_init
    assert log == []
    fresh = init_params(cfg.arch, np.random.default_rng(cfg.seed))
    assert np.array_equal(params.theta_vector(), fresh.theta_vector())


def test_train_reduces_cost_and_is_deterministic(tmp_path):
    dataset = tiny_dataset()
    op = make_identity(1, 16, 16)
    cfg = tiny_config(iterations=30, lr=4e-3)
    loss = LossFn("squared_l2")
    T1, params1, log1 = train(dataset, op, cfg, loss)
    assert log1[-1]["cost"] < log1[0]["cost"]
    T2, params2, log2 = train(dataset, op, cfg, loss)
    assert T1 == T2
    assert np.array_equal(params1.theta_vector(), params2.theta_vector())
    assert all(a == b for a, b in zip(log1, log2))


def test_train_shape_mismatch_rejected():
    dataset = tiny_dataset()
    op = make_identity(1, 8, 8)
    with pytest.raises(ConfigError):
        train(dataset, op, tiny_config(), LossFn())


def test_train_augmentation_is_orbit_member():
    dataset = tiny_dataset()
    cfg = tiny_config()
    # replicate the documented per-sample stream: (seed, iteration, sample)
    rng = np.random.default_rng([cfg.seed, 1, 0])
    drawn = dataset.sample(rng)
    base_rng = np.random.default_rng([cfg.seed, 1, 0])
    base = dataset.crop(base_rng)
    orbit = dihedral_orbit(base)
    assert any(np.array_equal(drawn, member) for member in orbit)


def test_train_writes_log_and_checkpoints(tmp_path):
    dataset = tiny_dataset()
    op = make_identity(1, 16, 16)
    cfg = tiny_config(iterations=4, checkpoint_every=2)
    T, params, log = train(dataset, op, cfg, LossFn(), out_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert "train_log.csv" in names
    assert "checkpoint_000002.tdvc" in names
    assert "checkpoint_000004.tdvc" in names
    assert "checkpoint_final.tdvc" in names
    loaded, T_loaded, meta = load_checkpoint(tmp_path / "checkpoint_final.tdvc")
    assert T_loaded == T
    assert np.array_equal(loaded.theta_vector(), params.theta_vector())
    lines = (tmp_path / "train_log.csv").read_text().strip().split("\n")
    assert lines[0] == "iter,cost,stop_cond,lr,T"
    assert len(lines) == 5


def test_train_aborts_on_nonfinite_cost(tmp_path):
    dataset = tiny_dataset()
    op = make_identity(1, 16, 16)
    cfg = tiny_config()
    params = small_params(seed=1)
    params.set_theta_vector(params.theta_vector() * 1e200)
    with np.errstate(all="ignore"), pytest.raises(NumericError,
                                                  match="iteration 1"):
        train(dataset, op, cfg, LossFn(), params=params, out_dir=tmp_path)
    assert (tmp_path / "abort.tdvc").exists()


def test_train_supplied_params_not_mutated():
    dataset = tiny_dataset()
    op = make_identity(1, 16, 16)
    cfg = tiny_config(iterations=2)
    params = small_params(seed=2)
    before = params.theta_vector()
    train(dataset, op, cfg, LossFn(), params=params)
    assert np.array_equal(params.theta_vector(), before)
