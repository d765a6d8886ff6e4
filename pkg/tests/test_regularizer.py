"""Energy, gradient, curvature, invariances, parameter accounting, and
checkpoints of the multiscale regularizer."""

import numpy as np
import pytest

from oracles import fd_gradient, rel_err
from tdv.autodiff import Tape
from tdv.errors import ConfigError
from tdv.regularizer import (
    TdvArch,
    bound_CR,
    energy_node,
    grad_node,
    init_params,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
    tdv_energy,
    tdv_energy_batch,
    tdv_grad,
    tdv_hvp,
)

rng = np.random.default_rng(314)


def small_params(scales=2, blocks=1, features=4, channels=1, **kw):
    arch = TdvArch(scales=scales, blocks=blocks, features=features,
                   channels=channels, **kw)
    return arch, init_params(arch, np.random.default_rng(5))


@pytest.mark.parametrize("scales,blocks,features", [(2, 1, 4), (3, 3, 8)])
def test_gradient_matches_fd(scales, blocks, features):
    arch, params = small_params(scales, blocks, features)
    x = rng.standard_normal((1, 8, 8))
    g = tdv_grad(x, params)
    fd = fd_gradient(lambda v: tdv_energy(v.reshape(1, 8, 8), params),
                     x.ravel())
    assert rel_err(g.ravel(), fd) < 1e-4


@pytest.mark.parametrize("potential", ["identity", "log_student_t", "ln_cosh"])
def test_gradient_matches_fd_all_potentials(potential):
    arch, params = small_params(potential=potential)
    x = rng.standard_normal((1, 8, 8))
    g = tdv_grad(x, params)
    fd = fd_gradient(lambda v: tdv_energy(v.reshape(1, 8, 8), params),
                     x.ravel())
    assert rel_err(g.ravel(), fd) < 1e-4


def test_energy_invariant_to_intensity_shift():
    arch, params = small_params(scales=3, blocks=2, features=4)
    x = rng.standard_normal((1, 12, 12))
    base = tdv_energy(x, params)
    scale = max(1.0, abs(base))
    for shift in (-10.0, -1.0, 0.123, 5.0, 10.0):
        assert abs(tdv_energy(x + shift, params) - base) < 1e-10 * scale


def test_hvp_symmetric_and_matches_fd():
    arch, params = small_params()
    x = rng.standard_normal((1, 8, 8))
    p = rng.standard_normal(x.shape)
    q = rng.standard_normal(x.shape)
    Hp = tdv_hvp(x, params, p)
    Hq = tdv_hvp(x, params, q)
    lhs, rhs = np.vdot(q, Hp), np.vdot(p, Hq)
    assert abs(lhs - rhs) < 1e-9 * max(1.0, abs(lhs))

    h = 1e-4
    fd = (tdv_grad(x + h * p, params) - tdv_grad(x - h * p, params)) / (2 * h)
    assert rel_err(Hp, fd) < 1e-4


def test_parameter_count_closed_form_vs_actual():
    for dims in [(2, 1, 4, 1), (3, 2, 8, 1), (2, 3, 4, 3)]:
        scales, blocks, features, channels = dims
        arch = TdvArch(scales=scales, blocks=blocks, features=features,
                       channels=channels)
        params = init_params(arch, rng)
        assert params.num_parameters == parameter_count(arch)


def test_parameter_count_published_configs():
    gray = parameter_count(TdvArch(scales=3, blocks=3, features=32,
                                   channels=1))
    color = parameter_count(TdvArch(scales=3, blocks=3, features=32,
                                    channels=3))
    assert color - gray == 576
    assert abs(gray - 387394) <= 2
    assert abs(color - 387970) <= 2


def test_zero_mean_constraint_after_init_and_project():
    arch, params = small_params()
    sums = params.K.weights.sum(axis=(1, 2, 3))
    assert np.max(np.abs(sums)) < 1e-15
    params.K.weights = params.K.weights + 0.3
    params.project()
    sums = params.K.weights.sum(axis=(1, 2, 3))
    assert np.max(np.abs(sums)) < 1e-15


def test_residual_unit_count_per_block():
    # 2a-1 residual units per block: a on the way down, a-1 on the way up
    for scales in (1, 2, 3):
        arch = TdvArch(scales=scales, blocks=2, features=4, channels=1)
        params = init_params(arch, rng)
        for blk in params.blocks:
            assert len(blk.res_down) == scales
            assert len(blk.res_up) == scales - 1
            assert len(blk.down) == scales - 1
            assert len(blk.up) == scales - 1


def test_batch_energies_sum_to_total():
    arch, params = small_params()
    xb = rng.standard_normal((4, 1, 9, 11))
    per = tdv_energy_batch(xb, params)
    assert per.shape == (4,)
    assert abs(per.sum() - tdv_energy(xb, params)) < 1e-10 * max(
        1.0, abs(per.sum()))
    for i in range(4):
        assert abs(per[i] - tdv_energy(xb[i], params)) < 1e-10


def test_rejects_too_small_input():
    arch = TdvArch(scales=4, blocks=1, features=4, channels=1)
    params = init_params(arch, rng)
    with pytest.raises(ConfigError):
        tdv_energy(rng.standard_normal((1, 6, 6)), params)


def test_rejects_channel_mismatch():
    arch, params = small_params(channels=3)
    with pytest.raises(ConfigError):
        tdv_energy(rng.standard_normal((1, 8, 8)), params)


def test_theta_vector_roundtrip():
    arch, params = small_params()
    vec = params.theta_vector()
    assert vec.size == params.num_parameters
    other = init_params(arch, np.random.default_rng(77))
    other.set_theta_vector(vec)
    x = rng.standard_normal((1, 8, 8))
    assert tdv_energy(x, other) == tdv_energy(x, params)


def test_gradient_bound_holds_on_random_images():
    arch, params = small_params(scales=2, blocks=1, features=4)
    hw = (9, 11)  # odd extents exercise the pad/crop path
    bound = bound_CR(params, hw)
    worst = 0.0
    sampler = np.random.default_rng(8)
    for _ in range(500):
        mag = 10.0 ** sampler.uniform(-1, 2)
        x = sampler.standard_normal((1, *hw)) * mag
        worst = max(worst, float(np.linalg.norm(tdv_grad(x, params))))
    assert worst <= bound


def test_outer_grad_primitive_second_order_vs_fd():
    # d<cot, grad R(x)> / dtheta through the registered primitive
    arch, params = small_params()
    x = rng.standard_normal((1, 1, 8, 8))
    cot = rng.standard_normal(x.shape)

    def objective(pv):
        tape = Tape()
        xn = tape.leaf(x)
        g = grad_node(tape, xn, None, pv)
        return float(tape.vdot(g, cot).value)

    tape = Tape()
    xn = tape.leaf(x)
    tn = [tape.leaf(k.weights) for _, k in params.named_kernels()]
    obj = tape.vdot(grad_node(tape, xn, tn, params), cot)
    grads = tape.backward(obj, want=[xn] + tn)

    h = 1e-5
    for pick in (0, 2, len(tn) - 1):
        kern = params.named_kernels()[pick][1]
        direction = rng.standard_normal(kern.weights.shape)

        def shifted(eps):
            pc = params.copy()
            pc.named_kernels()[pick][1].weights += eps * direction
            return objective(pc)

        fd = (shifted(h) - shifted(-h)) / (2 * h)
        ad = float(np.vdot(grads[tn[pick]], direction))
        assert abs(ad - fd) < 1e-4 * max(1.0, abs(fd))

    # image side must equal the Hessian-vector product
    v = rng.standard_normal(x.shape)
    tape2 = Tape()
    xn2 = tape2.leaf(x)
    obj2 = tape2.vdot(grad_node(tape2, xn2, None, params), cot)
    gx = tape2.backward(obj2, want=[xn2])[xn2]
    hv = tdv_hvp(np.moveaxis(x, 1, 0), params, np.moveaxis(cot, 1, 0))
    assert rel_err(gx, np.moveaxis(hv, 1, 0)) < 1e-10


def test_outer_energy_primitive_gradient():
    arch, params = small_params()
    x = rng.standard_normal((1, 1, 8, 8))
    tape = Tape()
    xn = tape.leaf(x)
    en = energy_node(tape, xn, None, params)
    g = tape.backward(en, want=[xn])[xn]
    direct = tdv_grad(np.moveaxis(x, 1, 0), params)
    assert rel_err(g, np.moveaxis(direct, 1, 0)) < 1e-13


def test_checkpoint_roundtrip(tmp_path):
    arch, params = small_params(scales=2, blocks=2, features=4)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params, 0.75, meta={"iterations": "120"})
    loaded, T, meta = load_checkpoint(path)
    assert T == 0.75
    assert meta["iterations"] == "120"
    assert loaded.arch == params.arch
    x = rng.standard_normal((1, 8, 8))
    assert tdv_energy(x, loaded) == tdv_energy(x, params)


def test_admissibility_predicates():
    arch = TdvArch(scales=3, blocks=1, features=4, channels=1)
    assert arch.admissible(8, 8)
    assert not arch.admissible(3, 8)
    assert arch.strict_admissible(12, 12)
    assert not arch.strict_admissible(8, 8)
