import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddnf import autodiff as ad
from ddnf.oracles import finite_diff_jacobian
from ddnf.velocity import (VelocitySpec, evaluate, init_field, jacobian, jvp, linear_field,
                           magnitude_bound)

ROT = np.array([[0.0, -1.0], [1.0, 0.0]])


def test_zero_init_output_is_zero_everywhere():
    spec = VelocitySpec(zero_init_output=True)
    for seed in range(5):
        vf = init_field(spec, seed)
        z = np.random.default_rng(seed).normal(size=(50, 2)) * 10
        assert np.all(evaluate(vf, z) == 0.0)
    np.testing.assert_array_equal(evaluate(init_field(spec, 0), np.array([5.0, -3.0])), [0.0, 0.0])


def test_init_is_deterministic_and_seed_dependent():
    spec = VelocitySpec()
    assert np.array_equal(init_field(spec, 7).params, init_field(spec, 7).params)
    assert not np.array_equal(init_field(spec, 7).params, init_field(spec, 8).params)


def test_init_range():
    vf = init_field(VelocitySpec(hidden=(4, 3), init_scale=0.5), 0)
    for W, b in vf.layers():
        bound = 0.5 / np.sqrt(W.shape[1])
        assert np.all(np.abs(W) <= bound) and np.all(np.abs(b) <= bound)


@pytest.mark.parametrize("hidden", [(0,), (2, 0)])
def test_zero_width_layer_rejected(hidden):
    with pytest.raises(ValueError):
        VelocitySpec(hidden=hidden)


def test_layer_widths():
    spec = VelocitySpec(dim=3, hidden=(5, 4), context_dim=2)
    assert spec.widths == [5, 5, 4, 3]
    vf = init_field(spec, 0)
    assert [W.shape for W, _ in vf.layers()] == [(5, 5), (4, 5), (3, 4)]


def test_linear_field_eval_and_jacobian():
    vf = linear_field(ROT)
    np.testing.assert_array_equal(evaluate(vf, np.array([1.0, 0.0])), [0.0, 1.0])
    np.testing.assert_array_equal(jacobian(vf, np.array([0.3, 0.7])), ROT)


def test_zero_field_jacobian():
    vf = init_field(VelocitySpec(zero_init_output=True), 3)
    assert np.all(jacobian(vf, np.array([0.1, 2.0])) == 0.0)


def test_eval_is_pure():
    vf = init_field(VelocitySpec(), 4)
    z = np.array([0.4, -1.1])
    assert np.array_equal(evaluate(vf, z), evaluate(vf, z))


def test_params_are_read_only():
    vf = init_field(VelocitySpec(), 0)
    with pytest.raises(ValueError):
        vf.params[0] = 1.0


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(0)
    for seed in range(10):
        vf = init_field(VelocitySpec(), seed)
        z = rng.normal(size=2)
        J = jacobian(vf, z)
        fd = finite_diff_jacobian(lambda x: evaluate(vf, x), z)
        assert np.linalg.norm(J - fd) <= 1e-5 * np.linalg.norm(J)


def test_batched_jacobian_matches_pointwise():
    vf = init_field(VelocitySpec(hidden=(3, 4)), 2)
    z = np.random.default_rng(1).normal(size=(6, 2))
    Jb = jacobian(vf, z)
    for i in range(6):
        np.testing.assert_allclose(Jb[i], jacobian(vf, z[i]), rtol=0, atol=1e-15)


@settings(deadline=None, max_examples=30)
@given(st.integers(0, 10_000))
def test_jacobian_consistent_with_jvp(seed):
    rng = np.random.default_rng(seed)
    vf = init_field(VelocitySpec(hidden=(3, 3)), seed)
    z, w = rng.normal(size=(2, 2))
    np.testing.assert_allclose(jacobian(vf, z) @ w, jvp(vf, z, w), rtol=0, atol=1e-12)


@settings(deadline=None, max_examples=30)
@given(st.integers(0, 10_000))
def test_magnitude_bound_holds(seed):
    rng = np.random.default_rng(seed)
    vf = init_field(VelocitySpec(init_scale=3.0), seed)
    z = rng.normal(size=(200, 2)) * 20
    assert np.all(np.linalg.norm(evaluate(vf, z), axis=-1) <= magnitude_bound(vf) + 1e-12)


def test_context_checks():
    vf = init_field(VelocitySpec(context_dim=3), 0)
    with pytest.raises(ValueError):
        evaluate(vf, np.zeros(2))
    with pytest.raises(ValueError):
        evaluate(vf, np.zeros(2), np.zeros(2))
    plain = init_field(VelocitySpec(), 0)
    with pytest.raises(ValueError):
        evaluate(plain, np.zeros(2), np.zeros(3))
    assert evaluate(vf, np.zeros((4, 2)), np.ones(3)).shape == (4, 2)


def test_wrong_point_dimension():
    with pytest.raises(ValueError):
        evaluate(init_field(VelocitySpec(), 0), np.zeros(3))


def test_grad_through_field_parameters():
    # energy-style scalar of a random 2-2-2 MLP output, gradient w.r.t. the input point
    from ddnf.oracles import finite_diff_grad
    from ddnf.targets import energy
    rng = np.random.default_rng(9)
    for seed in range(5):
        vf = init_field(VelocitySpec(), seed)
        x = rng.normal(size=2)
        f = lambda z: energy("u1", evaluate(vf, z))
        g = ad.grad(f, x)
        fd = finite_diff_grad(lambda z: float(ad.value_of(f(z))), x)
        assert np.linalg.norm(g - fd) <= 1e-5 * np.linalg.norm(g)
