import math
import warnings

import numpy as np
import pytest
from scipy import linalg

from ddnf import autodiff as ad
from ddnf.flow import FlowSpec, init_model
from ddnf.oracles import (SingularMatrixError, StiffnessError, exact_cell_logdet,
                          finite_diff_grad, matrix_exp, mh_sample, rk45_flow, rk45_integrate,
                          slogdet_lu, write_chain_csv)
from ddnf.velocity import VelocitySpec, evaluate, init_field

ROT = np.array([[0.0, -1.0], [1.0, 0.0]])


# --- rk45 ----------------------------------------------------------------


def test_rk45_exponential():
    r = rk45_integrate(lambda z: z, np.array([1.0]), 1.0, rtol=1e-10)
    assert abs(r.z_final[0] - math.e) < 1e-8
    assert r.max_error_estimate <= 1.0


def test_rk45_zero_field_one_step():
    z0 = np.array([0.3, -2.0])
    r = rk45_integrate(lambda z: np.zeros_like(z), z0, 1.0)
    np.testing.assert_array_equal(r.z_final, z0)
    assert r.steps_accepted == 1


def test_rk45_rotation():
    r = rk45_integrate(lambda z: ROT @ z, np.array([1.0, 0.0]), 1.0, rtol=1e-10)
    np.testing.assert_allclose(r.z_final, [math.cos(1), math.sin(1)], rtol=0, atol=1e-8)


def test_rk45_error_scales_with_tolerance():
    exact = np.array([math.cos(1), math.sin(1)])
    errs = [np.linalg.norm(rk45_integrate(lambda z: ROT @ z, np.array([1.0, 0.0]), 1.0,
                                          rtol=rt, atol=rt * 1e-2).z_final - exact)
            for rt in (1e-4, 1e-6)]
    assert errs[1] * 10 <= errs[0]


def test_rk45_batched_matches_pointwise():
    vf = init_field(VelocitySpec(), 0)
    z0 = np.random.default_rng(0).normal(size=(5, 2))
    batch = rk45_integrate(lambda z: evaluate(vf, z), z0, 1.0).z_final
    for i in range(5):
        single = rk45_integrate(lambda z: evaluate(vf, z), z0[i], 1.0).z_final
        np.testing.assert_allclose(batch[i], single, atol=1e-8)


def test_rk45_flow_on_zero_model():
    m = init_model(FlowSpec(blocks=3, velocity=VelocitySpec(zero_init_output=True)), 0)
    z = np.random.default_rng(0).normal(size=(4, 2))
    np.testing.assert_array_equal(rk45_flow(m, z), z)


def test_rk45_stiffness_error():
    # finite-time blow-up forces the step size below 1e-14
    with pytest.raises(StiffnessError):
        rk45_integrate(lambda z: z ** 2, np.array([1.0]), 2.0)


def test_rk45_bad_tolerance():
    with pytest.raises(ValueError):
        rk45_integrate(lambda z: z, np.ones(1), 1.0, rtol=0.0)


def test_rk45_backward_in_time():
    r = rk45_integrate(lambda z: z, np.array([math.e]), -1.0)
    assert abs(r.z_final[0] - 1.0) < 1e-9


# --- determinants --------------------------------------------------------


def test_exact_cell_logdet_examples():
    assert exact_cell_logdet(np.zeros((2, 2)), 0.3) == 0.0
    assert abs(exact_cell_logdet(np.diag([1.0, 2.0]), 0.1) - (math.log(1.1) + math.log(1.2))) < 1e-15
    assert abs(math.log(1.1) + math.log(1.2) - 0.277632) < 1e-6
    ld, sign = exact_cell_logdet(np.diag([-30.0, 0.0]), 0.1, return_sign=True)
    assert abs(ld - math.log(2)) < 1e-15 and sign == -1.0


def test_slogdet_against_numpy():
    rng = np.random.default_rng(0)
    for n in (1, 2, 3, 5, 8):
        for _ in range(10):
            A = rng.normal(size=(n, n))
            s, l = slogdet_lu(A)
            s2, l2 = np.linalg.slogdet(A)
            assert s == s2 and abs(l - l2) < 1e-12


def test_singular_matrix():
    with pytest.raises(SingularMatrixError):
        slogdet_lu(np.array([[1.0, 2.0], [2.0, 4.0]]))


def test_logdet_small_dt_limit():
    rng = np.random.default_rng(1)
    for _ in range(10):
        J = rng.normal(size=(3, 3))
        dt = 1e-5
        assert abs(exact_cell_logdet(J, dt) / (dt * np.trace(J)) - 1) < 0.01


# --- matrix exponential --------------------------------------------------


def test_matrix_exp_zero_and_rotation():
    np.testing.assert_array_equal(matrix_exp(np.zeros((3, 3))), np.eye(3))
    c, s = math.cos(1), math.sin(1)
    np.testing.assert_allclose(matrix_exp(ROT), [[c, -s], [s, c]], rtol=0, atol=1e-15)


def test_matrix_exp_jacobi_formula():
    rng = np.random.default_rng(2)
    for _ in range(20):
        A = rng.normal(size=(3, 3))
        assert abs(np.linalg.det(matrix_exp(A)) / math.exp(np.trace(A)) - 1) < 1e-10


def test_matrix_exp_against_scipy():
    rng = np.random.default_rng(3)
    for _ in range(20):
        A = rng.normal(size=(4, 4))
        A *= rng.uniform(0.1, 10) / np.linalg.norm(A, 2)
        ref = linalg.expm(A)
        assert np.linalg.norm(matrix_exp(A) - ref) <= 1e-12 * np.linalg.norm(ref)


# --- finite differences --------------------------------------------------


def test_finite_diff_examples():
    assert abs(finite_diff_grad(lambda x: x[0] ** 2, np.array([3.0]))[0] - 6.0) < 1e-6
    assert abs(finite_diff_grad(lambda x: np.tanh(x[0]), np.array([0.0]))[0] - 1.0) < 1e-9
    with pytest.raises(ValueError):
        finite_diff_grad(lambda x: x[0], np.zeros(1), h=0.0)


def test_finite_diff_agrees_with_autodiff_on_mlp_loss():
    vf = init_field(VelocitySpec(), 3)
    z = np.random.default_rng(0).normal(size=(8, 2))
    f = lambda p: ad.sum_(ad.square(evaluate(vf, z, params=p)))
    g = ad.grad(f, vf.params)
    fd = finite_diff_grad(lambda p: float(ad.value_of(f(p))), vf.params)
    assert np.linalg.norm(g - fd) <= 1e-5 * np.linalg.norm(g)


# --- metropolis ----------------------------------------------------------


def std_normal(x):
    return -0.5 * float(x @ x)


def test_mh_standard_normal():
    chain = mh_sample(std_normal, [0.0], 100_000, proposal_scale=2.4, burn_in=10_000, seed=0)
    assert -0.05 <= chain.mean[0] <= 0.05
    assert 0.9 <= chain.samples.var() <= 1.1
    assert 0 < chain.acceptance_rate < 1
    assert len(chain.samples) == 90_000


def test_mh_tiny_scale_always_accepts():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        chain = mh_sample(std_normal, [0.0], 1000, proposal_scale=1e-300, seed=0)
    assert chain.acceptance_rate == 1.0
    assert chain.warnings


def test_mh_deterministic():
    a = mh_sample(std_normal, [0.0, 1.0], 2000, seed=4)
    b = mh_sample(std_normal, [0.0, 1.0], 2000, seed=4)
    assert np.array_equal(a.samples, b.samples)


def test_mh_bad_arguments():
    with pytest.raises(ValueError):
        mh_sample(std_normal, [0.0], 10, burn_in=10)
    with pytest.raises(ValueError):
        mh_sample(lambda x: -np.inf, [0.0], 10)


def test_mh_adaptation_reaches_target_acceptance():
    chain = mh_sample(lambda x: -0.5 * float(x @ x) / 0.01, [0.0, 0.0], 5000, proposal_scale=5.0,
                      seed=1, adapt=2000)
    assert 0.15 <= chain.acceptance_rate <= 0.6


@pytest.mark.slow
def test_mh_visits_both_modes():
    # symmetric bimodal target: mixture of N(-1.5, 1) and N(1.5, 1)
    f = lambda x: float(np.logaddexp(-0.5 * (x[0] - 1.5) ** 2, -0.5 * (x[0] + 1.5) ** 2))
    chain = mh_sample(f, [1.5], 1_000_000, proposal_scale=2.4, burn_in=10_000, seed=0)
    assert (chain.samples[:, 0] > 0).mean() >= 0.25
    assert (chain.samples[:, 0] < 0).mean() >= 0.25


def test_write_chain_csv(tmp_path):
    chain = mh_sample(std_normal, [0.0, 0.0], 30, burn_in=10, seed=0)
    write_chain_csv(chain, tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "step,z0,z1" and len(lines) == 21 and lines[1].startswith("10,")
