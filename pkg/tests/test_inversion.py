import numpy as np
import pytest

from forward_bae import ErrorModel
from inversion import (BayesianInversion, Design, pointwise_posterior_variance, posterior_trace,
                       restrict)
from mesh_fem import observe
from numkit import ContractViolation


@pytest.fixture(scope='module')
def error_model(forward):
    rng = np.random.default_rng(0)
    L = 3e-3 * rng.standard_normal((forward.n_s, 3))
    return ErrorModel(eps0=1e-3 * rng.standard_normal(forward.n_s), Gamma_eps=L @ L.T, sigma=forward.sigma)


@pytest.fixture(scope='module')
def full_inversion(forward, m_prior, error_model):
    return BayesianInversion(forward, m_prior, restrict(error_model, Design.full(forward.n_s)))


@pytest.fixture(scope='module')
def data(forward):
    m_true, xi_true = forward.draw(21, 'truth', 0)
    eta = forward.sigma * np.random.default_rng(1).standard_normal(forward.n_s)
    return m_true, forward.forward_full(m_true, xi_true) + eta


def dense_hessian(inversion, lin):
    n = inversion.m_pr.shape[0]
    return np.column_stack([inversion.gn_hessian_apply(lin, e) for e in np.eye(n)])


def test_design_helpers():
    d = Design.from_indices([4, 1], 6)
    np.testing.assert_array_equal(d.active, [1, 4])
    assert d.n_act == 2 and d.n_s == 6
    assert d.with_sensor(0).n_act == 3
    assert d.n_act == 2
    assert Design.empty(5).n_act == 0
    assert Design.full(5).n_act == 5
    with pytest.raises(ValueError):
        Design.from_indices([6], 6)
    with pytest.raises(ValueError):
        Design(np.array([0, 2, 1]))


def test_restricted_weight_matches_padded_inverse(error_model):
    design = Design.from_indices([0, 2, 5], error_model.n_s)
    rl = restrict(error_model, design)
    active = design.active
    expected = np.zeros((error_model.n_s, error_model.n_s))
    expected[np.ix_(active, active)] = np.linalg.inv(error_model.Gamma_nu[np.ix_(active, active)])
    np.testing.assert_allclose(rl.Sigma(), expected, rtol=1e-10, atol=1e-8)
    np.testing.assert_array_equal(rl.eps0_w, error_model.eps0[active])


def test_restrict_rejects_indefinite_covariance():
    model = ErrorModel.from_total(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]), sigma=0.1)
    with pytest.raises(ContractViolation):
        restrict(model, Design.full(2))


def test_restrict_checks_sizes(error_model):
    with pytest.raises(ValueError):
        restrict(error_model, Design.full(error_model.n_s + 1))


def test_cost_splits_misfit_and_prior(full_inversion, forward, data, error_model):
    _, y = data
    m = full_inversion.m_pr + 0.1
    misfit, prior_cost = full_inversion.cost(m, y)
    r = forward.forward_approx(m) + error_model.eps0 - y
    assert misfit == pytest.approx(0.5 * r @ np.linalg.solve(error_model.Gamma_nu, r), rel=1e-8)
    assert prior_cost == pytest.approx(0.5 * full_inversion.prior.cm_inner(np.full_like(m, 0.1),
                                                                          np.full_like(m, 0.1)))


def test_gradient_matches_finite_difference(full_inversion, data):
    _, y = data
    rng = np.random.default_rng(2)
    m = full_inversion.m_pr + 0.2 * rng.standard_normal(full_inversion.m_pr.shape)
    dm = rng.standard_normal(m.shape)
    h = 1e-4
    total = lambda x: sum(full_inversion.cost(x, y))
    fd = (total(m + h * dm) - total(m - h * dm)) / (2 * h)
    assert full_inversion.gradient(m, y) @ dm == pytest.approx(fd, rel=1e-4)


def test_gn_hessian_is_symmetric_and_psd(full_inversion, data):
    lin = full_inversion.linearize(full_inversion.m_pr + 0.1, data[1])
    H = dense_hessian(full_inversion, lin)
    np.testing.assert_allclose(H, H.T, atol=1e-10 * np.max(np.abs(H)))
    assert np.min(np.linalg.eigvalsh(0.5 * (H + H.T))) > -1e-10 * np.max(np.abs(H))
    assert np.linalg.matrix_rank(H, tol=1e-8 * np.max(np.abs(H))) <= full_inversion.rl.n_act


def test_gn_hessian_equals_full_hessian_for_zero_residual(full_inversion, forward, error_model):
    rng = np.random.default_rng(3)
    m = full_inversion.m_pr + 0.1 * rng.standard_normal(full_inversion.m_pr.shape)
    u = forward.state(forward.system(m))
    y = observe(u, forward.sensors) + error_model.eps0
    dm = rng.standard_normal(m.shape)
    h = 1e-4
    fd = (full_inversion.gradient(m + h * dm, y) - full_inversion.gradient(m - h * dm, y)) / (2 * h)
    lin = full_inversion.linearize(m, y)
    exact = full_inversion.gn_hessian_apply(lin, dm, include_prior=True)
    np.testing.assert_allclose(exact, fd, rtol=1e-4, atol=1e-6 * np.max(np.abs(exact)))


def test_map_solve_converges_and_reduces_cost(full_inversion, data):
    m_true, y = data
    result = full_inversion.solve_map(y)
    assert result.converged
    assert result.final_gradient_norm <= max(1e-9, 1e-6 * result.initial_gradient_norm)
    start = sum(full_inversion.cost(full_inversion.m_pr, y))
    assert sum(result.cost_terms) < start
    assert result.m_map.support == 'bottom'


def test_map_solve_warm_start_agrees(full_inversion, data):
    _, y = data
    cold = full_inversion.solve_map(y)
    warm = full_inversion.solve_map(y, init=cold.m_map)
    np.testing.assert_allclose(warm.m_map.values, cold.m_map.values, rtol=1e-4, atol=1e-6)


def test_empty_design_returns_prior_mean(forward, m_prior, error_model, data):
    inversion = BayesianInversion(forward, m_prior, restrict(error_model, Design.empty(forward.n_s)))
    result = inversion.solve_map(data[1])
    assert result.converged and result.iterations == 0
    np.testing.assert_allclose(result.m_map.values, m_prior.mean.values)
    posterior = inversion.posterior_lowrank(result)
    assert posterior.rank_used == 0
    assert posterior.posterior_trace() == pytest.approx(m_prior.trace())


def test_low_rank_posterior_matches_dense(full_inversion, data):
    result = full_inversion.solve_map(data[1])
    posterior = full_inversion.posterior_lowrank(result, r=full_inversion.rl.n_act)
    lin = full_inversion.linearize(result.m_map)
    H = dense_hessian(full_inversion, lin)
    prior = full_inversion.prior
    C, P, M = prior.covariance_matrix(), prior.precision_matrix(), prior.M.toarray()

    expected = np.sort(np.real(np.linalg.eigvals(C @ H)))[::-1][:posterior.eigpairs.values.size]
    np.testing.assert_allclose(posterior.eigpairs.values, expected, rtol=1e-6, atol=1e-8 * expected[0])

    C_post = np.linalg.inv(H + P)
    assert posterior_trace(posterior) == pytest.approx(np.trace(C_post @ M), rel=1e-6)
    np.testing.assert_allclose(pointwise_posterior_variance(posterior).values, np.diag(C_post), rtol=1e-5)
    assert posterior.trace_reduction() > 0.0
    assert posterior_trace(posterior) < prior.trace()


def test_posterior_rank_is_capped(full_inversion, data):
    result = full_inversion.solve_map(data[1])
    assert full_inversion.posterior_lowrank(result, r=3).eigpairs.values.size == 3
    with pytest.raises(ValueError):
        full_inversion.posterior_lowrank(result, r=-1)


def test_data_length_is_checked(full_inversion):
    with pytest.raises(ValueError):
        full_inversion.solve_map(np.zeros(3))


def test_misfit_matches_cost_term(full_inversion, data):
    m = full_inversion.m_pr + 0.05
    assert full_inversion.misfit(m, data[1]) == pytest.approx(full_inversion.cost(m, data[1])[0], rel=1e-12)


def test_warm_start_at_optimum_keeps_cold_tolerance(full_inversion, data):
    _, y = data
    cold = full_inversion.solve_map(y)
    warm = full_inversion.solve_map(y, init=cold.m_map)
    assert warm.converged and warm.iterations == 0
    assert warm.reference_gradient_norm == pytest.approx(cold.initial_gradient_norm, rel=1e-12)
    assert warm.initial_gradient_norm == pytest.approx(cold.final_gradient_norm, rel=1e-8)
    np.testing.assert_array_equal(warm.m_map.values, cold.m_map.values)


def test_warm_start_near_optimum_converges(full_inversion, data):
    _, y = data
    cold = full_inversion.solve_map(y)
    nudge = 1e-3 * np.random.default_rng(4).standard_normal(cold.m_map.values.shape)
    warm = full_inversion.solve_map(y, init=cold.m_map.values + nudge)
    assert warm.converged
    assert warm.final_gradient_norm <= max(1e-9, 1e-6 * cold.initial_gradient_norm)
    np.testing.assert_allclose(warm.m_map.values, cold.m_map.values, rtol=1e-4, atol=1e-6)


def test_given_reference_norm_sets_tolerance(full_inversion, data):
    _, y = data
    result = full_inversion.solve_map(y, g_ref=1e12)
    assert result.converged and result.iterations == 0
    assert result.reference_gradient_norm == 1e12


@pytest.mark.parametrize('point', [0, 1, 2])
def test_gradient_matches_central_differences_in_five_directions(full_inversion, data, point):
    _, y = data
    rng = np.random.default_rng(30 + point)
    m = full_inversion.m_pr + 0.3 * rng.standard_normal(full_inversion.m_pr.shape)
    g = full_inversion.gradient(m, y)
    total = lambda x: sum(full_inversion.cost(x, y))
    h = 1e-4
    for dm in rng.standard_normal((5, m.size)):
        fd = (total(m + h * dm) - total(m - h * dm)) / (2 * h)
        assert g @ dm == pytest.approx(fd, rel=1e-5, abs=1e-9 * np.linalg.norm(g) * np.linalg.norm(dm))


def test_posterior_trace_shrinks_along_nested_designs(forward, m_prior, error_model):
    m_hat = m_prior.mean.values + 0.2 * np.random.default_rng(8).standard_normal(m_prior.dimension)
    P, M = m_prior.precision_matrix(), m_prior.M.toarray()
    traces = []
    active = []
    for j in [4, 0, 8, 2, 6]:
        active.append(j)
        inversion = BayesianInversion(forward, m_prior, restrict(error_model, Design.from_indices(active, forward.n_s)))
        H = dense_hessian(inversion, inversion.linearize(m_hat))
        traces.append(np.trace(np.linalg.solve(H + P, M)))
    assert traces[0] < m_prior.trace()
    assert np.all(np.diff(traces) <= 1e-12 * traces[0])
