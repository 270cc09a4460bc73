import numpy as np
import pytest

from finestrat import (
    ConfigError,
    CovariateTable,
    EstimandSpec,
    EstimationError,
    ExperimentFrame,
    assignment_component,
    horvitz_thompson_weights,
    score_cate_blp,
    score_clate,
    score_late,
    score_sate,
    solve_gmm,
)


def _frame(d, y, p=0.5, x=None, d_endog=None):
    n = len(d)
    table = CovariateTable(psi=np.zeros((n, 1)), h=None, w=None, x=x, ids=None)
    return ExperimentFrame(covariates=table, d=np.asarray(d), p=p,
                           y=np.asarray(y, dtype=float),
                           d_endog=None if d_endog is None else np.asarray(d_endog, dtype=float))


def test_sate_is_difference_of_means():
    gen = np.random.default_rng(0)
    d = np.tile([1, 0], 30)
    y = gen.standard_normal(60)
    frame = _frame(d, y)
    fit = solve_gmm(frame, score_sate())
    assert fit.theta[0] == pytest.approx(y[d == 1].mean() - y[d == 0].mean(), rel=1e-12)
    hw = horvitz_thompson_weights(frame)
    assert fit.theta[0] == pytest.approx(np.mean(hw * y), rel=1e-12)


def test_sate_constant_effect_with_matched_baselines():
    # pairs share the same control outcome, treated adds exactly 2
    y0 = np.repeat(np.array([0.5, -1.25, 3.0]), 2)
    d = np.tile([1, 0], 3)
    y = y0 + 2.0 * d
    fit = solve_gmm(_frame(d, y), score_sate())
    assert fit.theta[0] == 2.0


def test_cate_with_intercept_only_reduces_to_sate():
    gen = np.random.default_rng(1)
    d = np.tile([1, 0], 25)
    y = gen.standard_normal(50)
    x = np.ones((50, 1))
    f_sate = solve_gmm(_frame(d, y), score_sate())
    f_cate = solve_gmm(_frame(d, y, x=x), score_cate_blp())
    assert f_cate.theta[0] == pytest.approx(f_sate.theta[0], rel=1e-10)


def test_late_equals_wald_ratio_oracle():
    gen = np.random.default_rng(2)
    n = 200
    z = np.tile([1, 0], n // 2)
    compliers = gen.random(n) < 0.6
    d_endog = np.where(z == 1, compliers, 0).astype(float)
    y = gen.standard_normal(n) + d_endog * 1.5
    frame = _frame(z, y, d_endog=d_endog)
    hw = horvitz_thompson_weights(frame)
    oracle = np.mean(hw * y) / np.mean(hw * d_endog)  # direct ratio
    fit = solve_gmm(frame, score_late())
    assert fit.theta[0] == pytest.approx(oracle, rel=1e-10)


def test_clate_full_compliance_matches_cate():
    # with full compliance and arms carrying identical x cross-moments
    # (x duplicated within pairs), the two moment systems coincide exactly
    gen = np.random.default_rng(3)
    n = 80
    d = np.tile([1, 0], n // 2)
    x_half = np.column_stack([np.ones(n // 2), gen.standard_normal(n // 2)])
    x = np.repeat(x_half, 2, axis=0)
    y = gen.standard_normal(n)
    f_cate = solve_gmm(_frame(d, y, x=x), score_cate_blp())
    f_clate = solve_gmm(_frame(d, y, x=x, d_endog=d.astype(float)), score_clate())
    np.testing.assert_allclose(f_clate.theta, f_cate.theta, rtol=1e-8)


def test_clate_full_compliance_intercept_exact():
    gen = np.random.default_rng(30)
    n = 60
    d = np.tile([1, 0], n // 2)
    y = gen.standard_normal(n)
    x = np.ones((n, 1))
    f_cate = solve_gmm(_frame(d, y, x=x), score_cate_blp())
    f_clate = solve_gmm(_frame(d, y, x=x, d_endog=d.astype(float)), score_clate())
    assert f_clate.theta[0] == pytest.approx(f_cate.theta[0], rel=1e-12)


def test_late_recovers_complier_effect_at_scale():
    # oracle: unit effect on compliers, zero otherwise; population value 1
    gen = np.random.default_rng(4)
    n = 10000
    z = np.tile([1, 0], n // 2)
    compliers = gen.random(n) < 0.5
    d_endog = (z * compliers).astype(float)
    y0 = gen.standard_normal(n)
    y = y0 + d_endog * 1.0
    fit = solve_gmm(_frame(z, y, d_endog=d_endog), score_late())
    assert fit.theta[0] == pytest.approx(1.0, abs=0.1)


def test_zero_compliers_singular_jacobian():
    n = 40
    z = np.tile([1, 0], n // 2)
    d_endog = np.zeros(n)
    y = np.random.default_rng(5).standard_normal(n)
    with pytest.raises(EstimationError, match="[Ss]ingular"):
        solve_gmm(_frame(z, y, d_endog=d_endog), score_late())


def test_moment_residual_below_tolerance():
    gen = np.random.default_rng(6)
    n = 60
    d = np.tile([1, 0], n // 2)
    x = np.column_stack([np.ones(n), gen.standard_normal(n), gen.standard_normal(n)])
    y = gen.standard_normal(n) + x[:, 1]
    frame = _frame(d, y, x=x)
    spec = score_cate_blp()
    fit = solve_gmm(frame, spec)
    resid = np.abs(spec.score(frame, fit.theta).mean(axis=0)).max()
    assert resid <= 1e-10
    np.testing.assert_allclose(fit.Pi @ fit.G, -np.eye(3), atol=1e-8)


def test_fd_jacobian_matches_analytic_on_builtins():
    from finestrat.gmm import fd_jacobian

    gen = np.random.default_rng(7)
    n = 50
    d = np.tile([1, 0], n // 2)
    x = np.column_stack([np.ones(n), gen.standard_normal(n)])
    y = gen.standard_normal(n) + 0.5 * x[:, 1]
    d_endog = (d * (gen.random(n) < 0.8)).astype(float)
    frames_specs = [
        (_frame(d, y), score_sate(), np.array([0.3])),
        (_frame(d, y, x=x), score_cate_blp(), np.array([0.1, -0.2])),
        (_frame(d, y, d_endog=d_endog), score_late(), np.array([0.4])),
        (_frame(d, y, x=x, d_endog=d_endog), score_clate(), np.array([0.2, 0.1])),
    ]
    for frame, spec, theta in frames_specs:
        fd = fd_jacobian(lambda t: spec.score(frame, t).mean(axis=0), theta)
        analytic = spec.jacobian(frame, theta)
        np.testing.assert_allclose(fd, analytic, rtol=1e-5, atol=1e-7)


def test_affine_reparameterization_invariance():
    # a linear score g(theta) = A(b - theta) vs g'(psi) = A(b - S psi)
    gen = np.random.default_rng(8)
    for _ in range(5):
        d_t = 3
        A = gen.standard_normal((d_t, d_t)) + np.eye(d_t) * 2
        b = gen.standard_normal(d_t)
        S = gen.standard_normal((d_t, d_t)) + np.eye(d_t) * 2
        n = 30
        noise = gen.standard_normal((n, d_t)) * 0.1
        noise -= noise.mean(axis=0)

        def make(mat):
            def score(frame, theta):
                return (b - mat @ theta)[None, :] @ A.T + noise

            return EstimandSpec(name="lin", dim_theta=d_t, score=score)

        table = CovariateTable(psi=np.zeros((n, 1)), h=None, w=None, x=None, ids=None)
        frame = ExperimentFrame(covariates=table, d=np.tile([1, 0], n // 2), p=0.5)
        fit_id = solve_gmm(frame, make(np.eye(d_t)))
        fit_s = solve_gmm(frame, make(S))
        np.testing.assert_allclose(fit_s.theta, np.linalg.solve(S, fit_id.theta),
                                   rtol=1e-7, atol=1e-9)


def test_over_identified_rejected():
    def score(frame, theta):
        return np.column_stack([frame.y - theta[0], frame.y ** 2 - theta[0]])

    spec = EstimandSpec(name="over", dim_theta=1, score=score)
    frame = _frame(np.tile([1, 0], 10), np.random.default_rng(9).standard_normal(20))
    with pytest.raises(ConfigError, match="exact identification"):
        solve_gmm(frame, spec)


def test_assignment_component_sate_sign_convention():
    gen = np.random.default_rng(10)
    d = np.tile([1, 0], 20)
    y = gen.standard_normal(40)
    frame = _frame(d, y)
    fit = solve_gmm(frame, score_sate())
    contrib = assignment_component(fit)
    hw = horvitz_thompson_weights(frame)
    np.testing.assert_allclose(contrib[:, 0], hw * y - fit.theta[0], rtol=1e-10)
    assert abs(contrib.mean()) < 1e-12


def test_assignment_component_constant_outcome():
    d = np.tile([1, 0], 15)
    frame = _frame(d, np.full(30, 3.0))
    fit = solve_gmm(frame, score_sate())
    contrib = assignment_component(fit)
    hw = horvitz_thompson_weights(frame)
    np.testing.assert_allclose(contrib[:, 0], hw * 3.0, atol=1e-12)
    assert contrib.mean() == pytest.approx(0.0, abs=1e-12)


def test_assignment_component_cate_dense_oracle():
    # oracle: direct dense-algebra evaluation of E_n[xx']^{-1} g_i
    gen = np.random.default_rng(11)
    n = 24
    d = np.tile([1, 0], n // 2)
    x = np.column_stack([np.ones(n), gen.standard_normal(n)])
    y = gen.standard_normal(n)
    frame = _frame(d, y, x=x)
    fit = solve_gmm(frame, score_cate_blp())
    hw = horvitz_thompson_weights(frame)
    gram_inv = np.linalg.inv(x.T @ x / n)
    scores = (hw * y - x @ fit.theta)[:, None] * x
    oracle = scores @ gram_inv.T
    np.testing.assert_allclose(assignment_component(fit), oracle, rtol=1e-9)
