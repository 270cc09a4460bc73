"""Imbalance statistics, acceptance regions, and the accept/reject loop.

A region decides accept/reject from either the standardized mean-difference
statistic T = sqrt(n) * (mean_1(h) - mean_0(h)) or, for criteria built on
refitted models (propensity, within-arm moment fits), from the full
assignment vector. Stat-based regions are evaluated on whole batches of
candidate draws at once, which keeps long rejection loops cheap.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy import stats as _sstats
from scipy.special import expit

from .core import (
    ConfigError,
    EstimationError,
    ExperimentFrame,
    SingularityError,
    as_generator,
)
from .gmm import fd_jacobian, newton_root
from .randomize import (
    AssignmentDraw,
    assignment_matrix_from_treated,
    treated_units_batch,
)


@dataclass(frozen=True)
class ImbalanceStat:
    kind: str
    value: np.ndarray | float
    raw: np.ndarray | None = None
    extra: dict | None = None


def within_tuple_demean(v, partition):
    """Subtract each unit's group mean; group sums of the output vanish."""
    v = np.asarray(v, dtype=np.float64)
    squeeze = v.ndim == 1
    if squeeze:
        v = v[:, None]
    out = np.empty_like(v)
    groups = partition.groups
    vg = v[groups]
    out[groups.ravel()] = (vg - vg.mean(axis=1, keepdims=True)).reshape(-1, v.shape[1])
    return out[:, 0] if squeeze else out


def _arm_mean_diff(x, d):
    return x[d == 1].mean(axis=0) - x[d == 0].mean(axis=0)


def _finite_sample_sigma(x, partition, p):
    """Var(D)^{-1} * (k/(k-1)) * E_n[xcheck xcheck'] on demeaned columns."""
    xc = within_tuple_demean(x, partition)
    k = partition.k
    vard = p * (1.0 - p)
    return (xc.T @ xc) / x.shape[0] * (k / (k - 1.0)) / vard


def mahalanobis_stat(frame, partition, x=None):
    """Quadratic balance statistic n * diff' Sigma_n^{-1} diff for the arm
    mean difference of the balance covariates; approximately chi-square with
    dim(x) degrees of freedom under pure within-group randomization."""
    if x is None:
        x = frame.covariates.h
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[1] == 0:
        raise ConfigError("no balance covariates (d_h = 0)")
    sigma = _finite_sample_sigma(x, partition, frame.p)
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise SingularityError(
            "balance covariance matrix is singular; remove duplicated or "
            "collinear balance columns"
        ) from None
    diff = _arm_mean_diff(x, frame.d)
    z = np.linalg.solve(chol, diff)
    m = float(frame.n * (z @ z))
    return ImbalanceStat(kind="mahalanobis", value=m, raw=np.sqrt(frame.n) * diff)


def chi2_threshold(r, alpha):
    """Threshold eps^2 such that a chi-square(r) variable lands below it
    with probability alpha; the expected number of draws is about 1/alpha."""
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    if alpha > 1.0 - 1e-6:
        raise ConfigError("alpha too close to 1; threshold would be unbounded")
    return float(_sstats.chi2.ppf(alpha, df=r))


def _conjugate_exponent(p):
    if p == 1:
        return np.inf
    if np.isinf(p):
        return 1.0
    if p < 1:
        raise ConfigError(f"exponent p must lie in [1, inf], got {p}")
    return p / (p - 1.0)


def _rowwise_norm(z, q):
    if np.isinf(q):
        return np.abs(z).max(axis=1)
    if q == 1:
        return np.abs(z).sum(axis=1)
    return (np.abs(z) ** q).sum(axis=1) ** (1.0 / q)


def polar_penalty(x, gamma_bar, U, p=2.0):
    """Worst-case projected imbalance sup over the coefficient set
    gamma_bar + U * (unit p-ball): equals |x'gamma_bar| + |U'x|_q with q the
    conjugate exponent."""
    x = np.asarray(x, dtype=np.float64)
    gamma_bar = np.asarray(gamma_bar, dtype=np.float64)
    U = np.asarray(U, dtype=np.float64)
    _check_invertible(U, "U")
    q = _conjugate_exponent(p)
    return float(np.abs(x @ gamma_bar) + _rowwise_norm((U.T @ x)[None, :], q)[0])


def _check_invertible(U, label):
    sv = np.linalg.svd(U, compute_uv=False)
    if sv[-1] <= 1e-12 * max(sv[0], 1.0):
        raise SingularityError(f"{label} matrix is singular")


# ---------------------------------------------------------------------------
# acceptance regions


class _StatBound:
    """Penalty evaluator for regions that are functions of the balance
    statistic T = sqrt(n)(mean_1 - mean_0)."""

    needs_assignment = False

    def __init__(self, penalty_batch, threshold, stats_matrix=None):
        self._penalty_batch = penalty_batch
        self.threshold = threshold
        self.stats_matrix = stats_matrix

    def penalty_stats(self, t_batch):
        return self._penalty_batch(np.atleast_2d(t_batch))


class _AssignBound:
    needs_assignment = True

    def __init__(self, penalty_assignment, threshold):
        self.penalty_assignment = penalty_assignment
        self.threshold = threshold


class AcceptanceRegion:
    """Base class: a symmetric accept/reject rule on the imbalance statistic."""

    shape = "abstract"

    def bind(self, h, partition, p):
        raise NotImplementedError

    def population(self, var_zh):
        """Evaluator for the limiting statistic with covariance var_zh."""
        raise ConfigError(f"region {self.shape!r} has no population analog")

    def with_threshold(self, threshold):
        raise NotImplementedError

    def to_dict(self):
        raise ConfigError(f"region {self.shape!r} is not JSON-serializable")


@dataclass(frozen=True)
class FullSpaceRegion(AcceptanceRegion):
    """Accept every draw (pure within-group randomization)."""

    shape = "none"

    def bind(self, h, partition, p):
        return _StatBound(lambda T: np.zeros(T.shape[0]), np.inf)

    def population(self, var_zh):
        return _StatBound(lambda T: np.zeros(T.shape[0]), np.inf)

    def to_dict(self):
        return {"shape": "none"}


@dataclass(frozen=True)
class MahalanobisRegion(AcceptanceRegion):
    """Ellipsoidal rule: accept when the quadratic statistic is at most
    eps2; calibrated from a chi-square quantile when alpha is given."""

    alpha: float | None = None
    eps2: float | None = None

    shape = "ellipsoid-mahalanobis"

    def __post_init__(self):
        if self.alpha is None and self.eps2 is None:
            raise ConfigError("supply alpha or eps2 for the quadratic region")

    def _threshold(self, r):
        if self.eps2 is not None:
            if self.eps2 <= 0:
                raise ConfigError("eps2 must be positive")
            return float(self.eps2)
        return chi2_threshold(r, self.alpha)

    def _bound_from_sigma(self, sigma, r):
        try:
            chol = np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError:
            raise SingularityError(
                "balance covariance matrix is singular; remove duplicated or "
                "collinear balance columns"
            ) from None

        def penalty(T):
            z = np.linalg.solve(chol, T.T)
            return np.einsum("ib,ib->b", z, z)

        return _StatBound(penalty, self._threshold(r))

    def bind(self, h, partition, p):
        if h.shape[1] == 0:
            raise ConfigError("quadratic region needs balance covariates (d_h = 0)")
        sigma = _finite_sample_sigma(h, partition, p)
        return self._bound_from_sigma(sigma, h.shape[1])

    def population(self, var_zh):
        return self._bound_from_sigma(var_zh, var_zh.shape[0])

    def with_threshold(self, threshold):
        return MahalanobisRegion(alpha=None, eps2=threshold)

    def to_dict(self):
        d = {"shape": self.shape}
        if self.alpha is not None:
            d["alpha"] = self.alpha
        if self.eps2 is not None:
            d["eps2"] = self.eps2
        return d


@dataclass(frozen=True)
class PolarRegion(AcceptanceRegion):
    """Minimax rule: accept when the worst-case projected imbalance over the
    coefficient belief set gamma_bar + U * (unit p-ball) is at most eps."""

    gamma_bar: np.ndarray
    U: np.ndarray
    p_exponent: float = 2.0
    eps: float = 1.0
    shape: str = "polar"

    def __post_init__(self):
        g = np.asarray(self.gamma_bar, dtype=np.float64).ravel()
        U = np.asarray(self.U, dtype=np.float64)
        if U.shape != (g.size, g.size):
            raise ConfigError(f"U must be {g.size}x{g.size}, got {U.shape}")
        _check_invertible(U, "U")
        _conjugate_exponent(self.p_exponent)
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        object.__setattr__(self, "gamma_bar", g)
        object.__setattr__(self, "U", U)

    @classmethod
    def ball(cls, dim, eps):
        """Pure Euclidean ball |T|_2 <= eps."""
        return cls(gamma_bar=np.zeros(dim), U=np.eye(dim), p_exponent=2.0, eps=eps, shape="ball")

    @classmethod
    def rectangle(cls, a, b, eps):
        """Box beliefs prod_j [a_j, b_j]; penalty
        |x'(a+b)/2| + (1/2) sum_j |x_j| (b_j - a_j)."""
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if np.any(b <= a):
            raise ConfigError("rectangle needs b > a coordinatewise")
        return cls(
            gamma_bar=(a + b) / 2.0,
            U=np.diag((b - a) / 2.0),
            p_exponent=np.inf,
            eps=eps,
            shape="rectangle-polar",
        )

    def penalty(self, x):
        q = _conjugate_exponent(self.p_exponent)
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.abs(x @ self.gamma_bar) + _rowwise_norm(x @ self.U, q)

    def _bound(self, dim):
        if dim != self.gamma_bar.size:
            raise ConfigError(
                f"region built for {self.gamma_bar.size} balance covariates, got {dim}"
            )
        return _StatBound(self.penalty, self.eps)

    def bind(self, h, partition, p):
        return self._bound(h.shape[1])

    def population(self, var_zh):
        return self._bound(var_zh.shape[0])

    def with_threshold(self, threshold):
        return replace(self, eps=threshold)

    def to_dict(self):
        return {
            "shape": self.shape,
            "gamma_bar": self.gamma_bar.tolist(),
            "U": self.U.tolist(),
            "p": None if np.isinf(self.p_exponent) else self.p_exponent,
            "eps": self.eps,
        }


def pilot_wald_region(gamma_pilot, sigma_pilot, m, alpha, eps):
    """Polar region for a Wald-ellipse belief set estimated from a pilot of
    size m: penalty |x'gamma_pilot| + sqrt(c_alpha/m) |sigma^{1/2} x|_2.
    The region expands as the pilot grows."""
    gamma_pilot = np.asarray(gamma_pilot, dtype=np.float64).ravel()
    sigma_pilot = np.asarray(sigma_pilot, dtype=np.float64)
    if m < 1:
        raise ConfigError("pilot size m must be >= 1")
    evals, evecs = np.linalg.eigh((sigma_pilot + sigma_pilot.T) / 2.0)
    if evals.min() < -1e-10 * max(evals.max(), 1.0):
        raise ConfigError("pilot covariance must be positive semidefinite")
    root = evecs @ np.diag(np.sqrt(np.clip(evals, 0.0, None))) @ evecs.T
    c_alpha = float(_sstats.chi2.ppf(1.0 - alpha, df=gamma_pilot.size))
    U = np.sqrt(c_alpha / m) * root
    return PolarRegion(gamma_bar=gamma_pilot, U=U, p_exponent=2.0, eps=eps, shape="pilot-wald")


@dataclass(frozen=True)
class PropensityRegion(AcceptanceRegion):
    """Accept when the fitted propensity model is nearly flat:
    n * E_n[(p - L(x'beta))^2] <= eps2. Refit on every candidate draw."""

    eps2: float
    link: str = "logit"
    add_intercept: bool = True

    shape = "propensity-threshold"

    def bind(self, h, partition, p):
        if h.shape[1] == 0:
            raise ConfigError("propensity region needs balance covariates (d_h = 0)")
        X = np.column_stack([np.ones(h.shape[0]), h]) if self.add_intercept else h

        def penalty(d):
            # separation means covariates perfectly predict the draw: treat
            # as maximal imbalance rather than aborting the loop
            try:
                return propensity_stat(d, X, p=p, link=self.link).value
            except EstimationError:
                return np.inf

        return _AssignBound(penalty, float(self.eps2))

    def with_threshold(self, threshold):
        return replace(self, eps2=threshold)

    def to_dict(self):
        return {"shape": self.shape, "eps2": self.eps2, "link": self.link}


@dataclass(frozen=True)
class GmmRegion(AcceptanceRegion):
    """Accept when the scaled gap between within-arm moment-model fits,
    sqrt(n)(beta_1 - beta_0), falls in a base region. ``feasible=True``
    swaps in the asymptotically equivalent linear criterion: balance the
    pooled-fit score values and pass the statistic through the inverse
    pooled Jacobian before applying the base region."""

    score: Callable  # (x, beta) -> (rows, d_m)
    base: AcceptanceRegion
    jac: Callable | None = None  # (x, beta) -> (d_m, d_m)
    beta_init: np.ndarray | None = None
    feasible: bool = False

    shape = "gmm-region"

    def bind(self, h, partition, p):
        if h.shape[1] == 0:
            raise ConfigError("moment-fit region needs covariates (d_h = 0)")
        pooled, G = _pooled_moment_fit(h, self.score, self.jac, self.beta_init)
        if self.feasible:
            surrogate = np.atleast_2d(self.score(h, pooled))
            base_bound = self.base.bind(surrogate, partition, p)

            def penalty(T):
                return base_bound.penalty_stats(np.linalg.solve(G, T.T).T)

            return _StatBound(penalty, base_bound.threshold, stats_matrix=surrogate)

        def penalty_assignment(d):
            try:
                stat = gmm_imbalance_arrays(h, d, self.score, jac=self.jac,
                                            beta_init=pooled)
            except EstimationError:
                return np.inf
            return _region_penalty_scalar(self.base, stat.value)

        thr = _region_threshold_scalar(self.base, pooled.size)
        return _AssignBound(penalty_assignment, thr)

    def with_threshold(self, threshold):
        return replace(self, base=self.base.with_threshold(threshold))


def _region_penalty_scalar(base, x):
    if isinstance(base, PolarRegion):
        return float(base.penalty(x)[0])
    if isinstance(base, FullSpaceRegion):
        return 0.0
    raise ConfigError(
        "exact moment-fit regions support ball/polar bases; use feasible=True "
        "for quadratic bases"
    )


def _region_threshold_scalar(base, dim):
    if isinstance(base, PolarRegion):
        return base.eps
    if isinstance(base, FullSpaceRegion):
        return np.inf
    raise ConfigError("unsupported base region for exact moment-fit criterion")


# ---------------------------------------------------------------------------
# refitted-model statistics


def propensity_stat(frame_or_d, x, p=None, link="logit", tol=1e-10, max_iter=100):
    """Mean squared gap between the target assignment share and a fitted
    propensity model: n * E_n[(p - L(x'beta))^2].

    The model is fit by Newton iteration with step halving on the
    standardized design; coefficients are mapped back to the original scale.
    Raises EstimationError (with iteration trace) on separation or
    non-convergence.
    """
    if link != "logit":
        raise ConfigError(f"unsupported link {link!r}")
    if isinstance(frame_or_d, ExperimentFrame):
        d, p = frame_or_d.d.astype(np.float64), frame_or_d.p
    else:
        d = np.asarray(frame_or_d, dtype=np.float64)
        if p is None:
            raise ConfigError("p is required when passing a raw assignment")
    X = np.asarray(x, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]

    # standardize for conditioning; constant columns pass through untouched
    sd = X.std(axis=0)
    is_const = sd == 0.0
    has_const = bool(is_const.any())
    mu = np.where(is_const, 0.0, X.mean(axis=0)) if has_const else np.zeros(X.shape[1])
    scale = np.where(is_const, 1.0, sd)
    Xs = (X - mu) / scale

    beta = np.zeros(X.shape[1])
    eta = Xs @ beta

    def nll(eta_):
        return float(np.mean(np.logaddexp(0.0, np.where(d == 1, -eta_, eta_))))

    trace = []
    converged = False
    for it in range(1, max_iter + 1):
        prob = expit(eta)
        grad = Xs.T @ (d - prob) / n
        gnorm = float(np.abs(grad).max())
        trace.append({"iter": it, "nll": nll(eta), "grad_norm": gnorm,
                      "max_abs_eta": float(np.abs(eta).max())})
        if np.abs(eta).max() > 15.0:
            raise EstimationError(
                "propensity fit diverging (fitted log-odds beyond +-15): "
                "likely separation", trace)
        if gnorm <= tol:
            converged = True
            break
        wgt = prob * (1.0 - prob)
        hess = (Xs * wgt[:, None]).T @ Xs / n
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            raise EstimationError("singular Hessian in propensity fit", trace)
        f0 = nll(eta)
        s = 1.0
        for _ in range(40):
            cand = beta + s * step
            eta_c = Xs @ cand
            if nll(eta_c) < f0 + 1e-12:
                break
            s *= 0.5
        else:
            raise EstimationError("propensity fit stalled (no descent step)", trace)
        beta, eta = cand, eta_c
    if not converged:
        raise EstimationError(
            f"propensity fit did not converge in {max_iter} iterations "
            "(possible separation)", trace)

    prob = expit(eta)
    m_stat = float(n * np.mean((p - prob) ** 2))
    beta_orig = beta / scale
    offset = -float(np.sum(beta * mu / scale))
    if has_const and offset != 0.0:
        j = int(np.argmax(is_const))
        beta_orig[j] += offset / X[0, j]
    return ImbalanceStat(
        kind="propensity", value=m_stat, raw=None,
        extra={"beta": beta_orig, "iterations": it, "trace": trace},
    )


def _pooled_moment_fit(x, score, jac, beta_init, dim_beta=None):
    if beta_init is None:
        beta_init = np.zeros(x.shape[1] if dim_beta is None else dim_beta)
    beta_init = np.atleast_1d(np.asarray(beta_init, dtype=np.float64))
    probe = np.atleast_2d(score(x, beta_init))
    if probe.shape[1] != beta_init.size:
        raise ConfigError(
            f"moment model has {probe.shape[1]} moments but {beta_init.size} "
            "parameters; pass dim_beta or beta_init for non-square models"
        )

    def fun(beta):
        return np.atleast_2d(score(x, beta)).mean(axis=0)

    jfun = (lambda b: jac(x, b)) if jac is not None else None
    beta, _, _ = newton_root(fun, jfun, beta_init, label="moment-fit[pooled]")
    G = jac(x, beta) if jac is not None else fd_jacobian(fun, beta)
    return beta, np.atleast_2d(np.asarray(G, dtype=np.float64))


def gmm_imbalance_arrays(x, d, score, jac=None, beta_init=None, dim_beta=None):
    """Array-level version of gmm_imbalance (no frame required)."""
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(d)
    n = x.shape[0]
    pooled, G = _pooled_moment_fit(x, score, jac, beta_init, dim_beta)

    def arm_fit(rows, label):
        sub = x[rows]

        def fun(beta):
            return np.atleast_2d(score(sub, beta)).mean(axis=0)

        jfun = (lambda b: jac(sub, b)) if jac is not None else None
        beta, _, _ = newton_root(fun, jfun, pooled, label=f"moment-fit[{label}]")
        return beta

    beta1 = arm_fit(d == 1, "treated")
    beta0 = arm_fit(d == 0, "control")
    value = np.sqrt(n) * (beta1 - beta0)
    surrogate = np.atleast_2d(score(x, pooled))
    return ImbalanceStat(
        kind="gmm", value=value, raw=value,
        extra={"beta1": beta1, "beta0": beta0, "beta_pooled": pooled,
               "jacobian": G, "surrogate": surrogate},
    )


def gmm_imbalance(frame, score, jac=None, x=None, beta_init=None, dim_beta=None):
    """Scaled gap sqrt(n)(beta_1 - beta_0) between within-arm fits of an
    exactly identified moment model m(x, beta). The pooled-fit score values
    (a feasible linear surrogate for the same criterion) and the pooled
    Jacobian ride along in ``extra``."""
    if x is None:
        x = frame.covariates.h
    return gmm_imbalance_arrays(x, frame.d, score, jac=jac, beta_init=beta_init,
                                dim_beta=dim_beta)


# ---------------------------------------------------------------------------
# the accept/reject loop


def calibrate_threshold(region, partition, h, alpha, rng, draws=2000):
    """Monte Carlo calibration: simulate pure stratified draws, set the
    region's threshold to the empirical alpha-quantile of its penalty."""
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    gen = as_generator(rng)
    h = np.asarray(h, dtype=np.float64)
    probe = region.with_threshold(np.inf) if hasattr(region, "with_threshold") else region
    pens, _, _ = _batch_penalties(probe, partition, h, gen, draws)
    return region.with_threshold(float(np.quantile(pens, alpha)))


def _batch_penalties(region, partition, h, gen, draws, assign_batch=32, stat_batch=512):
    """Penalties of `draws` fresh stratified draws; returns (penalties,
    treated index batches, bound)."""
    p = partition.p
    bound = region.bind(h, partition, p)
    stats_mat = bound.stats_matrix if getattr(bound, "stats_matrix", None) is not None else h
    n = partition.n
    pens = np.empty(draws)
    treated_all = []
    done = 0
    batch = assign_batch if bound.needs_assignment else stat_batch
    colsum = stats_mat.sum(axis=0)
    vard = p * (1.0 - p)
    while done < draws:
        B = min(batch, draws - done)
        treated = treated_units_batch(partition.groups, partition.l, gen, B)
        if bound.needs_assignment:
            dmat = assignment_matrix_from_treated(treated, n)
            pens[done:done + B] = [bound.penalty_assignment(dmat[b]) for b in range(B)]
        else:
            s1 = stats_mat[treated].sum(axis=(1, 2))
            T = np.sqrt(n) * (s1 / (n * vard) - colsum / (n * (1.0 - p)))
            pens[done:done + B] = bound.penalty_stats(T)
        treated_all.append(treated)
        done += B
    return pens, treated_all, bound


def rerandomize(partition, h, region, rng, max_draws=100_000, keep_trace=False):
    """Redraw within-group assignments until the balance statistic lands in
    the acceptance region.

    Returns the accepted AssignmentDraw (1-based draw_index). If max_draws
    is exhausted, returns the draw with the smallest penalty, flagged
    accepted=False. With keep_trace=True, returns (draw, trace) where trace
    is a list of (draw_index, penalty, accepted).
    """
    if max_draws < 1:
        raise ConfigError("max_draws must be >= 1")
    gen = as_generator(rng)
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 1:
        h = h[:, None]
    if h.shape[0] != partition.n:
        raise ConfigError("balance covariates and partition disagree on n")
    if region is None:
        region = FullSpaceRegion()

    p = partition.p
    n = partition.n
    vard = p * (1.0 - p)
    bound = region.bind(h, partition, p)
    stats_mat = bound.stats_matrix if getattr(bound, "stats_matrix", None) is not None else h
    colsum = stats_mat.sum(axis=0)
    batch = 32 if bound.needs_assignment else 512

    trace = [] if keep_trace else None
    best_pen = np.inf
    best_treated = None
    best_idx = 0
    done = 0
    while done < max_draws:
        B = min(batch, max_draws - done)
        treated = treated_units_batch(partition.groups, partition.l, gen, B)
        if bound.needs_assignment:
            dmat = assignment_matrix_from_treated(treated, n)
            pens = np.array([bound.penalty_assignment(dmat[b]) for b in range(B)])
        else:
            s1 = stats_mat[treated].sum(axis=(1, 2))
            T = np.sqrt(n) * (s1 / (n * vard) - colsum / (n * (1.0 - p)))
            pens = np.asarray(bound.penalty_stats(T), dtype=np.float64)
        hits = np.where(pens <= bound.threshold)[0]
        stop = hits[0] if hits.size else B - 1
        if keep_trace:
            for b in range(stop + 1):
                trace.append((done + b + 1, float(pens[b]), bool(pens[b] <= bound.threshold)))
        upto = hits[0] if hits.size else B
        bmin = int(np.argmin(pens[:upto])) if upto > 0 else 0
        if upto > 0 and pens[bmin] < best_pen:
            best_pen = float(pens[bmin])
            best_treated = treated[bmin]
            best_idx = done + bmin + 1
        if hits.size:
            b = int(hits[0])
            d = assignment_matrix_from_treated(treated[b:b + 1], n)[0]
            draw = AssignmentDraw(d=d, draw_index=done + b + 1, accepted=True,
                                  penalty=float(pens[b]))
            return (draw, trace) if keep_trace else draw
        done += B
    d = assignment_matrix_from_treated(best_treated[None], n)[0]
    draw = AssignmentDraw(d=d, draw_index=best_idx, accepted=False, penalty=best_pen)
    return (draw, trace) if keep_trace else draw


# region (de)serialization for the JSON design spec ------------------------


def region_from_dict(spec):
    if spec is None:
        return FullSpaceRegion()
    shape = spec.get("shape", "none")
    known = {"none", "ball", "ellipsoid-mahalanobis", "mahalanobis", "polar",
             "rectangle-polar", "pilot-wald", "propensity-threshold", "propensity"}
    extra = set(spec) - {"shape", "alpha", "eps", "eps2", "gamma_bar", "U", "p",
                         "a", "b", "gamma_pilot", "sigma_pilot", "m", "link", "dim"}
    if extra:
        raise ConfigError(f"unknown region keys {sorted(extra)}")
    if shape not in known:
        raise ConfigError(f"unknown region shape {shape!r}")
    if shape == "none":
        return FullSpaceRegion()
    if shape in ("mahalanobis", "ellipsoid-mahalanobis"):
        return MahalanobisRegion(alpha=spec.get("alpha"), eps2=spec.get("eps2"))
    if shape in ("ball", "polar", "rectangle-polar", "pilot-wald"):
        # any polar-family shape round-trips through the generic
        # (gamma_bar, U, p) parameterization once serialized
        if "gamma_bar" in spec:
            return PolarRegion(
                gamma_bar=np.asarray(spec["gamma_bar"], dtype=np.float64),
                U=np.asarray(spec["U"], dtype=np.float64),
                p_exponent=np.inf if spec.get("p") is None else float(spec["p"]),
                eps=float(spec["eps"]),
                shape=shape,
            )
        if shape == "ball":
            return PolarRegion.ball(dim=int(spec["dim"]), eps=float(spec["eps"]))
        if shape == "rectangle-polar":
            return PolarRegion.rectangle(spec["a"], spec["b"], eps=float(spec["eps"]))
        if shape == "pilot-wald":
            return pilot_wald_region(
                spec["gamma_pilot"], spec["sigma_pilot"], m=int(spec["m"]),
                alpha=float(spec["alpha"]), eps=float(spec["eps"]),
            )
        raise ConfigError("polar region needs gamma_bar and U")
    return PropensityRegion(eps2=float(spec["eps2"]), link=spec.get("link", "logit"))
