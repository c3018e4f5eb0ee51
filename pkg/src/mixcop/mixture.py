"""Multivariate mixture-of-normals model fitted by stochastic approximation.

The model is y_i = B z_i + eps_i with eps_i distributed as a mixture of m
normals (B optional; pure density estimation when no regressors are given).
Fitting uses small random batches with a search-then-converge step-size
schedule and a weakly informative inverse-Wishart pull on the component
covariances. Component count is selected by BIC.
"""

from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import (
    LOG_2PI,
    RngStream,
    SpdMatrix,
    find_root,
    logsumexp,
    normal_cdf,
    normal_quantile,
)

__all__ = [
    "SaConfig",
    "MixtureOfNormals",
    "UnivariateMixture",
    "step_size",
    "responsibilities",
    "init_params",
    "sa_fit",
    "bic_select",
    "SaDivergenceError",
]

WEIGHT_FLOOR = 1e-6
EIG_FLOOR_SCALE = 1e-8


class SaDivergenceError(RuntimeError):
    """Raised when the SA recursion produces non-finite parameters."""

    def __init__(self, iteration: int, message: str):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass
class SaConfig:
    """Tuning constants for the stochastic-approximation recursions."""

    batch_size: int = 20
    iterations: int = 1000
    step_b: float = 0.5
    step_mu: float = 0.1
    step_v: float = 0.5
    step_pi: float = 0.1
    schedule_c: float = 1.0
    schedule_tau: float = 100.0
    prior_dof: float = 1.0

    def __post_init__(self):
        for name in (
            "batch_size",
            "iterations",
            "step_b",
            "step_mu",
            "step_v",
            "step_pi",
            "schedule_c",
            "schedule_tau",
            "prior_dof",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"SaConfig.{name} must be positive")


def step_size(alpha0: float, k: int, c: float = 1.0, tau: float = 100.0) -> float:
    """Search-then-converge schedule: flat exploratory phase, then ~1/k decay."""
    if k < 0:
        raise ValueError("iteration index must be nonnegative")
    r = k / tau
    num = 1.0 + (c / alpha0) * r
    return alpha0 * num / (num + tau * r * r)


class UnivariateMixture:
    """One-dimensional mixture of normals with cdf and quantile support."""

    def __init__(self, weights, means, sds):
        self.weights = np.asarray(weights, dtype=float)
        self.means = np.asarray(means, dtype=float)
        self.sds = np.asarray(sds, dtype=float)
        if not (self.weights.shape == self.means.shape == self.sds.shape):
            raise ValueError("weights, means, sds must have equal length")
        if self.weights.ndim != 1 or self.weights.size < 1:
            raise ValueError("need at least one component")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be a probability vector")
        if np.any(self.sds <= 0):
            raise ValueError("component standard deviations must be positive")

    @property
    def m(self) -> int:
        return self.weights.size

    def logpdf(self, y):
        y = np.asarray(y, dtype=float)
        z = (y[..., None] - self.means) / self.sds
        comp = -0.5 * (LOG_2PI + z * z) - np.log(self.sds)
        out = logsumexp(comp + np.log(self.weights), axis=-1)
        return out if y.ndim else float(out)

    def pdf(self, y):
        return np.exp(self.logpdf(y))

    def cdf(self, y):
        y = np.asarray(y, dtype=float)
        z = (y[..., None] - self.means) / self.sds
        out = normal_cdf(z) @ self.weights
        return out if y.ndim else float(out)

    def _quantile_bracket(self, u):
        lo = np.min(self.means + self.sds * normal_quantile(u / 2.0), axis=-1)
        hi = np.max(
            self.means + self.sds * normal_quantile((1.0 + u) / 2.0), axis=-1
        )
        return lo, hi

    def quantile(self, u):
        """Inverse cdf. Scalars go through the bracketed root finder;
        arrays use an equivalent vectorized bisection."""
        u_arr = np.asarray(u, dtype=float)
        if np.any(u_arr <= 0.0) or np.any(u_arr >= 1.0):
            raise ValueError("quantile input must lie strictly inside (0, 1)")
        if u_arr.ndim == 0:
            lo, hi = self._quantile_bracket(float(u_arr))
            return find_root(self.cdf, float(u_arr), (lo, hi))
        lo, hi = self._quantile_bracket(u_arr[..., None])
        lo, hi = np.broadcast_arrays(lo, hi)
        lo, hi = lo.copy(), hi.copy()
        for _ in range(90):
            mid = 0.5 * (lo + hi)
            below = self.cdf(mid) < u_arr
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return 0.5 * (lo + hi)

    def sample(self, n, rng: RngStream):
        gen = rng.generator()
        idx = gen.choice(self.m, size=n, p=self.weights)
        return self.means[idx] + self.sds[idx] * gen.standard_normal(n)

    def as_mixture_of_normals(self) -> "MixtureOfNormals":
        covs = [SpdMatrix(np.array([[s * s]])) for s in self.sds]
        return MixtureOfNormals(self.weights, self.means[:, None], covs)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "sds": self.sds.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UnivariateMixture":
        return cls(d["weights"], d["means"], d["sds"])


class MixtureOfNormals:
    """Mixture of m p-variate normals with an optional regression mean.

    Parameters
    ----------
    weights : (m,) probability vector
    means : (m, p) component means
    covariances : list of m SpdMatrix
    regression : optional (k, p) coefficient matrix B
    fit_metadata : free-form dict recorded by the fitting routines
    """

    def __init__(self, weights, means, covariances, regression=None, fit_metadata=None):
        self.weights = np.asarray(weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(means, dtype=float))
        self.covariances = list(covariances)
        self.regression = (
            None if regression is None else np.atleast_2d(np.asarray(regression, float))
        )
        self.fit_metadata = dict(fit_metadata or {})
        m, p = self.means.shape
        if self.weights.shape != (m,):
            raise ValueError("weights length must match number of mean vectors")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to one")
        if len(self.covariances) != m or any(c.dim != p for c in self.covariances):
            raise ValueError("covariance count/dimension mismatch")
        if self.regression is not None and self.regression.shape[1] != p:
            raise ValueError("regression coefficient matrix must be (k, p)")
        self._chols = np.stack([c.chol for c in self.covariances])
        self._logdets = np.array([c.logdet for c in self.covariances])

    @property
    def m(self) -> int:
        return self.weights.size

    @property
    def p(self) -> int:
        return self.means.shape[1]

    @property
    def k(self) -> int:
        return 0 if self.regression is None else self.regression.shape[0]

    def _component_logpdfs(self, resid):
        """(n, m) log densities of residual rows under each component."""
        d = resid[:, None, :] - self.means[None, :, :]  # (n, m, p)
        # solve L w = d per component; einsum over tiny triangular systems
        w = np.linalg.solve(self._chols[None, :, :, :], d[..., None])[..., 0]
        q = np.einsum("nmp,nmp->nm", w, w)
        return -0.5 * (self.p * LOG_2PI + self._logdets[None, :] + q)

    def _residuals(self, y, z):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if y.shape[1] != self.p:
            raise ValueError(f"y has dimension {y.shape[1]}, model has {self.p}")
        if self.regression is None:
            if z is not None:
                raise ValueError("model has no regression part but z was given")
            return y
        if z is None:
            raise ValueError("model has a regression part; z is required")
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if z.shape != (y.shape[0], self.k):
            raise ValueError("z must be (n, k)")
        return y - z @ self.regression

    def logpdf(self, y, z=None):
        single = np.asarray(y).ndim == 1
        resid = self._residuals(y, z)
        comp = self._component_logpdfs(resid)
        out = logsumexp(comp + np.log(self.weights)[None, :], axis=1)
        return float(out[0]) if single else out

    def pdf(self, y, z=None):
        return np.exp(self.logpdf(y, z))

    def loglik(self, y, z=None) -> float:
        return float(np.sum(self.logpdf(np.atleast_2d(y), z)))

    def sample(self, n, rng: RngStream, z=None):
        gen = rng.generator()
        idx = gen.choice(self.m, size=n, p=self.weights)
        eps = gen.standard_normal((n, self.p))
        out = self.means[idx] + np.einsum("npq,nq->np", self._chols[idx], eps)
        if self.regression is not None:
            if z is None:
                raise ValueError("model has a regression part; z is required")
            out = out + np.atleast_2d(z) @ self.regression
        return out

    def marginal(self, i: int) -> UnivariateMixture:
        """Univariate marginal of the error density along coordinate ``i``
        (regression contribution excluded)."""
        if not 0 <= i < self.p:
            raise ValueError(f"coordinate {i} out of range for p={self.p}")
        sds = np.sqrt([c.matrix[i, i] for c in self.covariances])
        return UnivariateMixture(self.weights, self.means[:, i], sds)

    @classmethod
    def from_independent_marginals(cls, marginals) -> "MixtureOfNormals":
        """Product density of univariate mixtures, expanded to a joint
        mixture with one component per combination."""
        p = len(marginals)
        combos = list(itertools.product(*[range(mg.m) for mg in marginals]))
        weights = np.array(
            [np.prod([marginals[j].weights[c[j]] for j in range(p)]) for c in combos]
        )
        means = np.array(
            [[marginals[j].means[c[j]] for j in range(p)] for c in combos]
        )
        covs = [
            SpdMatrix(np.diag([marginals[j].sds[c[j]] ** 2 for j in range(p)]))
            for c in combos
        ]
        return cls(weights / weights.sum(), means, covs)

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "p": self.p,
            "k": self.k,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "cholesky_factors": [c.chol.tolist() for c in self.covariances],
            "B": None if self.regression is None else self.regression.tolist(),
            "fit_metadata": self.fit_metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureOfNormals":
        covs = [SpdMatrix.from_cholesky(np.array(f)) for f in d["cholesky_factors"]]
        return cls(
            d["weights"],
            d["means"],
            covs,
            regression=d.get("B"),
            fit_metadata=d.get("fit_metadata"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "MixtureOfNormals":
        return cls.from_dict(json.loads(s))


def responsibilities(model: MixtureOfNormals, y, z=None):
    """Posterior component-membership probabilities for one observation.

    If every component density underflows, returns the uniform vector and
    emits a warning.
    """
    resid = model._residuals(np.atleast_2d(y), None if z is None else np.atleast_2d(z))
    logw = model._component_logpdfs(resid)[0] + np.log(model.weights)
    if np.all(np.isinf(logw) & (logw < 0)):
        warnings.warn("all component densities underflowed; using uniform responsibilities")
        return np.full(model.m, 1.0 / model.m)
    return np.exp(logw - logsumexp(logw))


def _ols(y, z):
    """OLS coefficients on de-meaned data; raises on rank deficiency."""
    zc = z - z.mean(axis=0)
    yc = y - y.mean(axis=0)
    if np.linalg.matrix_rank(zc) < z.shape[1]:
        raise ValueError("regressor matrix is rank deficient")
    return np.linalg.solve(zc.T @ zc, zc.T @ yc)


def init_params(data, z, m: int) -> MixtureOfNormals:
    """Starting values: OLS for B, component means spread along the first
    principal component of the residuals over +-2 residual standard
    deviations, equal weights, and V_j = V(e)/m."""
    y = np.atleast_2d(np.asarray(data, dtype=float))
    n, p = y.shape
    if n <= p:
        raise ValueError("need more observations than dimensions")
    if m < 1:
        raise ValueError("m must be at least 1")
    if z is not None:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        B = _ols(y, z)
        resid = y - z @ B
    else:
        B = None
        resid = y
    center = resid.mean(axis=0)
    cov = np.cov(resid, rowvar=False, ddof=1).reshape(p, p)
    eigvals, eigvecs = np.linalg.eigh(cov)
    direction = eigvecs[:, -1]
    spread = np.sqrt(eigvals[-1])
    offsets = np.zeros(1) if m == 1 else np.linspace(-2.0 * spread, 2.0 * spread, m)
    means = center[None, :] + offsets[:, None] * direction[None, :]
    comp_cov = SpdMatrix(cov / m)
    return MixtureOfNormals(
        np.full(m, 1.0 / m),
        means,
        [comp_cov] * m,
        regression=B,
    )


def _floor_spd(covs):
    """Symmetrize and floor eigenvalues at EIG_FLOOR_SCALE * trace / p."""
    covs = 0.5 * (covs + np.swapaxes(covs, -1, -2))
    vals, vecs = np.linalg.eigh(covs)
    p = covs.shape[-1]
    floor = EIG_FLOOR_SCALE * np.trace(covs, axis1=-2, axis2=-1) / p
    floor = np.maximum(floor, 1e-300)
    vals = np.maximum(vals, floor[..., None])
    return np.einsum("...ij,...j,...kj->...ik", vecs, vals, vecs)


def sa_fit(
    data,
    z,
    m: int,
    cfg: SaConfig | None = None,
    rng: RngStream | None = None,
) -> MixtureOfNormals:
    """Fit an m-component mixture by batched stochastic approximation.

    Each iteration draws ``cfg.batch_size`` observations with replacement,
    computes responsibilities under the current parameters, and applies
    simultaneous updates to B, the component covariances (with the
    inverse-Wishart pull toward S/nu), the component means, and the
    weights, followed by a simplex projection of the weights and an SPD
    projection of the covariances. Mean and covariance steps are scaled by
    the inverse of the batch's realized complete-data information, which
    keeps the effective adaptation rate of a component independent of its
    mixing weight.
    """
    cfg = cfg or SaConfig()
    rng = rng or RngStream(0)
    y = np.atleast_2d(np.asarray(data, dtype=float))
    n, p = y.shape
    if not np.all(np.isfinite(y)):
        raise ValueError("data contains non-finite values")
    if n < 10 * m:
        raise ValueError(f"need at least {10 * m} observations for m={m}")
    if cfg.batch_size > n:
        raise ValueError("batch size exceeds the sample size")
    if z is not None:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if z.shape[0] != n:
            raise ValueError("z must have the same number of rows as data")

    init = init_params(y, z, m)
    B = None if init.regression is None else init.regression.copy()
    means = init.means.copy()
    covs = np.stack([c.matrix for c in init.covariances])
    weights = init.weights.copy()

    if z is not None:
        resid0 = y - z @ B
        vz = np.cov(z, rowvar=False, ddof=1).reshape(z.shape[1], z.shape[1])
        vz_inv = np.linalg.inv(vz)
    else:
        resid0 = y
    s_prior = np.cov(resid0, rowvar=False, ddof=1).reshape(p, p)
    prior_target = s_prior / cfg.prior_dof

    gen = rng.generator()
    S = cfg.batch_size
    log_2pi_p = p * LOG_2PI

    for t in range(cfg.iterations):
        idx = gen.integers(0, n, size=S)
        yb = y[idx]
        resid = yb if B is None else yb - z[idx] @ B
        e = resid[None, :, :] - means[:, None, :]  # (m, S, p)

        chols = np.linalg.cholesky(covs)
        w = np.linalg.solve(chols[:, None, :, :], e[..., None])[..., 0]
        q = np.einsum("msp,msp->ms", w, w)
        logdets = 2.0 * np.sum(np.log(np.diagonal(chols, axis1=1, axis2=2)), axis=1)
        logw = (
            np.log(weights)[:, None]
            - 0.5 * (log_2pi_p + logdets[:, None] + q)
        )
        norm = logsumexp(logw, axis=0)
        bad = ~np.isfinite(norm)
        if np.any(bad):
            logw[:, bad] = -np.log(m)
            norm[bad] = 0.0
        R = np.exp(logw - norm[None, :])  # (m, S)

        a_b = step_size(cfg.step_b, t, cfg.schedule_c, cfg.schedule_tau)
        a_mu = step_size(cfg.step_mu, t, cfg.schedule_c, cfg.schedule_tau)
        a_v = step_size(cfg.step_v, t, cfg.schedule_c, cfg.schedule_tau)
        a_pi = step_size(cfg.step_pi, t, cfg.schedule_c, cfg.schedule_tau)

        r_tot = R.sum(axis=1)  # (m,)
        if B is not None:
            se = np.einsum("ms,msp->sp", R, e)
            B = B + (a_b / S) * (vz_inv @ (z[idx].T @ se))
        # Mean/covariance gradients are rescaled by the realized complete-data
        # information of the batch, i.e. normalized by each component's batch
        # responsibility mass rather than the batch size. Components that
        # receive essentially no responsibility in a batch are left unchanged.
        denom = np.where(r_tot > 1e-12, r_tot, 1.0)
        step = np.where(r_tot > 1e-12, 1.0, 0.0) / denom
        means = means + (a_mu * step)[:, None] * np.einsum("ms,msp->mp", R, e)
        # covariance step uses residuals about the freshly updated means
        e = resid[None, :, :] - means[:, None, :]
        scatter = np.einsum("ms,msp,msq->mpq", R, e, e)
        covs = (
            covs
            + (a_v * step)[:, None, None] * (scatter - r_tot[:, None, None] * covs)
            + (a_v / n) * (prior_target[None, :, :] - covs)
        )
        weights = weights + (a_pi / S) * (r_tot - S * weights)

        weights = np.maximum(weights, WEIGHT_FLOOR)
        weights = weights / weights.sum()
        covs = _floor_spd(covs)

        params_ok = (
            np.all(np.isfinite(weights))
            and np.all(np.isfinite(means))
            and np.all(np.isfinite(covs))
            and (B is None or np.all(np.isfinite(B)))
        )
        if not params_ok:
            raise SaDivergenceError(t, "non-finite parameters in SA update")

    model = MixtureOfNormals(
        weights,
        means,
        [SpdMatrix(c) for c in covs],
        regression=B,
        fit_metadata={
            "seed": rng.seed,
            "stream": rng.stream,
            "iterations": cfg.iterations,
            "m": m,
        },
    )
    return model


def mixture_bic(model: MixtureOfNormals, data, z=None) -> float:
    """BIC = -2 loglik + d log n with d = (m-1) + m p + m p(p+1)/2 + k p."""
    y = np.atleast_2d(np.asarray(data, dtype=float))
    n = y.shape[0]
    m, p, k = model.m, model.p, model.k
    d = (m - 1) + m * p + m * p * (p + 1) // 2 + k * p
    return -2.0 * model.loglik(y, z) + d * np.log(n)


def bic_select(
    data,
    z=None,
    max_m: int = 10,
    cfg: SaConfig | None = None,
    rng: RngStream | None = None,
):
    """Fit m = 1..max_m and return (best model, BIC table).

    The table is a list of dicts with keys m/bic/loglik (bic None when the
    fit failed). Ties break toward smaller m; failed fits are skipped with
    a warning.
    """
    if max_m < 1:
        raise ValueError("max_m must be at least 1")
    rng = rng or RngStream(0)
    table = []
    best = None
    best_bic = np.inf
    for m in range(1, max_m + 1):
        try:
            model = sa_fit(data, z, m, cfg, rng.child(m))
            bic = mixture_bic(model, data, z)
        except (SaDivergenceError, ValueError, np.linalg.LinAlgError) as exc:
            warnings.warn(f"fit with m={m} failed ({exc}); skipped")
            table.append({"m": m, "bic": None, "loglik": None})
            continue
        loglik = model.loglik(np.atleast_2d(data), z)
        table.append({"m": m, "bic": float(bic), "loglik": float(loglik)})
        if np.isfinite(bic) and bic < best_bic:
            best, best_bic = model, bic
    if best is None:
        raise RuntimeError("all component counts failed to fit")
    best.fit_metadata["bic"] = float(best_bic)
    return best, table
