"""Small numerical kit: links, weighted GLM fits, kernel regression, scaling.

Everything here is a pure function of its inputs (no shared mutable state),
so concurrent use from multiple threads or processes is safe.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy import special

from . import _kernels

__all__ = [
    "PROB_EPS",
    "expit",
    "logit",
    "clip_prob",
    "logit_of_prob",
    "OutcomeScaler",
    "GlmFit",
    "fit_logistic",
    "fit_linear",
    "KernelSpec",
    "nw_regress",
    "select_bandwidth",
    "silverman_bandwidth",
    "resolve_bandwidth",
]

# Fitted probabilities used as denominators (and values sent through logit)
# are pinned to this band.
PROB_EPS = 1e-6

# Kernel denominators below this are treated as degenerate.
DEN_FLOOR = 1e-300

expit = special.expit
logit = special.logit


def clip_prob(p, eps: float = PROB_EPS):
    """Clip probabilities into [eps, 1 - eps]."""
    return np.clip(p, eps, 1.0 - eps)


def logit_of_prob(p, eps: float = PROB_EPS):
    """logit after clipping, safe for values at or outside {0, 1}."""
    return special.logit(clip_prob(p, eps))


@dataclass(frozen=True)
class OutcomeScaler:
    """Affine map [lo, hi] -> [0, 1] and back."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)) or self.hi <= self.lo:
            raise ValueError(f"invalid scaler bounds ({self.lo}, {self.hi})")

    @classmethod
    def from_values(cls, y, pad: float = 0.01) -> "OutcomeScaler":
        """Bounds from the observed range, padded by ``pad`` of the range.

        A constant input gets a unit-width window centred on it so the map
        stays invertible.
        """
        y = np.asarray(y, dtype=float)
        lo, hi = float(np.min(y)), float(np.max(y))
        rng = hi - lo
        if rng == 0.0:
            return cls(lo - 0.5, hi + 0.5)
        return cls(lo - pad * rng, hi + pad * rng)

    @property
    def span(self) -> float:
        return self.hi - self.lo

    def scale(self, v):
        return (np.asarray(v, dtype=float) - self.lo) / self.span

    def unscale(self, v):
        return self.lo + self.span * np.asarray(v, dtype=float)


@dataclass(frozen=True)
class GlmFit:
    coefficients: np.ndarray
    converged: bool
    iterations: int
    max_abs_score: float


def _as_design(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return x


def _bernoulli_loglik(y, eta, w):
    # y*log(mu) + (1-y)*log(1-mu) == y*eta - log(1+exp(eta)), valid for
    # fractional y and immune to mu hitting 0/1.
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def fit_logistic(
    y,
    x,
    offset=None,
    weights=None,
    *,
    max_iter: int = 100,
    score_tol: float | None = None,
    coef_cap: float = 50.0,
) -> GlmFit:
    """Weighted Bernoulli regression with a fixed offset, fit by IRLS.

    Accepts fractional responses in [0, 1]. The design is used as given
    (no implicit intercept). Convergence means every per-coefficient score
    Sum_i w_i x_ij (y_i - expit(offset_i + x_i beta)) is within
    ``score_tol`` (default 1e-8 * n) of zero. Coefficients escaping
    ``coef_cap`` in absolute value are clamped there and the fit is flagged
    non-converged.
    """
    y = np.asarray(y, dtype=float)
    X = _as_design(x)
    n, p = X.shape
    if len(y) != n:
        raise ValueError("y and x have mismatched lengths")
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X)) and np.all(np.isfinite(off)) and np.all(np.isfinite(w))):
        raise ValueError("non-finite inputs")
    if np.any(w < 0) or not np.any(w > 0):
        raise ValueError("weights must be nonnegative with at least one positive")
    if np.any(y < 0) or np.any(y > 1):
        raise ValueError("responses must lie in [0, 1]")
    active = w > 0
    if np.any(np.max(np.abs(X[active]), axis=0) == 0.0):
        raise ValueError("design has an all-zero column among weighted rows")

    tol = (1e-8 * n) if score_tol is None else score_tol
    beta = np.zeros(p)
    eta = off.copy()
    ll = _bernoulli_loglik(y, eta, w)
    converged = False
    capped = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(eta)
        score = X.T @ (w * (y - mu))
        if np.max(np.abs(score)) <= tol:
            converged = True
            it -= 1
            break
        irls_w = w * mu * (1.0 - mu)
        hess = X.T @ (X * irls_w[:, None])
        try:
            delta = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError:
            delta = np.linalg.solve(hess + 1e-10 * np.eye(p), score)
        step = 1.0
        while step > 2.0**-40:
            cand = beta + step * delta
            eta_cand = off + X @ cand
            ll_cand = _bernoulli_loglik(y, eta_cand, w)
            if ll_cand >= ll:
                beta, eta, ll = cand, eta_cand, ll_cand
                break
            step *= 0.5
        else:
            break
        if np.max(np.abs(beta)) > coef_cap:
            beta = np.clip(beta, -coef_cap, coef_cap)
            eta = off + X @ beta
            capped = True
            break

    mu = expit(eta)
    max_score = float(np.max(np.abs(X.T @ (w * (y - mu)))))
    converged = (not capped) and max_score <= tol
    return GlmFit(coefficients=beta, converged=converged, iterations=it, max_abs_score=max_score)


def fit_linear(y, x, weights=None) -> GlmFit:
    """Weighted least squares via the normal equations.

    A rank-deficient system is nudged with a 1e-10 ridge on the normal
    equations; fewer positively weighted rows than columns is an error.
    """
    y = np.asarray(y, dtype=float)
    X = _as_design(x)
    n, p = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X)) and np.all(np.isfinite(w))):
        raise ValueError("non-finite inputs")
    if np.any(w < 0) or not np.any(w > 0):
        raise ValueError("weights must be nonnegative with at least one positive")
    if int(np.count_nonzero(w > 0)) < p:
        raise ValueError(f"underdetermined system: {int(np.count_nonzero(w > 0))} weighted rows for {p} columns")
    a = X.T @ (X * w[:, None])
    b = X.T @ (w * y)
    try:
        chol = np.linalg.cholesky(a)
        beta = np.linalg.solve(chol.T, np.linalg.solve(chol, b))
    except np.linalg.LinAlgError:
        beta = np.linalg.solve(a + 1e-10 * np.eye(p), b)
    resid_score = float(np.max(np.abs(X.T @ (w * (y - X @ beta)))))
    return GlmFit(coefficients=beta, converged=True, iterations=1, max_abs_score=resid_score)


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian Nadaraya-Watson configuration.

    Either a fixed positive ``bandwidth``, or a selector: leave-one-out CV
    over ``grid`` (or, when ``grid`` is None, a ``grid_size``-point
    logarithmic grid spanning ``grid_span`` x weighted_std(x) x n^(-1/5)),
    or Silverman's rule of thumb. LOO CV on more than ``cv_max_points``
    positive-weight points runs on a deterministic spread subsample with the
    selected bandwidth mapped back through the n^(-1/5) scaling law.
    """

    kernel: str = "gaussian"
    bandwidth: float | None = None
    selector: str = "loocv"  # "loocv" | "silverman"
    grid: tuple[float, ...] | None = None
    grid_size: int = 20
    grid_span: tuple[float, float] = (0.05, 2.0)
    cv_max_points: int = 1000

    def __post_init__(self):
        if self.kernel != "gaussian":
            raise ValueError(f"unsupported kernel {self.kernel!r}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if self.selector not in ("loocv", "silverman"):
            raise ValueError(f"unknown selector {self.selector!r}")

    def with_bandwidth(self, h: float) -> "KernelSpec":
        return replace(self, bandwidth=float(h))


def _weighted_mean(v, w):
    return float(np.sum(w * v) / np.sum(w))


def _weighted_std(v, w):
    mu = _weighted_mean(v, w)
    return float(np.sqrt(np.sum(w * (v - mu) ** 2) / np.sum(w)))


def _effective_n(w) -> float:
    # Kish effective sample size; equals the count for 0/1 weights.
    s = float(np.sum(w))
    return s * s / float(np.sum(w * w))


def _sorted_training(x, y, w):
    order = np.lexsort((w, y, x))
    return x[order], y[order], w[order]


def silverman_bandwidth(x, weights=None) -> float:
    """0.9 * weighted_std * n_eff^(-1/5), floored at 1.0 for degenerate x."""
    x = np.asarray(x, dtype=float)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    sd = _weighted_std(x, w)
    if sd == 0.0:
        return 1.0
    return 0.9 * sd * _effective_n(w) ** -0.2


def select_bandwidth(
    x_train,
    y_train,
    weights,
    grid: Sequence[float],
    *,
    exclusion_radius: float = 0.0,
    one_se_rule: bool = False,
) -> float:
    """Grid bandwidth minimising weighted leave-one-out squared error.

    Ties break toward the larger bandwidth. A grid point at which every
    point's leave-one-out denominator degenerates is disqualified; if that
    happens for the whole grid, Silverman's rule is returned instead.

    A positive ``exclusion_radius`` switches to leave-neighbourhood-out
    scoring: training points within that distance of the held-out point are
    excluded as well (so the score cannot be earned by reproducing noise
    shared across a neighbourhood), and the flat predictor -- the leave-one-
    out global mean -- competes explicitly. When the flat predictor wins,
    the largest grid bandwidth is returned, the smoothest deployable match.

    ``one_se_rule`` applies the parsimony convention after the sweep: return
    the largest bandwidth whose risk is within one Monte Carlo standard
    error (of the paired per-point risk difference) of the minimum. With a
    heavy-tailed response the risk minimiser is statistically meaningless,
    and the rule defaults to heavy smoothing exactly then.
    """
    grid = [float(h) for h in grid]
    if not grid:
        raise ValueError("empty bandwidth grid")
    if any(h <= 0 for h in grid):
        raise ValueError("bandwidths must be positive")
    x = np.asarray(x_train, dtype=float)
    y = np.asarray(y_train, dtype=float)
    w = np.asarray(weights, dtype=float)
    xs, ys, ws = _sorted_training(x, y, w)
    n_pos = int(np.count_nonzero(ws > 0))
    excl = float(exclusion_radius) if exclusion_radius > 0 else -1.0
    best_h = None
    best_risk = np.inf
    best_err = None
    errs: dict[float, np.ndarray] = {}
    for h in sorted(grid, reverse=True):
        err, fell_back = _kernels.loo_sq_err(xs, ys, ws, h, DEN_FLOOR, excl)
        if excl <= 0 and int(fell_back.sum()) >= n_pos:
            continue
        risk = float(err.sum())
        if one_se_rule:
            errs[h] = err
        if risk < best_risk:
            best_risk = risk
            best_h = h
            best_err = err
    if best_h is None:
        return silverman_bandwidth(x, w)
    if excl > 0:
        sw = float(np.sum(ws))
        swy = float(np.sum(ws * ys))
        pos = ws > 0
        rest = sw - ws[pos]
        loo_mean = np.where(rest > 0, (swy - ws[pos] * ys[pos]) / np.where(rest > 0, rest, 1.0), ys[pos])
        flat_risk = float(np.sum(ws[pos] * (ys[pos] - loo_mean) ** 2))
        if flat_risk <= best_risk:
            return max(grid)
    if one_se_rule:
        for h in sorted(errs, reverse=True):
            diff = errs[h] - best_err
            margin = float(np.sqrt(max(diff.size, 1)) * np.std(diff))
            if float(diff.sum()) <= margin:
                return h
    return best_h


def resolve_bandwidth(
    spec: KernelSpec, x_train, y_train, weights, *, exclusion_radius: float = 0.0, one_se_rule: bool = False
) -> float:
    """Turn a KernelSpec into a concrete positive bandwidth for this data."""
    if spec.bandwidth is not None:
        return float(spec.bandwidth)
    x = np.asarray(x_train, dtype=float)
    y = np.asarray(y_train, dtype=float)
    w = np.asarray(weights, dtype=float)
    if spec.selector == "silverman":
        return silverman_bandwidth(x, w)
    sd = _weighted_std(x, w)
    if sd == 0.0:
        return silverman_bandwidth(x, w)
    n_eff = _effective_n(w)
    if spec.grid is not None:
        grid = np.asarray(spec.grid, dtype=float)
    else:
        lo, hi = spec.grid_span
        grid = np.geomspace(lo, hi, spec.grid_size) * sd * n_eff**-0.2

    pos = w > 0
    xp, yp, wp = x[pos], y[pos], w[pos]
    if xp.size > spec.cv_max_points:
        # Deterministic spread subsample of the sorted points; bandwidths are
        # mapped through the n^(-1/5) law so the selection targets full-n
        # smoothing despite being scored on m points.
        order = np.lexsort((wp, yp, xp))
        take = np.round(np.linspace(0, xp.size - 1, spec.cv_max_points)).astype(int)
        idx = order[take]
        xm, ym, wm = xp[idx], yp[idx], wp[idx]
        scale = (n_eff / _effective_n(wm)) ** 0.2
        h = select_bandwidth(xm, ym, wm, grid * scale, exclusion_radius=exclusion_radius, one_se_rule=one_se_rule)
        return h / scale
    return select_bandwidth(xp, yp, wp, grid, exclusion_radius=exclusion_radius, one_se_rule=one_se_rule)


def nw_regress(x_train, y_train, weights, spec: KernelSpec, x_eval) -> np.ndarray:
    """Gaussian-kernel Nadaraya-Watson regression.

    Returns, for each evaluation point e,
    Sum_i w_i K_h(x_i - e) y_i / Sum_i w_i K_h(x_i - e); evaluation points
    whose denominator degenerates fall back to the weighted global mean of
    the training responses.
    """
    x = np.asarray(x_train, dtype=float)
    y = np.asarray(y_train, dtype=float)
    w = np.asarray(weights, dtype=float)
    e = np.atleast_1d(np.asarray(x_eval, dtype=float))
    if not (x.shape == y.shape == w.shape) or x.ndim != 1:
        raise ValueError("x_train, y_train, weights must be 1-d and equally long")
    if np.any(w < 0) or not np.any(w > 0):
        raise ValueError("weights must be nonnegative with at least one positive")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y)) and np.all(np.isfinite(e))):
        raise ValueError("non-finite inputs")
    h = resolve_bandwidth(spec, x, y, w)
    xs, ys, ws = _sorted_training(x, y, w)
    num, den = _kernels.nw_sums(xs, ys, ws, h, e)
    out = np.empty_like(num)
    ok = den > DEN_FLOOR
    out[ok] = num[ok] / den[ok]
    if not np.all(ok):
        out[~ok] = _weighted_mean(y, w)
    return out
