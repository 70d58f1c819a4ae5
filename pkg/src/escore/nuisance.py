"""Nuisance fits: propensity, outcome regression, and the e-score pipeline.

The pipeline runs g -> m -> r -> e -> (q, h). The residual-bias regression r
trains on treated observations only (the kernel average that defines it is a
treated-arm expectation); e and q train on all observations because their
defining expectations are over the marginal law of (A, W). Each univariate
kernel regression gets its own cross-validated bandwidth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from dataclasses import replace

from .numkit import (
    GlmFit,
    KernelSpec,
    OutcomeScaler,
    clip_prob,
    expit,
    fit_linear,
    fit_logistic,
    logit,
    nw_regress,
    resolve_bandwidth,
)

# value spreads at or below this are estimation noise, not structure
FLAT_TOL = 1e-10


__all__ = [
    "Dataset",
    "NuisanceSpec",
    "NuisanceFit",
    "fit_propensity",
    "fit_outcome",
    "estimate_r",
    "estimate_e",
    "estimate_q_h",
    "fit_all",
]


@dataclass(frozen=True)
class Dataset:
    """Observations (covariate matrix, binary treatment, real outcome)."""

    w: np.ndarray
    a: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if w.ndim == 1:
            w = w[:, None]
        a = np.asarray(self.a)
        y = np.asarray(self.y, dtype=float)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "a", a.astype(np.int64))
        object.__setattr__(self, "y", y)
        n = w.shape[0]
        if n < 2:
            raise ValueError("need at least 2 observations")
        if a.shape != (n,) or y.shape != (n,):
            raise ValueError("w, a, y must have matching first dimension")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(y))):
            raise ValueError("non-finite entries in covariates or outcome")
        if not np.all(np.isin(self.a, (0, 1))):
            raise ValueError("treatment must be 0/1")
        if not np.any(self.a == 1):
            raise ValueError("no treated observations")

    @property
    def n(self) -> int:
        return int(self.w.shape[0])

    @property
    def n_covariates(self) -> int:
        return int(self.w.shape[1])

    def relabeled(self) -> "Dataset":
        """Swap treatment arms (for the control-side pipeline)."""
        return Dataset(self.w, 1 - self.a, self.y)


@dataclass(frozen=True)
class NuisanceSpec:
    """Which covariate columns feed each nuisance model.

    ``None`` means all columns. When ``include_ghat_in_outcome`` the fitted
    propensity enters the outcome design as one extra linear column, which
    guards the residual-monotone-in-g pathology of the e-score reduction.
    """

    propensity_covariates: tuple[int, ...] | None = None
    outcome_covariates: tuple[int, ...] | None = None
    include_ghat_in_outcome: bool = True
    kernel: KernelSpec = field(default_factory=KernelSpec)

    def cols(self, which: str, p: int) -> np.ndarray:
        sel = self.propensity_covariates if which == "propensity" else self.outcome_covariates
        idx = np.arange(p) if sel is None else np.asarray(sel, dtype=int)
        if idx.size and (idx.min() < 0 or idx.max() >= p):
            raise ValueError(f"{which} covariate indices out of range for p={p}")
        return idx


@dataclass(frozen=True)
class NuisanceFit:
    """Fitted nuisance values per observation plus prediction closures.

    m_hat (and everything derived from the outcome) lives on the scaled
    [0, 1] outcome; ``scaler`` maps back to the original scale. h_hat is
    exactly q_hat / g_hat.
    """

    g_hat: np.ndarray
    m_hat: np.ndarray
    r_hat: np.ndarray
    e_hat: np.ndarray
    q_hat: np.ndarray
    h_hat: np.ndarray
    scaler: OutcomeScaler
    predict_m: Callable[[np.ndarray], float]
    predict_g: Callable[[np.ndarray], float]
    propensity_fit: GlmFit
    outcome_fit: GlmFit
    bandwidths: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.propensity_fit.converged and self.outcome_fit.converged


def _design(w: np.ndarray, cols: np.ndarray, extra: np.ndarray | None = None) -> np.ndarray:
    parts = [np.ones((w.shape[0], 1)), w[:, cols]]
    if extra is not None:
        parts.append(extra[:, None])
    return np.hstack(parts)


def fit_propensity(data: Dataset, spec: NuisanceSpec):
    """Main-terms logistic regression of A on the selected columns.

    Returns per-observation clipped probabilities, a row-level prediction
    closure, and the underlying fit (converged flag included).
    """
    n1 = int(np.sum(data.a))
    if n1 < 2 or data.n - n1 < 2:
        raise ValueError("need at least 2 observations per treatment arm")
    cols = spec.cols("propensity", data.n_covariates)
    x = _design(data.w, cols)
    fit = fit_logistic(data.a.astype(float), x)
    g_hat = clip_prob(expit(x @ fit.coefficients))
    coef = fit.coefficients.copy()

    def predict_g(row: np.ndarray) -> float:
        row = np.asarray(row, dtype=float)
        eta = coef[0] + row[cols] @ coef[1:]
        return float(clip_prob(expit(eta)))

    return g_hat, predict_g, fit


def _natural_cubic_basis(x: np.ndarray, knots: np.ndarray) -> np.ndarray:
    """Natural cubic spline basis (linear tails): x plus K-2 curvature terms."""
    k_last = knots[-1]

    def curv(knot):
        return (np.maximum(x - knot, 0.0) ** 3 - np.maximum(x - k_last, 0.0) ** 3) / (k_last - knot)

    cols = [x]
    ref = curv(knots[-2])
    for knot in knots[:-2]:
        cols.append(curv(knot) - ref)
    return np.column_stack(cols)


def _ghat_smooth_columns(g_hat: np.ndarray, treated: np.ndarray, n_knots: int = 7):
    """Flexible propensity term for the outcome design.

    The smooth lives on the logit scale, where the extreme-weight tail is
    spread out instead of squashed against 0/1, so the outcome fit can track
    the outcome surface there and keep the targeting residuals tame. Falls
    back to the single logit column when the knots collapse.
    """
    eta = logit(g_hat)
    knots = np.unique(np.quantile(eta[treated], np.linspace(0.02, 0.98, n_knots)))
    if knots.size < 4 or float(np.ptp(eta[treated])) <= FLAT_TOL:
        return eta[:, None], None
    basis = _natural_cubic_basis(eta, knots)
    scale = basis[treated].std(axis=0)
    scale[scale == 0] = 1.0
    return basis / scale, (knots, scale)




def fit_outcome(data: Dataset, spec: NuisanceSpec, g_hat: np.ndarray):
    """Treated-arm linear regression of the min-max scaled outcome.

    The outcome is scaled to [0, 1] with a 1% range pad; the design is main
    terms on the selected columns plus (optionally) a natural cubic spline
    in the logit of g_hat; predictions are clipped into the probability band
    so they can act as a logistic offset. Returns (m_hat, factory, scaler,
    fit) where factory(predict_g) builds the row-level prediction closure.
    """
    if int(np.sum(data.a)) < 2:
        raise ValueError("need at least 2 treated observations")
    scaler = OutcomeScaler.from_values(data.y)
    ys = scaler.scale(data.y)
    cols = spec.cols("outcome", data.n_covariates)

    if float(np.max(data.y) - np.min(data.y)) == 0.0:
        const = float(ys[0])
        m_hat = np.full(data.n, const)
        fit = GlmFit(np.array([const]), True, 0, 0.0)
        return m_hat, (lambda predict_g: (lambda row: const)), scaler, fit

    treated = data.a == 1
    smooth = None
    if spec.include_ghat_in_outcome:
        g_cols, smooth = _ghat_smooth_columns(np.asarray(g_hat, dtype=float), treated)
        x = np.hstack([_design(data.w, cols), g_cols])
    else:
        x = _design(data.w, cols)
    fit = fit_linear(ys, x, weights=data.a.astype(float))
    m_hat = clip_prob(x @ fit.coefficients)
    coef = fit.coefficients.copy()
    include_g = spec.include_ghat_in_outcome
    n_main = 1 + cols.size

    def make_predict(predict_g):
        def predict_m(row: np.ndarray) -> float:
            row = np.asarray(row, dtype=float)
            pred = coef[0] + row[cols] @ coef[1:n_main]
            if include_g:
                eta = float(logit(predict_g(row)))
                if smooth is None:
                    pred += coef[n_main] * eta
                else:
                    knots, scale = smooth
                    basis = _natural_cubic_basis(np.array([eta]), knots)[0] / scale
                    pred += basis @ coef[n_main:]
            return float(clip_prob(pred))

        return predict_m

    return m_hat, make_predict, scaler, fit


def _constant_prediction(n: int, values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return np.full(n, float(np.sum(weights * values) / np.sum(weights)))


def _flat(v: np.ndarray) -> bool:
    return float(np.ptp(v)) <= FLAT_TOL


def estimate_r(data: Dataset, g_hat, m_hat, scaler: OutcomeScaler, kernel: KernelSpec) -> np.ndarray:
    """Kernel regression of the scaled treated residual on the propensity.

    Training weights are the treatment indicators; evaluation covers every
    observation. Degenerate training (fewer than 2 treated, or no spread in
    g_hat among the treated) collapses to the treated-mean residual.
    """
    g_hat = np.asarray(g_hat, dtype=float)
    m_hat = np.asarray(m_hat, dtype=float)
    resid = scaler.scale(data.y) - m_hat
    w = data.a.astype(float)
    treated = data.a == 1
    if int(treated.sum()) < 2 or _flat(g_hat[treated]):
        return _constant_prediction(data.n, resid[treated], w[treated])
    return nw_regress(g_hat, resid, w, kernel, g_hat)


def estimate_e(data: Dataset, g_hat, r_hat, kernel: KernelSpec) -> np.ndarray:
    """Kernel regression of the propensity on the residual-bias values.

    Runs over all observations with unit weights; the result is clipped into
    the probability band. A flat r_hat yields the global propensity mean,
    the exact constant the reduction prescribes in that case.
    """
    g_hat = np.asarray(g_hat, dtype=float)
    r_hat = np.asarray(r_hat, dtype=float)
    if not np.all(np.isfinite(r_hat)):
        raise ValueError("r_hat must be finite")
    ones = np.ones(data.n)
    if _flat(r_hat):
        e = _constant_prediction(data.n, g_hat, ones)
    else:
        e = nw_regress(r_hat, g_hat, ones, kernel, r_hat)
    return clip_prob(e)


def estimate_q_h(data: Dataset, g_hat, e_hat, m_hat, kernel: KernelSpec):
    """Drift-correction regressions.

    q is the kernel regression of A (1/e - 1/g) on m_hat over all
    observations; h is q / g elementwise.
    """
    g_hat = np.asarray(g_hat, dtype=float)
    e_hat = np.asarray(e_hat, dtype=float)
    m_hat = np.asarray(m_hat, dtype=float)
    if np.any(g_hat <= 0) or np.any(e_hat <= 0):
        raise ValueError("g_hat and e_hat must be positive")
    t = data.a * (1.0 / e_hat - 1.0 / g_hat)
    ones = np.ones(data.n)
    if _flat(m_hat):
        q = _constant_prediction(data.n, t, ones)
    else:
        q = nw_regress(m_hat, t, ones, kernel, m_hat)
    h = q / g_hat
    return q, h


def _escore_kernel_spec(kernel: KernelSpec, n_eff: float) -> KernelSpec:
    # The response of the e regression (g_hat) is a deterministic transform
    # of its regressor (r_hat is built from g_hat on the same sample), so the
    # selection must be able to smooth past the estimation noise: stretch the
    # top of the auto grid from 2*sd*n^(-1/5) to ~4*sd (the full spread).
    if kernel.bandwidth is not None or kernel.grid is not None or kernel.selector != "loocv":
        return kernel
    lo, hi = kernel.grid_span
    return replace(kernel, grid_span=(lo, max(hi, 4.0 * float(n_eff) ** 0.2)))


def _r_noise_scale(data: Dataset, g_hat, r_hat, h_r: float, kernel: KernelSpec) -> float:
    """Amplitude of the estimation noise carried by r_hat.

    r_hat is smooth at the scale of its own bandwidth, so its component
    orthogonal to a 4x-coarser re-smoothing against g_hat is estimation
    wiggle, not signal. The e-score bandwidth CV excludes neighbourhoods of
    this radius so it cannot score well by reproducing that wiggle. A spread
    subsample of evaluation points is plenty to estimate one amplitude.
    """
    if data.n > 2000:
        order = np.argsort(g_hat, kind="stable")
        idx = order[np.round(np.linspace(0, data.n - 1, 2000)).astype(int)]
    else:
        idx = slice(None)
    coarse = nw_regress(g_hat, r_hat, np.ones(data.n), kernel.with_bandwidth(4.0 * h_r), g_hat[idx])
    return 2.0 * float(np.std(r_hat[idx] - coarse))


def fit_all(data: Dataset, spec: NuisanceSpec) -> NuisanceFit:
    """Run the whole pipeline and bundle the results.

    Deterministic given its inputs; bandwidths are resolved once per kernel
    regression and recorded in the returned fit. Arms too thin to support a
    regression (fewer than 2 observations on a side) degrade to constant
    fits instead of failing, so a 2-row dataset still completes.
    """
    n1 = int(np.sum(data.a))
    n0 = data.n - n1
    if n1 >= 2 and n0 >= 2:
        g_hat, predict_g, gfit = fit_propensity(data, spec)
    else:
        p = float(clip_prob(np.mean(data.a)))
        g_hat = np.full(data.n, p)
        predict_g = lambda row: p
        gfit = GlmFit(np.array([float(logit(p))]), True, 0, 0.0)

    if n1 >= 2:
        m_hat, make_predict_m, scaler, mfit = fit_outcome(data, spec, g_hat)
        predict_m = make_predict_m(predict_g)
    else:
        scaler = OutcomeScaler.from_values(data.y)
        const = float(clip_prob(np.mean(scaler.scale(data.y)[data.a == 1])))
        m_hat = np.full(data.n, const)
        predict_m = lambda row: const
        mfit = GlmFit(np.array([const]), True, 0, 0.0)

    resid = scaler.scale(data.y) - m_hat
    w_tr = data.a.astype(float)
    bandwidths: dict[str, float] = {}
    ones = np.ones(data.n)
    treated = data.a == 1

    r_noise = 0.0
    if int(treated.sum()) >= 2 and not _flat(g_hat[treated]):
        h_r = resolve_bandwidth(spec.kernel, g_hat, resid, w_tr)
        bandwidths["r"] = h_r
        r_hat = estimate_r(data, g_hat, m_hat, scaler, spec.kernel.with_bandwidth(h_r))
        if not _flat(r_hat):
            r_noise = _r_noise_scale(data, g_hat, r_hat, h_r, spec.kernel)
    else:
        r_hat = estimate_r(data, g_hat, m_hat, scaler, spec.kernel)

    if not _flat(r_hat):
        kernel_e = _escore_kernel_spec(spec.kernel, data.n)
        h_e = resolve_bandwidth(kernel_e, r_hat, g_hat, ones, exclusion_radius=r_noise)
        bandwidths["e"] = h_e
        e_hat = estimate_e(data, g_hat, r_hat, spec.kernel.with_bandwidth(h_e))
    else:
        e_hat = estimate_e(data, g_hat, r_hat, spec.kernel)

    t = data.a * (1.0 / e_hat - 1.0 / g_hat)
    if not _flat(m_hat):
        # one-SE parsimony: the response carries inverse-weight outliers, so
        # the literal risk minimiser is noise; smooth as much as the risk
        # curve statistically allows
        h_q = resolve_bandwidth(spec.kernel, m_hat, t, ones, one_se_rule=True)
        bandwidths["q"] = h_q
        q_hat, h_hat = estimate_q_h(data, g_hat, e_hat, m_hat, spec.kernel.with_bandwidth(h_q))
    else:
        q_hat, h_hat = estimate_q_h(data, g_hat, e_hat, m_hat, spec.kernel)

    return NuisanceFit(
        g_hat=g_hat,
        m_hat=m_hat,
        r_hat=r_hat,
        e_hat=e_hat,
        q_hat=q_hat,
        h_hat=h_hat,
        scaler=scaler,
        predict_m=predict_m,
        predict_g=predict_g,
        propensity_fit=gfit,
        outcome_fit=mfit,
        bandwidths=bandwidths,
    )
