"""Point estimators of counterfactual means and treatment effects.

Five estimators share one fitted :class:`~escore.nuisance.NuisanceFit`:

* ``gcomp`` -- plug-in mean of the outcome regression.
* ``aipw`` -- the inverse-probability-augmented estimating equation solved
  directly; unbounded, can leave the outcome range.
* ``tmle`` -- logistic tilt of the outcome fit along 1/g until the weighted
  residual score is zero; a bounded plug-in.
* ``etmle`` -- the same tilt with the e-score replacing the propensity.
  No standard error is reported for it (there is no validated one).
* ``etmle_al`` -- a bivariate tilt along (1/e, h) that additionally zeroes
  the drift-targeting score, restoring asymptotic linearity and so Wald
  intervals.

All tilting happens on the min-max scaled outcome; point estimates and
influence values are mapped back to the original scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .nuisance import Dataset, NuisanceFit, NuisanceSpec, fit_all
from .numkit import expit, logit_of_prob

__all__ = [
    "ESTIMATOR_IDS",
    "TargetSpec",
    "EstimateReport",
    "gcomp",
    "aipw",
    "tmle",
    "etmle_al",
    "run_estimator",
    "estimate",
]

ESTIMATOR_IDS = ("gcomp", "aipw", "tmle", "etmle", "etmle_al")

TARGETS = ("mean_y1", "mean_y0", "ate")


@dataclass(frozen=True)
class TargetSpec:
    target: str = "ate"
    alpha: float = 0.05

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"unknown target {self.target!r}")
        if not 0.0 < self.alpha <= 0.5:
            raise ValueError("alpha must lie in (0, 0.5]")


@dataclass(frozen=True)
class EstimateReport:
    estimator_id: str
    theta_hat: float
    se: float | None
    ci: tuple[float, float] | None
    alpha: float
    if_values: np.ndarray | None
    diagnostics: dict


def _z(alpha: float) -> float:
    return float(stats.norm.ppf(1.0 - alpha / 2.0))


def _wald(theta: float, if_values: np.ndarray, alpha: float):
    n = if_values.size
    se = float(np.sqrt(np.mean(if_values**2) - np.mean(if_values) ** 2) / np.sqrt(n))
    half = _z(alpha) * se
    return se, (theta - half, theta + half)


def _check_fit(data: Dataset, fit: NuisanceFit):
    if fit.g_hat.shape != (data.n,):
        raise ValueError("nuisance fit does not match the dataset length")


def gcomp(data: Dataset, fit: NuisanceFit, alpha: float = 0.05) -> EstimateReport:
    """Plug-in mean of the fitted outcome regression. No standard error."""
    _check_fit(data, fit)
    theta_s = float(np.mean(fit.m_hat))
    return EstimateReport(
        estimator_id="gcomp",
        theta_hat=float(fit.scaler.unscale(theta_s)),
        se=None,
        ci=None,
        alpha=alpha,
        if_values=None,
        diagnostics={},
    )


def aipw(data: Dataset, fit: NuisanceFit, alpha: float = 0.05) -> EstimateReport:
    """Augmented inverse probability weighting on the scaled outcome."""
    _check_fit(data, fit)
    ys = fit.scaler.scale(data.y)
    terms = data.a / fit.g_hat * (ys - fit.m_hat) + fit.m_hat
    theta_s = float(np.mean(terms))
    if_values = fit.scaler.span * (terms - theta_s)
    theta = float(fit.scaler.unscale(theta_s))
    se, ci = _wald(theta, if_values, alpha)
    return EstimateReport(
        estimator_id="aipw",
        theta_hat=theta,
        se=se,
        ci=ci,
        alpha=alpha,
        if_values=if_values,
        diagnostics={"weight_var": float(np.var(1.0 / fit.g_hat))},
    )


def _tilt(ys, a, offset, covariates):
    """Fit the logistic tilting model among treated rows; returns the tilted
    outcome values for every row plus the fit and its score vector."""
    from .numkit import fit_logistic

    treated = a == 1
    glm = fit_logistic(ys[treated], covariates[treated], offset=offset[treated])
    m_tilde = expit(offset + covariates @ glm.coefficients)
    scores = covariates[treated].T @ (ys[treated] - m_tilde[treated])
    return m_tilde, glm, scores


def tmle(data: Dataset, fit: NuisanceFit, weight_source: str = "ghat", alpha: float = 0.05) -> EstimateReport:
    """One-parameter targeted tilt of the outcome regression.

    ``weight_source="ghat"`` is the classic targeted estimator with a
    Wald interval from the plugged-in estimating function;
    ``weight_source="ehat"`` swaps in the e-score and reports the point
    estimate only.
    """
    _check_fit(data, fit)
    if weight_source not in ("ghat", "ehat"):
        raise ValueError(f"unknown weight_source {weight_source!r}")
    w_src = fit.g_hat if weight_source == "ghat" else fit.e_hat
    ys = fit.scaler.scale(data.y)
    offset = logit_of_prob(fit.m_hat)
    cov = (1.0 / w_src)[:, None]
    m_tilde, glm, scores = _tilt(ys, data.a, offset, cov)
    theta_s = float(np.mean(m_tilde))
    theta = float(fit.scaler.unscale(theta_s))
    diagnostics = {
        "beta": float(glm.coefficients[0]),
        "converged": float(glm.converged),
        "iterations": float(glm.iterations),
        "max_abs_score": float(np.max(np.abs(scores))),
        "weight_var": float(np.var(1.0 / w_src)),
    }
    if weight_source == "ehat":
        return EstimateReport("etmle", theta, None, None, alpha, None, diagnostics)
    if_values = fit.scaler.span * (data.a / fit.g_hat * (ys - m_tilde) + m_tilde - theta_s)
    se, ci = _wald(theta, if_values, alpha)
    return EstimateReport("tmle", theta, se, ci, alpha, if_values, diagnostics)


def etmle_al(data: Dataset, fit: NuisanceFit, alpha: float = 0.05) -> EstimateReport:
    """Bivariate tilt along (1/e, h) with a drift-corrected Wald interval.

    The influence values are a (1/e - q/g)-weighted residual against the
    tilted outcome plus the untilted regression centred at the estimate,
    exactly the variance construction the asymptotic-linearity analysis
    prescribes. A second tilting column collinear with the first (or zero)
    is dropped and flagged.
    """
    _check_fit(data, fit)
    ys = fit.scaler.scale(data.y)
    offset = logit_of_prob(fit.m_hat)
    c1 = 1.0 / fit.e_hat
    c2 = fit.h_hat
    treated = data.a == 1
    c1t, c2t = c1[treated], c2[treated]
    # drop h when it carries no direction beyond 1/e among treated rows
    denom = float(c1t @ c1t)
    resid = c2t - (float(c1t @ c2t) / denom) * c1t if denom > 0 else c2t
    drop_h = float(np.linalg.norm(resid)) <= 1e-10 * max(1.0, float(np.linalg.norm(c2t)))
    cov = c1[:, None] if drop_h else np.column_stack([c1, c2])
    m_tilde, glm, scores = _tilt(ys, data.a, offset, cov)
    beta1 = float(glm.coefficients[0])
    beta2 = 0.0 if drop_h else float(glm.coefficients[1])
    score1 = float(scores[0])
    score2 = float(np.sum(c2t * (ys[treated] - m_tilde[treated])))
    theta_s = float(np.mean(m_tilde))
    theta = float(fit.scaler.unscale(theta_s))
    if_values = fit.scaler.span * (
        data.a * (1.0 / fit.e_hat - fit.q_hat / fit.g_hat) * (ys - m_tilde) + fit.m_hat - theta_s
    )
    se, ci = _wald(theta, if_values, alpha)
    diagnostics = {
        "beta1": beta1,
        "beta2": beta2,
        "converged": float(glm.converged),
        "iterations": float(glm.iterations),
        "max_abs_score": float(max(abs(score1), abs(score2))),
        "hhat_dropped": float(drop_h),
        "weight_var": float(np.var(1.0 / fit.e_hat)),
    }
    return EstimateReport("etmle_al", theta, se, ci, alpha, if_values, diagnostics)


def run_estimator(estimator_id: str, data: Dataset, fit: NuisanceFit, alpha: float = 0.05) -> EstimateReport:
    if estimator_id == "gcomp":
        return gcomp(data, fit, alpha)
    if estimator_id == "aipw":
        return aipw(data, fit, alpha)
    if estimator_id == "tmle":
        return tmle(data, fit, "ghat", alpha)
    if estimator_id == "etmle":
        return tmle(data, fit, "ehat", alpha)
    if estimator_id == "etmle_al":
        return etmle_al(data, fit, alpha)
    raise ValueError(f"unknown estimator {estimator_id!r}")


def _combine_arms(r1: EstimateReport, r0: EstimateReport, alpha: float) -> EstimateReport:
    theta = r1.theta_hat - r0.theta_hat
    diagnostics = {f"arm1_{k}": v for k, v in r1.diagnostics.items()}
    diagnostics.update({f"arm0_{k}": v for k, v in r0.diagnostics.items()})
    if r1.if_values is not None and r0.if_values is not None:
        if_values = r1.if_values - r0.if_values
        se, ci = _wald(theta, if_values, alpha)
    else:
        if_values, se, ci = None, None, None
    return EstimateReport(r1.estimator_id, theta, se, ci, alpha, if_values, diagnostics)


def estimate(
    data: Dataset,
    spec: NuisanceSpec,
    target: TargetSpec | None = None,
    which: tuple[str, ...] | None = None,
    return_fits: bool = False,
):
    """Fit nuisances and run the requested estimators for the target.

    The control side (for ``mean_y0`` and the subtrahend of ``ate``) relabels
    the treatment and reruns the entire nuisance pipeline: the propensity,
    the outcome regression among the new treated arm, and the whole e-score
    chain are all arm-specific. For ``ate`` the influence values subtract
    pairwise and the interval comes from the differenced values.
    """
    target = target or TargetSpec()
    which = tuple(which) if which is not None else ESTIMATOR_IDS
    for est in which:
        if est not in ESTIMATOR_IDS:
            raise ValueError(f"unknown estimator {est!r}")

    need_arm1 = target.target in ("mean_y1", "ate")
    need_arm0 = target.target in ("mean_y0", "ate")
    if need_arm0 and not np.any(data.a == 0):
        raise ValueError("target requires the control arm but no observations have a=0")
    if need_arm1 and not np.any(data.a == 1):
        raise ValueError("target requires the treated arm but no observations have a=1")

    fit1 = fit_all(data, spec) if need_arm1 else None
    fit0 = fit_all(data.relabeled(), spec) if need_arm0 else None

    reports = []
    for est in which:
        if target.target == "mean_y1":
            reports.append(run_estimator(est, data, fit1, target.alpha))
        elif target.target == "mean_y0":
            reports.append(run_estimator(est, data.relabeled(), fit0, target.alpha))
        else:
            r1 = run_estimator(est, data, fit1, target.alpha)
            r0 = run_estimator(est, data.relabeled(), fit0, target.alpha)
            reports.append(_combine_arms(r1, r0, target.alpha))
    if return_fits:
        return reports, fit1, fit0
    return reports
