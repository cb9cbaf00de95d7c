"""Censored-survival statistics.

Time-dependent concordance (Antolini), IPCW Brier and integrated Brier
score, Kaplan-Meier product-limit curves, the two-group logrank test, Cox
proportional-hazards fitting by Newton-Raphson with Breslow (or Efron) tie
handling, Grambsch-Therneau Schoenfeld diagnostics, median-threshold
dichotomization and percentile-bootstrap confidence intervals.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2 as _chi2

from . import kernels
from .errors import (
    ConvergenceError,
    DegenerateDesignError,
    UndefinedMetricError,
)
from .survival import record_arrays

G_FLOOR = 1e-6  # IPCW weights below this exclude the patient (counted warning)


@dataclass(frozen=True)
class SurvCurve:
    """Right-continuous survival step function starting at 1."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        if t.shape != v.shape or t.ndim != 1:
            raise ValueError("times and values must be 1-D and aligned")
        if t.size and (np.any(np.diff(t) <= 0) or np.any(v < -1e-12) or np.any(v > 1 + 1e-12)):
            raise ValueError("times must increase strictly; values must lie in [0, 1]")
        if t.size and np.any(np.diff(v) > 1e-12):
            raise ValueError("survival values must be non-increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def survival_at(self, t):
        """S(t); equals 1 before the first step."""
        if self.times.size == 0:
            return np.ones_like(np.asarray(t, dtype=np.float64))
        idx = np.searchsorted(self.times, t, side="right") - 1
        return np.where(idx < 0, 1.0, self.values[np.maximum(idx, 0)])

    def survival_before(self, t):
        """Left limit S(t-)."""
        if self.times.size == 0:
            return np.ones_like(np.asarray(t, dtype=np.float64))
        idx = np.searchsorted(self.times, t, side="left") - 1
        return np.where(idx < 0, 1.0, self.values[np.maximum(idx, 0)])


@dataclass(frozen=True)
class ExpCurve:
    """Exponential survival curve S(t) = exp(-rate * t); risk-score adapter."""

    rate: float

    def survival_at(self, t):
        return np.exp(-self.rate * np.asarray(t, dtype=np.float64))


def curves_from_risk(scores, scale=0.05):
    """Map risk scores (higher = worse) onto exponential survival curves."""
    return [ExpCurve(scale * float(np.exp(s))) for s in np.asarray(scores)]


@dataclass(frozen=True)
class TestResult:
    statistic: float
    df: int
    p_value: float

    def __post_init__(self):
        if not (0.0 <= self.p_value <= 1.0):
            raise ValueError(f"p-value {self.p_value} outside [0, 1]")
        if self.statistic < 0:
            raise ValueError(f"chi-square statistic {self.statistic} negative")


@dataclass
class CoxFit:
    """Converged Cox model: coefficients, information, likelihood, baseline hazard."""

    beta: np.ndarray
    info: np.ndarray
    loglik: float
    n_iter: int
    ties: str
    baseline_times: np.ndarray = field(repr=False)
    baseline_cumhaz: np.ndarray = field(repr=False)

    def std_errors(self):
        return np.sqrt(np.diag(np.linalg.inv(self.info)))

    def z_scores(self):
        return self.beta / self.std_errors()

    def survival_curves(self, covariates):
        """Per-row predicted survival S(t) = exp(-H0(t) * exp(x beta))."""
        x = np.atleast_2d(np.asarray(covariates, dtype=np.float64))
        lp = x @ self.beta
        out = []
        for v in lp:
            vals = np.exp(-self.baseline_cumhaz * np.exp(v))
            out.append(SurvCurve(self.baseline_times, np.minimum(vals, 1.0)))
        return out


# ---------------------------------------------------------------------------
# nonparametric estimates


def kaplan_meier(records):
    """Product-limit estimator; censored patients leave the risk set silently."""
    if len(records) == 0:
        raise ValueError("need at least one record")
    times, events = record_arrays(records)
    order = np.argsort(times, kind="stable")
    times, events = times[order], events[order]
    at_risk = len(times)
    s = 1.0
    step_t, step_v = [], []
    for t in np.unique(times):
        mask = times == t
        d = int(events[mask].sum())
        if d > 0:
            s *= 1.0 - d / at_risk
            step_t.append(t)
            step_v.append(s)
        at_risk -= int(mask.sum())
    return SurvCurve(np.array(step_t), np.array(step_v))


def censoring_km(records):
    """Kaplan-Meier of the censoring distribution (event roles flipped)."""
    return kaplan_meier([type(r)(r.time, 1 - r.event) for r in records])


def logrank(records_a, records_b):
    """Two-group logrank chi-square test with 1 degree of freedom."""
    if len(records_a) == 0 or len(records_b) == 0:
        raise ValueError("both groups must be nonempty")
    ta, ea = record_arrays(records_a)
    tb, eb = record_arrays(records_b)
    if ea.sum() + eb.sum() == 0:
        raise UndefinedMetricError("logrank undefined with zero events")
    event_times = np.unique(np.concatenate([ta[ea == 1], tb[eb == 1]]))
    obs_a = 0.0
    exp_a = 0.0
    var = 0.0
    for t in event_times:
        n1 = int(np.sum(ta >= t))
        n2 = int(np.sum(tb >= t))
        n = n1 + n2
        d1 = int(np.sum((ta == t) & (ea == 1)))
        d2 = int(np.sum((tb == t) & (eb == 1)))
        d = d1 + d2
        if n == 0:
            continue
        obs_a += d1
        exp_a += d * n1 / n
        if n > 1:
            var += d * (n1 / n) * (n2 / n) * (n - d) / (n - 1)
    if var <= 0:
        stat = 0.0
    else:
        stat = (obs_a - exp_a) ** 2 / var
    return TestResult(float(stat), 1, float(_chi2.sf(stat, 1)))


# ---------------------------------------------------------------------------
# discrimination and calibration


def _surv_eval_matrix(curves, times):
    n = len(curves)
    out = np.empty((n, n))
    for a, c in enumerate(curves):
        out[a] = c.survival_at(times)
    return out


def c_td(curves, records):
    """Time-dependent concordance over comparable pairs.

    A pair (i, j) is comparable when i is uncensored and s_i < s_j;
    concordant when S_i(s_i) < S_j(s_i); predicted-survival ties score 0.5.
    """
    if len(records) < 2:
        raise UndefinedMetricError("concordance needs at least 2 patients")
    times, events = record_arrays(records)
    surv_eval = _surv_eval_matrix(curves, times)
    conc, comp = kernels.ctd_counts(surv_eval, times, events)
    if comp == 0:
        raise UndefinedMetricError("no comparable pairs in cohort")
    return conc / comp


def c_td_from_matrix(surv_eval, times, events):
    """c_td with the survival-evaluation matrix precomputed (bootstrap path)."""
    conc, comp = kernels.ctd_counts(surv_eval, times, events)
    if comp == 0:
        raise UndefinedMetricError("no comparable pairs in cohort")
    return conc / comp


def brier(curves, records, t, censor_km=None):
    """IPCW-weighted squared error of predicted survival at time t.

    Patients dead by t weigh 1/G(s-), survivors 1/G(t); patients censored
    by t contribute nothing. Patients whose weight denominator falls below
    G_FLOOR are excluded with a counted warning.
    """
    times, events = record_arrays(records)
    if censor_km is None:
        censor_km = censoring_km(records)
    s_t = np.array([float(c.survival_at(t)) for c in curves])
    g_at_t = float(censor_km.survival_at(t))
    g_before = np.asarray(censor_km.survival_before(times), dtype=np.float64)
    total = 0.0
    included = 0
    excluded = 0
    for i in range(len(records)):
        if times[i] <= t and events[i] == 1:
            g = g_before[i]
            if g < G_FLOOR:
                excluded += 1
                continue
            total += (s_t[i] ** 2) / g
            included += 1
        elif times[i] > t:
            if g_at_t < G_FLOOR:
                excluded += 1
                continue
            total += ((1.0 - s_t[i]) ** 2) / g_at_t
            included += 1
        else:  # censored on or before t
            included += 1
    if excluded:
        warnings.warn(
            f"brier(t={t}): excluded {excluded} patients with IPCW weight below "
            f"{G_FLOOR}",
            stacklevel=2,
        )
    if included == 0:
        raise UndefinedMetricError(f"no usable patients at t={t}")
    return total / included


def trapezoid_mean(ts, values):
    """Trapezoidal integral of sampled values divided by the interval length."""
    ts = np.asarray(ts, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    span = ts[-1] - ts[0]
    if span <= 0:
        raise ValueError("need a positive integration span")
    return float(np.trapezoid(values, ts) / span)


def integrated_brier(curves, records, t_max, censor_km=None):
    """Brier score averaged over a monthly grid [0, t_max] by the trapezoid rule."""
    if t_max <= 0:
        raise ValueError(f"t_max must be > 0, got {t_max}")
    if censor_km is None:
        censor_km = censoring_km(records)
    ts = np.arange(0.0, float(t_max) + 1e-9, 1.0)
    if ts[-1] < t_max:
        ts = np.append(ts, float(t_max))
    scores = [brier(curves, records, t, censor_km) for t in ts]
    return trapezoid_mean(ts, scores)


def dichotomize(curves, threshold_months):
    """Label patients favorable when predicted S(threshold) >= 0.5."""
    return [
        "favorable" if float(c.survival_at(threshold_months)) >= 0.5 else "unfavorable"
        for c in curves
    ]


# ---------------------------------------------------------------------------
# Cox proportional hazards


def _efron_sums(times, events, x, xb):
    """Efron tie handling, plain numpy (optional path, desk-scale cohorts)."""
    n, q = x.shape
    w = np.exp(xb)
    order_groups = []
    i = 0
    while i < n:
        j = i
        while j < n and times[j] == times[i]:
            j += 1
        order_groups.append((i, j))
        i = j
    s0 = 0.0
    s1 = np.zeros(q)
    s2 = np.zeros((q, q))
    loglik = 0.0
    grad = np.zeros(q)
    info = np.zeros((q, q))
    for i, j in order_groups:
        for m in range(i, j):
            wm = w[m]
            s0 += wm
            s1 += wm * x[m]
            s2 += wm * np.outer(x[m], x[m])
        ev = [m for m in range(i, j) if events[m] == 1]
        d = len(ev)
        if d == 0:
            continue
        t0 = float(np.sum(w[ev]))
        t1 = (w[ev, None] * x[ev]).sum(axis=0)
        t2 = np.einsum("m,ma,mb->ab", w[ev], x[ev], x[ev])
        for l in range(d):
            f = l / d
            a0 = s0 - f * t0
            a1 = s1 - f * t1
            a2 = s2 - f * t2
            mu = a1 / a0
            loglik += float(xb[ev[l]]) - np.log(a0)
            grad += x[ev[l]] - mu
            info += a2 / a0 - np.outer(mu, mu)
    return loglik, grad, info


def _cox_objective(beta, times, events, x, ties):
    xb = x @ beta
    if ties == "breslow":
        return kernels.cox_breslow(times, events, x, xb)
    return _efron_sums(times, events, x, xb)


def cox_loglik(beta, covariates, records, ties="breslow"):
    """Log partial likelihood at beta (used by gradient checks and tests)."""
    times, events = record_arrays(records)
    x = np.asarray(covariates, dtype=np.float64)
    order = np.argsort(-times, kind="stable")
    ll, _, _ = _cox_objective(
        np.asarray(beta, dtype=np.float64), times[order], events[order], x[order], ties
    )
    return ll


def fit_coxph(covariates, records, ties="breslow", max_iter=50, tol=1e-8):
    """Newton-Raphson maximization of the Cox log partial likelihood.

    Converges when the gradient max-norm drops below ``tol``; raises
    ConvergenceError after ``max_iter`` iterations (monotone likelihood) and
    DegenerateDesignError when the information matrix is singular.
    """
    x = np.asarray(covariates, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("covariates must be 2-D (patients x covariates)")
    n, q = x.shape
    if n != len(records):
        raise ValueError("covariate rows must match records")
    if n <= q:
        raise DegenerateDesignError(f"need n > q, got n={n}, q={q}")
    if np.any(x.std(axis=0) == 0):
        raise DegenerateDesignError("constant covariate column")
    if ties not in ("breslow", "efron"):
        raise ValueError(f"unknown tie handling {ties!r}")
    times, events = record_arrays(records)
    if events.sum() == 0:
        raise DegenerateDesignError("no events: partial likelihood is constant")
    order = np.argsort(-times, kind="stable")
    td, ed, xd = times[order], events[order], np.ascontiguousarray(x[order])

    beta = np.zeros(q)
    loglik, grad, info = _cox_objective(beta, td, ed, xd, ties)
    it = 0
    while np.max(np.abs(grad)) >= tol:
        it += 1
        if it > max_iter:
            raise ConvergenceError(
                f"Newton did not converge in {max_iter} iterations "
                "(monotone likelihood / perfect separation?)"
            )
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            raise DegenerateDesignError("singular information matrix") from None
        # step-halving keeps the likelihood non-decreasing
        scale = 1.0
        accepted = False
        for _ in range(40):
            candidate = beta + scale * step
            new_ll, new_grad, new_info = _cox_objective(candidate, td, ed, xd, ties)
            if np.isfinite(new_ll) and new_ll >= loglik - 1e-12:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            raise ConvergenceError("no likelihood-improving step found")
        beta, loglik, grad, info = candidate, new_ll, new_grad, new_info

    # Under monotone likelihood (perfect separation) the gradient and the
    # curvature vanish together while beta runs off to infinity, so the
    # gradient test can trigger spuriously; a genuine interior optimum leaves
    # a negligible residual Newton step.
    try:
        residual_step = np.linalg.solve(info, grad)
    except np.linalg.LinAlgError:
        raise ConvergenceError(
            "monotone likelihood: information matrix flat at the boundary"
        ) from None
    if np.max(np.abs(residual_step)) > 1e-4:
        raise ConvergenceError(
            "monotone likelihood / perfect separation: optimum at infinity"
        )

    bl_t, bl_h = _breslow_baseline(beta, times, events, x)
    return CoxFit(
        beta=beta,
        info=info,
        loglik=loglik,
        n_iter=it,
        ties=ties,
        baseline_times=bl_t,
        baseline_cumhaz=bl_h,
    )


def _breslow_baseline(beta, times, events, x):
    """Breslow cumulative baseline hazard at the distinct event times."""
    w = np.exp(x @ beta)
    ev_times = np.unique(times[events == 1])
    h = np.empty(ev_times.size)
    for k, t in enumerate(ev_times):
        d = int(np.sum((times == t) & (events == 1)))
        h[k] = d / float(np.sum(w[times >= t]))
    return ev_times, np.cumsum(h)


# ---------------------------------------------------------------------------
# proportional-hazards diagnostics


def _schoenfeld_residuals(fit, records, covariates):
    """Unscaled Schoenfeld residuals at event times (ascending), with the
    risk-set covariate mean under the fitted beta."""
    x = np.asarray(covariates, dtype=np.float64)
    times, events = record_arrays(records)
    w = np.exp(x @ fit.beta)
    ev_idx = np.nonzero(events == 1)[0]
    ev_order = ev_idx[np.argsort(times[ev_idx], kind="stable")]
    resid = np.empty((ev_order.size, x.shape[1]))
    ev_times = np.empty(ev_order.size)
    for k, i in enumerate(ev_order):
        at_risk = times >= times[i]
        ww = w[at_risk]
        resid[k] = x[i] - (ww[:, None] * x[at_risk]).sum(axis=0) / ww.sum()
        ev_times[k] = times[i]
    return ev_times, resid


def _zph_statistics(resid, g, info_inv, d):
    """Grambsch-Therneau per-covariate score statistics from residuals.

    ``g`` is the (uncentered) time transform at the event times; scaled
    residuals are d * resid @ info_inv; the statistic for covariate j is
    z_j^2 / (d * info_inv[j, j] * sum((g - mean g)^2)).
    """
    gc = g - g.mean()
    denom_g = float(np.sum(gc * gc))
    scaled = d * resid @ info_inv
    z = gc @ scaled
    stats = z**2 / (d * np.diag(info_inv) * denom_g)
    return stats


def schoenfeld_test(fit, records, covariates, transform="rank"):
    """Per-covariate test of zero correlation between scaled Schoenfeld
    residuals and a transform of event time (rank by default, 'km' optional).

    Returns one TestResult (df=1) per covariate.
    """
    times, events = record_arrays(records)
    d = int(events.sum())
    if d < 5:
        raise ValueError(f"need at least 5 events, got {d}")
    ev_times, resid = _schoenfeld_residuals(fit, records, covariates)
    if transform == "rank":
        # average ranks over tied event times
        _, inv, counts = np.unique(ev_times, return_inverse=True, return_counts=True)
        start = np.concatenate([[0], np.cumsum(counts)[:-1]])
        g = (start + (counts - 1) / 2.0)[inv] + 1.0
    elif transform == "km":
        km = kaplan_meier(records)
        g = 1.0 - np.asarray(km.survival_before(ev_times), dtype=np.float64)
    else:
        raise ValueError(f"unknown transform {transform!r}")
    info_inv = np.linalg.inv(fit.info)
    stats = _zph_statistics(resid, g, info_inv, d)
    return [TestResult(float(s), 1, float(_chi2.sf(s, 1))) for s in stats]


# ---------------------------------------------------------------------------
# bootstrap confidence intervals


def bootstrap_ci(stat_fn, n, n_boot, seed):
    """Percentile bootstrap of a statistic computed from resample indices.

    ``stat_fn`` receives an index array into the cohort and returns a float.
    Per-resample RNGs derive deterministically from (seed, resample index);
    resample values are sorted before reduction so any evaluation order
    yields identical results. Resamples where the statistic is undefined are
    skipped and counted.
    """
    values = []
    skipped = 0
    for b in range(n_boot):
        rng = np.random.default_rng([seed, b])
        idx = rng.integers(0, n, size=n)
        try:
            values.append(float(stat_fn(idx)))
        except UndefinedMetricError:
            skipped += 1
    if not values:
        raise UndefinedMetricError("statistic undefined on every bootstrap resample")
    values = np.sort(np.asarray(values))
    lo, hi = np.percentile(values, [2.5, 97.5])
    return {
        "mean": float(values.mean()),
        "lo": float(lo),
        "hi": float(hi),
        "margin": float((hi - lo) / 2.0),
        "n_resamples": len(values),
        "n_skipped": skipped,
    }
