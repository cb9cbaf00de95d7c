"""Hot numeric inner loops: numba-jitted kernels with pure-numpy fallbacks.

The jitted path is used when numba imports cleanly unless the environment
variable ``SURVFUSE_NUMBA`` is set to ``0``. Both backends stay importable
(``*_numba`` / ``*_numpy``) so tests and benchmarks can compare them.

Kernels here are the O(n^2) pairwise concordance count (dominant cost of the
bootstrap) and the risk-set accumulation of the Cox partial likelihood
(dominant cost of the Newton fits in simulations).
"""

import os

import numpy as np


def _ctd_counts_py(surv_eval, times, events):
    """Antolini pair counts.

    surv_eval[a, i] is patient a's predicted survival evaluated at patient
    i's observed time. Pairs (i, j) with i uncensored and s_i < s_j are
    comparable; concordant when S_i(s_i) < S_j(s_i), ties score 0.5.
    Returns (concordant_weight, comparable_pairs).
    """
    n = times.shape[0]
    conc = 0.0
    comp = 0
    for i in range(n):
        if events[i] != 1:
            continue
        own = surv_eval[i, i]
        ti = times[i]
        for j in range(n):
            if ti < times[j]:
                other = surv_eval[j, i]
                if own < other:
                    conc += 1.0
                elif own == other:
                    conc += 0.5
                comp += 1
    return conc, comp


def ctd_counts_numpy(surv_eval, times, events):
    """Vectorized fallback for the pair counts (same comparisons, same result)."""
    own = np.diagonal(surv_eval)[:, None]
    other = surv_eval.T  # other[i, j] = S_j(s_i)
    comparable = (events[:, None] == 1) & (times[:, None] < times[None, :])
    conc = np.sum(comparable & (own < other)) + 0.5 * np.sum(
        comparable & (own == other)
    )
    return float(conc), int(comparable.sum())


def _cox_breslow_py(times, events, x, xb):
    """Breslow log partial likelihood, gradient and observed information.

    Inputs must be sorted by time descending; tied times share one risk set.
    """
    n, q = x.shape
    s0 = 0.0
    s1 = np.zeros(q)
    s2 = np.zeros((q, q))
    loglik = 0.0
    grad = np.zeros(q)
    info = np.zeros((q, q))
    i = 0
    while i < n:
        j = i
        while j < n and times[j] == times[i]:
            w = np.exp(xb[j])
            s0 += w
            for a in range(q):
                wxa = w * x[j, a]
                s1[a] += wxa
                for b in range(q):
                    s2[a, b] += wxa * x[j, b]
            j += 1
        for m in range(i, j):
            if events[m] == 1:
                loglik += xb[m] - np.log(s0)
                for a in range(q):
                    mu_a = s1[a] / s0
                    grad[a] += x[m, a] - mu_a
                    for b in range(q):
                        info[a, b] += s2[a, b] / s0 - mu_a * (s1[b] / s0)
        i = j
    return loglik, grad, info


def cox_breslow_numpy(times, events, x, xb):
    """Vectorized fallback via cumulative risk-set sums (times descending)."""
    n, q = x.shape
    w = np.exp(xb)
    s0c = np.cumsum(w)
    s1c = np.cumsum(w[:, None] * x, axis=0)
    s2c = np.cumsum(w[:, None, None] * (x[:, :, None] * x[:, None, :]), axis=0)
    run_end = np.concatenate([np.nonzero(np.diff(times))[0], [n - 1]])
    end_for = run_end[np.searchsorted(run_end, np.arange(n), side="left")]
    ev = events == 1
    ge = end_for[ev]
    s0 = s0c[ge]
    mu = s1c[ge] / s0[:, None]
    loglik = float(np.sum(xb[ev] - np.log(s0)))
    grad = np.sum(x[ev] - mu, axis=0)
    info = np.sum(s2c[ge] / s0[:, None, None] - mu[:, :, None] * mu[:, None, :], axis=0)
    return loglik, grad, info


def _resolve_backend():
    if os.environ.get("SURVFUSE_NUMBA", "1") == "0":
        return False
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


USE_NUMBA = _resolve_backend()

if USE_NUMBA:
    from numba import njit

    ctd_counts_numba = njit(cache=True)(_ctd_counts_py)
    cox_breslow_numba = njit(cache=True)(_cox_breslow_py)
    ctd_counts = ctd_counts_numba
    cox_breslow = cox_breslow_numba
else:
    ctd_counts = ctd_counts_numpy
    cox_breslow = cox_breslow_numpy
