"""Discrete-time survival head.

Five-bin percentile time grid over training survival times, a softmax PMF
over the bins, the cumulative incidence function it implies, monthly
linearly-interpolated survival curves, and the two-part training loss
(censoring-aware log-likelihood plus pairwise ranking penalty).
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, InsufficientDataError, NumericError

N_BINS = 5
LOG_FLOOR = 1e-12
EDGE_EPS = 1e-6  # months; tie-nudge for degenerate percentile edges


@dataclass(frozen=True)
class EventRecord:
    """One patient outcome: observed months and event label (1 death, 0 censored)."""

    time: float
    event: int

    def __post_init__(self):
        if not (np.isfinite(self.time) and self.time > 0):
            raise ValueError(f"time must be finite and > 0, got {self.time}")
        if self.event not in (0, 1):
            raise ValueError(f"event must be 0 or 1, got {self.event}")


def record_arrays(records):
    times = np.array([r.time for r in records], dtype=np.float64)
    events = np.array([r.event for r in records], dtype=np.int64)
    return times, events


def records_from_arrays(times, events):
    return [EventRecord(float(t), int(e)) for t, e in zip(times, events)]


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing bin upper edges in months; the origin is 0."""

    edges: tuple

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.float64)
        if e.ndim != 1 or len(e) < 1:
            raise ValueError("edges must be a non-empty 1-D sequence")
        if not np.all(e > 0) or not np.all(np.diff(e) > 0):
            raise ValueError(f"edges must be strictly increasing and positive: {self.edges}")
        object.__setattr__(self, "edges", tuple(float(v) for v in e))

    @property
    def n_bins(self):
        return len(self.edges)

    def bin_index(self, time):
        """First bin whose upper edge covers ``time``; late times map to the last bin."""
        return int(self.bin_indices(np.array([time]))[0])

    def bin_indices(self, times):
        times = np.asarray(times, dtype=np.float64)
        idx = np.searchsorted(np.asarray(self.edges), times, side="left")
        return np.minimum(idx, self.n_bins - 1)


def build_time_grid(training_times, n_bins=N_BINS):
    """Bin edges at the 20/40/.../100th nearest-rank percentiles of training times.

    Censored and uncensored times are both included. Tied edges are nudged
    upward by EDGE_EPS so the grid stays strictly increasing.
    """
    times = np.asarray(training_times, dtype=np.float64)
    if times.size < n_bins:
        raise InsufficientDataError(
            f"need at least {n_bins} training times, got {times.size}"
        )
    if not np.all(np.isfinite(times)) or not np.all(times > 0):
        raise ValueError("training times must be finite and > 0")
    s = np.sort(times)
    n = times.size
    # nearest-rank index for level (i+1)/n_bins, in integer arithmetic
    edges = [s[-(-(i + 1) * n // n_bins) - 1] for i in range(n_bins)]
    for i in range(1, n_bins):
        if edges[i] <= edges[i - 1]:
            edges[i] = edges[i - 1] + EDGE_EPS
    return TimeGrid(tuple(edges))


@dataclass(frozen=True)
class SurvivalDistribution:
    """Per-patient PMF over the grid bins with its derived CIF and survival curve."""

    pmf: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        p = np.asarray(self.pmf, dtype=np.float64)
        if not np.all(np.isfinite(p)):
            raise NumericError("pmf contains non-finite values")
        if p.shape != (self.grid.n_bins,):
            raise ValueError(f"pmf shape {p.shape} != ({self.grid.n_bins},)")
        if np.any(p < -1e-12) or abs(p.sum() - 1.0) > 1e-6:
            raise ValueError("pmf entries must be >= 0 and sum to 1 within 1e-6")
        object.__setattr__(self, "pmf", p)

    def cif(self):
        return np.cumsum(self.pmf)

    def survival_at(self, t):
        """S(t) by linear interpolation between 0 and the grid edges, clamped flat
        beyond the last edge."""
        knots_x = np.concatenate([[0.0], np.asarray(self.grid.edges)])
        knots_y = np.concatenate([[1.0], 1.0 - self.cif()])
        return np.interp(t, knots_x, knots_y)


def pmf_from_logits(logits, grid):
    """Softmax the bin logits into a SurvivalDistribution."""
    x = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("logits contain non-finite values")
    e = np.exp(x - x.max())
    return SurvivalDistribution(e / e.sum(), grid)


def cif_at_bin(dist, m):
    """Cumulative incidence on or before bin ``m`` (inclusive)."""
    if not 0 <= m < dist.grid.n_bins:
        raise IndexError(f"bin index {m} out of range [0, {dist.grid.n_bins})")
    return float(np.sum(dist.pmf[: m + 1]))


def survival_monthly(dist, horizon):
    """Survival curve sampled at t = 0, 1, ..., horizon months."""
    if horizon < 0:
        raise ValueError(f"horizon must be >= 0, got {horizon}")
    months = np.arange(int(horizon) + 1, dtype=np.float64)
    return months, dist.survival_at(months)


# ---------------------------------------------------------------------------
# training losses (differentiable through the tensor engine)


def _pmf_tensor(pmf):
    t = pmf if isinstance(pmf, T.Tensor) else T.Tensor(pmf)
    if t.ndim != 2:
        raise ValueError(f"batch pmf must be 2-D (batch, bins), got shape {t.shape}")
    return t


def likelihood_loss(pmf, records, grid):
    """Censoring-aware negative log-likelihood, averaged over the batch.

    Uncensored patients contribute -log pmf[bin(s)], censored ones
    -log(1 - CIF(bin(s))). Probabilities are floored at LOG_FLOOR.
    """
    if len(records) == 0:
        raise ValueError("batch must be nonempty")
    p = _pmf_tensor(pmf)
    times, events = record_arrays(records)
    bins = grid.bin_indices(times)
    rows = np.arange(len(records))
    cif = T.cumsum(p, axis=-1)
    p_event = T.take_pairs(p, rows, bins)
    p_surv = 1.0 - T.take_pairs(cif, rows, bins)
    nll_event = -T.log(T.clamp_min(p_event, LOG_FLOOR))
    nll_cens = -T.log(T.clamp_min(p_surv, LOG_FLOOR))
    picked = nll_event * events + nll_cens * (1.0 - events)
    return T.tmean(picked)


def ranking_loss(pmf, records, grid, sigma):
    """Mean exp(-(F_i(m_i) - F_j(m_i)) / sigma) over acceptable pairs.

    A pair (i, j) is acceptable when i is uncensored and s_i < s_j; with no
    acceptable pairs the loss is a constant 0.
    """
    if sigma <= 0:
        raise ConfigError(f"sigma must be > 0, got {sigma}")
    if len(records) == 0:
        raise ValueError("batch must be nonempty")
    p = _pmf_tensor(pmf)
    times, events = record_arrays(records)
    b = len(records)
    accept = (events[:, None] == 1) & (times[:, None] < times[None, :])
    n_pairs = int(accept.sum())
    if n_pairs == 0:
        return T.Tensor(0.0)
    bins = grid.bin_indices(times)
    cif = T.cumsum(p, axis=-1)
    # F_i(m_i) repeated along j, against F_j(m_i), in (i, j) flat order
    f_own = T.take_pairs(cif, np.repeat(np.arange(b), b), np.repeat(bins, b))
    f_cross = T.take_pairs(cif, np.tile(np.arange(b), b), np.repeat(bins, b))
    eta = T.exp((f_cross - f_own) * (1.0 / sigma))
    return T.tsum(eta * accept.reshape(-1).astype(np.float64)) * (1.0 / n_pairs)


def total_loss(pmf, records, grid, lam, sigma):
    """likelihood_loss + lam * ranking_loss."""
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    loss = likelihood_loss(pmf, records, grid)
    if lam > 0:
        loss = loss + lam * ranking_loss(pmf, records, grid, sigma)
    return loss
