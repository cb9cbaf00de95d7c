"""Synthetic cohort generation: clinical covariates mimicking the real-cohort
marginals, spherical-lesion volumes whose geometry encodes an image risk
score, and discrete-time survival drawn from a hazard combining clinical,
image and optional interaction effects, with independent uniform censoring.
"""

from dataclasses import dataclass

import numpy as np

from .data import CohortTable
from .errors import GenerationError
from .volume import Volume

BASELINE_MONTHLY_HAZARD = 0.055  # median survival near 12 months at risk 0
MAX_MONTHS = 120

_CHANNEL_BASE = np.array([1.0, 0.8, 0.6, 0.9])
_RESECTION_LEVELS = ("GTR", "NTR", "NA")
_RESECTION_PROBS = (0.566, 0.386, 0.048)
_MGMT_LEVELS = ("methylated", "unmethylated", "NA")
_MGMT_PROBS = (0.190, 0.368, 0.442)

_RADIUS_RANGE = (2.0, 5.0)
_RIM_RANGE = (0.5, 1.5)
# rim brightness survives histogram standardization only weakly at toy
# resolution, so it carries less of the image risk than lesion geometry
_RIM_WEIGHT = 0.4


@dataclass(frozen=True)
class SyntheticCohort:
    table: CohortTable
    volumes: list
    true_risk: np.ndarray  # generating log-hazard ratio per patient, for audit
    lesion_radius: np.ndarray
    rim_intensity: np.ndarray


def make_volume(rng, radius, rim, dims=(16, 16, 16)):
    """Brain-like 4-channel volume with one spherical lesion.

    Background: per-channel radial falloff inside a skull sphere, zero
    outside, plus voxel noise. Lesion: bright core on channels 0/1, a rim of
    the given intensity on channels 2/3.
    """
    d, h, w = dims
    zz, yy, xx = np.meshgrid(
        np.arange(d), np.arange(h), np.arange(w), indexing="ij"
    )
    center = (np.array(dims) - 1) / 2.0
    dist = np.sqrt(
        (zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2
    )
    skull_radius = min(dims) / 2.0 - 0.5
    inside = dist <= skull_radius

    lesion_center = center + rng.uniform(-2.0, 2.0, size=3)
    ldist = np.sqrt(
        (zz - lesion_center[0]) ** 2
        + (yy - lesion_center[1]) ** 2
        + (xx - lesion_center[2]) ** 2
    )
    core = (ldist <= radius) & inside
    rim_mask = (ldist > radius) & (ldist <= radius + 1.5) & inside

    # noise is deliberately strong relative to lesion contrast: dense
    # self-supervision can average it out, survival labels alone cannot
    vol = np.zeros((4, d, h, w), dtype=np.float64)
    falloff = 1.0 - 0.3 * (dist / skull_radius)
    for c in range(4):
        chan = _CHANNEL_BASE[c] * falloff + rng.normal(0.0, 0.18, size=dims)
        chan[core] += 0.5 if c < 2 else 0.15
        chan[rim_mask] += 0.15 if c < 2 else rim * 0.3
        chan[~inside] = 0.0
        vol[c] = np.maximum(chan, 0.0)
        vol[c][~inside] = 0.0
    return Volume(vol.astype(np.float32))


def _standardize(x):
    sd = x.std()
    return (x - x.mean()) / sd if sd > 0 else np.zeros_like(x)


def generate_synthetic_cohort(seed, n, effects, censor_rate, dims=(16, 16, 16)):
    """Cohort of n patients with volumes, outcomes and audit-grade ground truth.

    ``effects`` maps beta_clinical / beta_image / beta_interaction to floats.
    Survival months are geometric draws from a per-month hazard 1-(1-h0)^exp(eta);
    censoring times are uniform on (0, c_max] with c_max calibrated to the
    requested censoring fraction.
    """
    if n < 20:
        raise GenerationError(f"cohort size must be >= 20, got {n}")
    if not 0.0 <= censor_rate <= 0.9:
        raise GenerationError(f"censor_rate must be in [0, 0.9], got {censor_rate}")
    rng = np.random.default_rng([seed, 20553])
    beta_c = float(effects.get("beta_clinical", 0.0))
    beta_i = float(effects.get("beta_image", 0.0))
    beta_x = float(effects.get("beta_interaction", 0.0))

    # clinical covariates mimic the published cohort marginals
    age = rng.normal(63.0, 11.0, size=n)
    sex = np.where(rng.random(n) < 0.6, "male", "female")
    resection = rng.choice(_RESECTION_LEVELS, size=n, p=_RESECTION_PROBS)
    mgmt = rng.choice(_MGMT_LEVELS, size=n, p=_MGMT_PROBS)

    radius = rng.uniform(*_RADIUS_RANGE, size=n)
    rim = rng.uniform(*_RIM_RANGE, size=n)
    volumes = [make_volume(rng, radius[i], rim[i], dims) for i in range(n)]

    res_eff = np.select(
        [resection == "GTR", resection == "NTR"], [-0.5, 0.5], default=0.0
    )
    mgmt_eff = np.select(
        [mgmt == "methylated", mgmt == "unmethylated"], [-0.5, 0.5], default=0.0
    )
    z_clin = _standardize(
        0.7 * (age - 63.0) / 11.0
        + 0.2 * np.where(sex == "male", 1.0, -1.0)
        + 0.5 * res_eff
        + 0.5 * mgmt_eff
    )
    z_img = _standardize(_standardize(radius) + _RIM_WEIGHT * _standardize(rim))

    eta = beta_c * z_clin + beta_i * z_img + beta_x * z_clin * z_img
    hazard = 1.0 - (1.0 - BASELINE_MONTHLY_HAZARD) ** np.exp(eta)
    hazard = np.clip(hazard, 1e-12, 1.0 - 1e-12)
    u = rng.uniform(size=n)
    event_month = np.ceil(np.log(u) / np.log(1.0 - hazard)).astype(np.int64)
    event_month = np.clip(event_month, 1, None)

    time = event_month.astype(np.float64)
    event = np.ones(n, dtype=np.int64)
    admin = time > MAX_MONTHS
    time[admin] = float(MAX_MONTHS)
    event[admin] = 0

    if censor_rate > 0:
        c_max = _calibrate_uniform_censoring(time, censor_rate)
        c_times = rng.uniform(0.0, c_max, size=n)
        c_times = np.maximum(c_times, 0.01)
        censored = c_times < time
        event[censored] = 0
        time[censored] = c_times[censored]

    if event.sum() == 0:
        raise GenerationError("degenerate cohort: every patient censored")

    table = CohortTable(
        ids=tuple(f"P{i:05d}" for i in range(n)),
        age=age,
        sex=tuple(sex),
        resection=tuple(resection),
        mgmt=tuple(mgmt),
        time=time,
        event=event,
        volume_refs=tuple(range(n)),
    )
    return SyntheticCohort(
        table=table,
        volumes=volumes,
        true_risk=eta,
        lesion_radius=radius,
        rim_intensity=rim,
    )


def _calibrate_uniform_censoring(event_times, target):
    """Bisect c_max so that E[P(U(0,c_max) < T)] matches the target fraction."""

    def expected_fraction(c_max):
        return float(np.mean(np.minimum(event_times / c_max, 1.0)))

    lo, hi = 1e-3, float(event_times.max()) * 4
    while expected_fraction(hi) > target:
        hi *= 2
        if hi > 1e9:
            break
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if expected_fraction(mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
