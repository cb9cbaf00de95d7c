import subprocess
import sys

import numpy as np

from survfuse import kernels


def _random_inputs(seed, n=35, q=3):
    rng = np.random.default_rng(seed)
    times = np.round(rng.exponential(12.0, n), 1) + 0.5
    events = (rng.random(n) < 0.7).astype(np.int64)
    surv_eval = rng.uniform(0, 1, size=(n, n))
    x = np.ascontiguousarray(rng.normal(size=(n, q)))
    beta = rng.normal(scale=0.4, size=q)
    return times, events, surv_eval, x, beta


def test_ctd_backends_agree_exactly():
    for seed in range(20):
        times, events, surv_eval, _, _ = _random_inputs(seed)
        # inject predicted-survival ties to exercise the 0.5 branch
        surv_eval[1] = surv_eval[0]
        got = kernels.ctd_counts(surv_eval, times, events)
        want = kernels.ctd_counts_numpy(surv_eval, times, events)
        assert got[0] == want[0]
        assert got[1] == want[1]


def test_cox_backends_agree():
    for seed in range(10):
        times, events, _, x, beta = _random_inputs(seed)
        order = np.argsort(-times, kind="stable")
        td, ed, xd = times[order], events[order], np.ascontiguousarray(x[order])
        xb = xd @ beta
        ll_a, g_a, i_a = kernels.cox_breslow(td, ed, xd, xb)
        ll_b, g_b, i_b = kernels.cox_breslow_numpy(td, ed, xd, xb)
        assert abs(ll_a - ll_b) < 1e-9 * max(1.0, abs(ll_b))
        np.testing.assert_allclose(g_a, g_b, rtol=1e-9, atol=1e-11)
        np.testing.assert_allclose(i_a, i_b, rtol=1e-9, atol=1e-11)


def test_env_flag_selects_numpy_backend():
    code = (
        "from survfuse import kernels; "
        "assert not kernels.USE_NUMBA; "
        "assert kernels.ctd_counts is kernels.ctd_counts_numpy"
    )
    subprocess.run(
        [sys.executable, "-c", code],
        check=True,
        env={"SURVFUSE_NUMBA": "0", "PATH": "/usr/bin:/bin"},
    )


def test_default_backend_is_numba_when_available():
    try:
        import numba  # noqa: F401
    except ImportError:
        return
    code = "from survfuse import kernels; assert kernels.USE_NUMBA"
    subprocess.run(
        [sys.executable, "-c", code], check=True, env={"PATH": "/usr/bin:/bin"}
    )
