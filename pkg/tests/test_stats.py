import math

import numpy as np
import pytest
import sympy

from survfuse import stats as st
from survfuse.errors import (
    ConvergenceError,
    DegenerateDesignError,
    UndefinedMetricError,
)
from survfuse.survival import EventRecord, records_from_arrays


def recs(times, events):
    return records_from_arrays(times, events)


def ctd_oracle(curves, records):
    """Exhaustive pairwise enumeration, evaluating each curve directly."""
    conc, comp = 0.0, 0
    for i, ri in enumerate(records):
        for j, rj in enumerate(records):
            if ri.event == 1 and ri.time < rj.time:
                si = float(curves[i].survival_at(ri.time))
                sj = float(curves[j].survival_at(ri.time))
                if si < sj:
                    conc += 1.0
                elif si == sj:
                    conc += 0.5
                comp += 1
    if comp == 0:
        raise UndefinedMetricError("no comparable pairs")
    return conc / comp


def random_cohort(rng, n):
    times = np.round(rng.exponential(12.0, n), 1) + 0.5  # rounding forces ties
    events = (rng.random(n) < 0.7).astype(int)
    curves = [st.ExpCurve(float(rng.uniform(0.01, 0.3))) for _ in range(n)]
    # inject predicted-survival ties by duplicating some curves
    for k in range(0, n - 1, 5):
        curves[k + 1] = curves[k]
    return curves, recs(times, events)


class TestKaplanMeier:
    def test_no_censoring_empirical(self):
        km = st.kaplan_meier(recs([1, 2, 3], [1, 1, 1]))
        np.testing.assert_allclose(km.times, [1, 2, 3])
        np.testing.assert_allclose(km.values, [2 / 3, 1 / 3, 0.0])
        assert km.survival_at(0.5) == 1.0

    def test_all_censored(self):
        km = st.kaplan_meier(recs([1, 2, 3], [0, 0, 0]))
        assert km.survival_at(10.0) == 1.0

    def test_mixed_cohort_hand_product_limit(self):
        km = st.kaplan_meier(recs([1, 2, 3, 4], [1, 0, 1, 1]))
        # drops: 3/4 at t=1, x 1/2 at t=3, x 0 at t=4
        np.testing.assert_allclose(km.times, [1, 3, 4])
        np.testing.assert_allclose(km.values, [0.75, 0.375, 0.0])

    def test_matches_empirical_without_censoring(self):
        rng = np.random.default_rng(0)
        times = rng.exponential(10, 30) + 0.1
        km = st.kaplan_meier(recs(times, np.ones(30)))
        for t in rng.uniform(0, 40, 20):
            assert km.survival_at(t) == pytest.approx(np.mean(times > t), abs=1e-12)


class TestLogrank:
    def test_duplicate_groups(self):
        group = recs([1, 3, 5, 7, 9], [1, 0, 1, 1, 0])
        res = st.logrank(group, group)
        assert res.statistic < 1e-10
        assert res.p_value > 0.99

    def test_hand_tabulated_ten_patients(self):
        a = recs([1, 2, 4, 6, 8], [1, 1, 0, 1, 0])
        b = recs([3, 5, 7, 9, 11], [1, 0, 1, 1, 1])
        # risk table by hand over event times {1,2,3,6,7,9,11}:
        # (n1 at risk, n2 at risk, d1, d2) per event time
        obs, exp, var = 0.0, 0.0, 0.0
        table = [
            (5, 5, 1, 0),
            (4, 5, 1, 0),
            (3, 5, 0, 1),
            (2, 3, 1, 0),
            (1, 3, 0, 1),
            (0, 2, 0, 1),
            (0, 1, 0, 1),
        ]
        for n1, n2, d1, d2 in table:
            n, d = n1 + n2, d1 + d2
            obs += d1
            exp += d * n1 / n
            if n > 1:
                var += d * (n1 / n) * (n2 / n) * (n - d) / (n - 1)
        want = (obs - exp) ** 2 / var
        res = st.logrank(a, b)
        assert res.statistic == pytest.approx(want, abs=1e-10)

    def test_separated_groups_significant(self):
        a = recs([1, 1.5, 2, 2.5, 3, 3.5], [1] * 6)
        b = recs([20, 21, 22, 23, 24, 25], [1] * 6)
        assert st.logrank(a, b).p_value < 0.01

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a = recs(rng.exponential(10, 12) + 0.1, (rng.random(12) < 0.7).astype(int))
        b = recs(rng.exponential(14, 9) + 0.1, (rng.random(9) < 0.7).astype(int))
        assert st.logrank(a, b).statistic == pytest.approx(
            st.logrank(b, a).statistic, abs=1e-12
        )

    def test_zero_events(self):
        with pytest.raises(UndefinedMetricError):
            st.logrank(recs([1, 2], [0, 0]), recs([3, 4], [0, 0]))


class TestCtd:
    def test_perfect_ranking(self):
        records = recs([1, 2, 3, 4], [1, 1, 1, 1])
        curves = [st.ExpCurve(r) for r in (0.8, 0.4, 0.2, 0.1)]
        assert st.c_td(curves, records) == 1.0

    def test_all_tied_predictions(self):
        records = recs([1, 2, 3, 4], [1, 1, 1, 1])
        curves = [st.ExpCurve(0.3)] * 4
        assert st.c_td(curves, records) == 0.5

    def test_matches_exhaustive_oracle_on_random_cohorts(self):
        rng = np.random.default_rng(2)
        for _ in range(60):
            curves, records = random_cohort(rng, int(rng.integers(5, 41)))
            try:
                want = ctd_oracle(curves, records)
            except UndefinedMetricError:
                continue
            assert st.c_td(curves, records) == pytest.approx(want, abs=1e-12)

    def test_rank_invariance(self):
        rng = np.random.default_rng(3)
        curves, records = random_cohort(rng, 25)
        base = st.c_td(curves, records)

        class Warped:
            def __init__(self, inner):
                self.inner = inner

            def survival_at(self, t):
                v = self.inner.survival_at(t)
                return v**3 + 2.0 * v  # strictly increasing transform

        assert st.c_td([Warped(c) for c in curves], records) == pytest.approx(
            base, abs=1e-12
        )

    def test_no_comparable_pairs(self):
        with pytest.raises(UndefinedMetricError):
            st.c_td([st.ExpCurve(0.1)] * 2, recs([5, 5], [0, 0]))


class ConstCurve:
    def __init__(self, fn):
        self.fn = fn

    def survival_at(self, t):
        return self.fn(np.asarray(t, dtype=np.float64))


class TestBrier:
    def test_constant_half_no_censoring(self):
        records = recs([2, 4, 6, 8, 10], [1] * 5)
        curves = [ConstCurve(lambda t: np.full_like(t, 0.5))] * 5
        for t in (1.0, 5.0, 9.0):
            assert st.brier(curves, records, t) == pytest.approx(0.25)

    def test_oracle_predictor_no_censoring(self):
        times = [2.0, 4.0, 6.0, 8.0]
        records = recs(times, [1] * 4)
        curves = [
            ConstCurve(lambda t, ti=ti: (t < ti).astype(float)) for ti in times
        ]
        for t in (1.0, 3.0, 5.0, 7.0, 9.0):
            assert st.brier(curves, records, t) == pytest.approx(0.0)

    def test_hand_weighted_censored_cohort(self):
        records = recs([2, 3, 5, 7, 9, 12], [1, 0, 1, 0, 1, 1])
        s6 = [0.1, 0.9, 0.3, 0.8, 0.7, 0.95]
        curves = [ConstCurve(lambda t, v=v: np.full_like(t, v)) for v in s6]
        # censoring KM: G=1 before 3, 0.8 on [3,7), 0.5333... from 7
        want = (
            (s6[0] ** 2) / 1.0          # death at 2, G(2-)=1
            + 0.0                        # censored at 3
            + (s6[2] ** 2) / 0.8         # death at 5, G(5-)=0.8
            + ((1 - s6[3]) ** 2) / 0.8   # alive at 6 (time 7), G(6)=0.8
            + ((1 - s6[4]) ** 2) / 0.8
            + ((1 - s6[5]) ** 2) / 0.8
        ) / 6.0
        assert st.brier(curves, records, 6.0) == pytest.approx(want, abs=1e-12)

    def test_reduces_to_mse_without_censoring(self):
        rng = np.random.default_rng(4)
        times = rng.exponential(10, 20) + 0.5
        records = recs(times, np.ones(20))
        rates = rng.uniform(0.02, 0.3, 20)
        curves = [st.ExpCurve(r) for r in rates]
        for t in (2.0, 8.0, 15.0):
            s_t = np.exp(-rates * t)
            alive = (times > t).astype(float)
            want = np.mean((alive - s_t) ** 2)
            assert st.brier(curves, records, t) == pytest.approx(want, abs=1e-12)


class TestIntegratedBrier:
    def test_constant_integrand(self):
        records = recs([20, 40, 60, 80, 100], [1] * 5)
        curves = [ConstCurve(lambda t: np.full_like(t, 0.5))] * 5
        assert st.integrated_brier(curves, records, 15.0) == pytest.approx(0.25)

    def test_zero_integrand(self):
        times = [20.0, 40.0, 60.0]
        records = recs(times, [1] * 3)
        curves = [
            ConstCurve(lambda t, ti=ti: (t < ti).astype(float)) for ti in times
        ]
        assert st.integrated_brier(curves, records, 15.0) == pytest.approx(0.0)

    def test_trapezoid_helper_matches_closed_form(self):
        # piecewise-linear integrand: trapezoid rule is exact
        ts = np.array([0.0, 1, 2, 3, 4, 5])
        vals = np.array([0.0, 2, 4, 1, 1, 3])
        # segment areas: 1, 3, 2.5, 1, 2  -> total 9.5 over span 5
        assert st.trapezoid_mean(ts, vals) == pytest.approx(9.5 / 5.0, abs=1e-14)


class TestCox:
    def test_two_patient_tied_symbolic_oracle(self):
        # tied event times, x = (1, 0): symbolic maximization gives beta = 0
        b = sympy.symbols("b")
        ll = b * 1 + b * 0 - 2 * sympy.log(sympy.exp(b) + 1)
        bhat = sympy.solve(sympy.diff(ll, b), b)
        assert bhat == [0]
        fit = st.fit_coxph(
            np.array([[1.0], [0.0]]), recs([5.0, 5.0], [1, 1])
        )
        assert abs(fit.beta[0]) < 1e-8

    def test_three_patient_symbolic_oracle(self):
        b = sympy.symbols("b")
        x = [1.0, 0.0, 0.5]
        ll = (
            b * x[0]
            - sympy.log(sympy.exp(b * x[0]) + sympy.exp(b * x[1]) + sympy.exp(b * x[2]))
            + b * x[1]
            - sympy.log(sympy.exp(b * x[1]) + sympy.exp(b * x[2]))
        )
        bhat = float(sympy.nsolve(sympy.diff(ll, b), b, 0.0))
        fit = st.fit_coxph(np.array([[xi] for xi in x]), recs([1, 2, 3], [1, 1, 0]))
        assert fit.beta[0] == pytest.approx(bhat, abs=1e-7)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        n, q = 80, 3
        x = rng.normal(size=(n, q))
        times = rng.exponential(10, n) + 0.1
        times[::7] = times[0]  # force ties
        events = (rng.random(n) < 0.7).astype(int)
        records = recs(times, events)
        beta = rng.normal(scale=0.3, size=q)
        from survfuse.kernels import cox_breslow

        order = np.argsort(-times, kind="stable")
        _, grad, _ = cox_breslow(
            times[order], events[order], np.ascontiguousarray(x[order]),
            x[order] @ beta,
        )
        h = 1e-6
        for j in range(q):
            bp, bm = beta.copy(), beta.copy()
            bp[j] += h
            bm[j] -= h
            fd = (
                st.cox_loglik(bp, x, records) - st.cox_loglik(bm, x, records)
            ) / (2 * h)
            assert abs(grad[j] - fd) / max(1.0, abs(fd)) < 1e-6

    def test_gradient_small_at_solution(self):
        rng = np.random.default_rng(6)
        n = 300
        x = rng.normal(size=(n, 2))
        hazard = np.exp(0.5 * x[:, 0] - 0.3 * x[:, 1])
        times = rng.exponential(1.0 / hazard) + 1e-3
        events = np.ones(n, dtype=int)
        records = recs(times, events)
        fit = st.fit_coxph(x, records)
        from survfuse.kernels import cox_breslow

        order = np.argsort(-times, kind="stable")
        _, grad, _ = cox_breslow(
            times[order], events[order], np.ascontiguousarray(x[order]),
            x[order] @ fit.beta,
        )
        assert np.max(np.abs(grad)) < 1e-8

    def test_efron_differs_only_with_ties(self):
        rng = np.random.default_rng(7)
        n = 60
        x = rng.normal(size=(n, 1))
        times = np.arange(1, n + 1, dtype=float)  # no ties
        events = (rng.random(n) < 0.6).astype(int)
        events[:2] = 1
        records = recs(times, events)
        fb = st.fit_coxph(x, records, ties="breslow")
        fe = st.fit_coxph(x, records, ties="efron")
        assert fb.beta[0] == pytest.approx(fe.beta[0], abs=1e-9)

    def test_constant_column_rejected(self):
        with pytest.raises(DegenerateDesignError):
            st.fit_coxph(np.ones((5, 1)), recs([1, 2, 3, 4, 5], [1, 1, 1, 0, 0]))

    def test_perfect_separation_raises(self):
        x = np.array([[1.0], [1.0], [0.0], [0.0]])
        records = recs([1, 2, 3, 4], [1, 1, 0, 0])
        with pytest.raises(ConvergenceError):
            st.fit_coxph(x, records)

    def test_breslow_baseline_survival_monotone(self):
        rng = np.random.default_rng(8)
        n = 100
        x = rng.normal(size=(n, 2))
        times = rng.exponential(10, n) + 0.1
        events = (rng.random(n) < 0.8).astype(int)
        fit = st.fit_coxph(x, recs(times, events))
        for curve in fit.survival_curves(x[:5]):
            vals = curve.survival_at(np.linspace(0, 40, 50))
            assert np.all(np.diff(vals) <= 1e-12)
            assert curve.survival_at(0.0) <= 1.0


class TestSchoenfeld:
    def test_orthogonal_residuals_p_near_one(self):
        d = 20
        g = np.arange(1.0, d + 1)
        gc = g - g.mean()
        resid = np.ones((d, 1)) - np.outer(gc, [0.0])  # constant residuals
        resid -= resid.mean(axis=0)  # orthogonal to everything, incl. gc
        stats = st._zph_statistics(resid, g, np.array([[0.5]]), d)
        assert stats[0] == pytest.approx(0.0, abs=1e-20)

    def test_detects_strong_time_trend(self):
        rng = np.random.default_rng(9)
        n = 400
        x = rng.normal(size=(n, 1))
        # effect reverses at the median: early hazard up, late hazard down
        lam = math.log(2) / 12.0
        t1 = rng.exponential(1.0 / (lam * np.exp(0.9 * x[:, 0])))
        times = np.where(t1 < 12.0, t1, 12.0 + rng.exponential(
            1.0 / (lam * np.exp(-0.9 * x[:, 0]))
        ))
        records = recs(times + 1e-3, np.ones(n))
        fit = st.fit_coxph(x, records)
        res = st.schoenfeld_test(fit, records, x)
        assert res[0].p_value < 0.01

    def test_proportional_data_usually_passes(self):
        rng = np.random.default_rng(10)
        n = 400
        x = rng.normal(size=(n, 2))
        hazard = np.exp(0.6 * x[:, 0])
        times = rng.exponential(12.0 / hazard) + 1e-3
        records = recs(times, np.ones(n))
        fit = st.fit_coxph(x, records)
        res = st.schoenfeld_test(fit, records, x)
        assert len(res) == 2
        assert all(r.df == 1 for r in res)
        assert res[0].p_value > 0.001  # not a wildly miscalibrated test

    def test_km_transform_runs(self):
        rng = np.random.default_rng(11)
        n = 120
        x = rng.normal(size=(n, 1))
        times = rng.exponential(10, n) + 0.1
        events = (rng.random(n) < 0.7).astype(int)
        fit = st.fit_coxph(x, recs(times, events))
        res = st.schoenfeld_test(fit, recs(times, events), x, transform="km")
        assert 0.0 <= res[0].p_value <= 1.0

    def test_too_few_events(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(8, 1))
        records = recs(np.arange(1.0, 9.0), [1, 1, 1, 0, 0, 0, 0, 0])
        fit = st.fit_coxph(x, records)
        with pytest.raises(ValueError):
            st.schoenfeld_test(fit, records, x)


class TestDichotomize:
    def test_favorable(self):
        assert st.dichotomize([st.ExpCurve(0.0)], 12.0) == ["favorable"]

    def test_unfavorable(self):
        assert st.dichotomize([st.ExpCurve(5.0)], 12.0) == ["unfavorable"]

    def test_threshold_boundary(self):
        curve = ConstCurve(lambda t: np.full_like(t, 0.5))
        assert st.dichotomize([curve], 12.0) == ["favorable"]


class TestBootstrap:
    def test_deterministic_and_order_free(self):
        rng = np.random.default_rng(13)
        data = rng.normal(size=50)

        def stat(idx):
            return float(data[idx].mean())

        a = st.bootstrap_ci(stat, 50, 200, seed=7)
        b = st.bootstrap_ci(stat, 50, 200, seed=7)
        assert a == b
        assert a["lo"] <= a["mean"] <= a["hi"]

    def test_covers_truth(self):
        rng = np.random.default_rng(14)
        data = rng.normal(loc=3.0, size=400)

        def stat(idx):
            return float(data[idx].mean())

        ci = st.bootstrap_ci(stat, 400, 500, seed=8)
        assert ci["lo"] < 3.0 < ci["hi"]
