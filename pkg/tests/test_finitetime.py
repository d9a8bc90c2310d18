import csv

import numpy as np
import pytest

from kdvstab.closedloop import LoopConfig, initial_profile
from kdvstab.errors import ConfigurationError
from kdvstab.finitetime import (
    _partial_sums,
    build_schedule,
    constant_lambda_baseline,
    simulate_finite_time,
    stage_gramians,
    validate_schedule,
    write_staged_csv,
)
from kdvstab.gramian import GramianCache

NO_GUARDS = LoopConfig(guards=False)


class TestBuild:
    def test_default_times(self):
        s = build_schedule(1.0, 4, lam_base=1.0)
        np.testing.assert_allclose(s.t, [0, 3 / 4, 8 / 9, 15 / 16, 24 / 25], rtol=1e-15)

    def test_default_gains(self):
        s = build_schedule(1.0, 4, lam_base=1.0)
        np.testing.assert_array_equal(s.lam, [1.0, 256.0, 6561.0, 65536.0, 390625.0])
        assert s.s[1] == pytest.approx(0.75)

    def test_half_base(self):
        s = build_schedule(1.0, 3)
        np.testing.assert_array_equal(s.lam, [0.5, 128.0, 3280.5, 32768.0])

    def test_partial_sums_recompute(self):
        s = build_schedule(2.0, 6, lam_base=0.3)
        manual = [sum(s.lam[k] * (s.t[k + 1] - s.t[k]) for k in range(n)) for n in range(7)]
        np.testing.assert_allclose(s.s, manual, rtol=1e-14)
        np.testing.assert_array_equal(_partial_sums(s.t, s.lam), s.s)
        assert s.s[0] == 0.0

    def test_dynamic_gains(self):
        s = build_schedule(1.0, 4, c=0.5, margin=0.2)
        np.testing.assert_allclose(s.lam1, 2.5 * s.lam * 1.2)
        assert np.all(s.lam1 >= (2 + s.c) * s.lam)

    def test_custom(self):
        s = build_schedule(1.0, 2, family="custom", t=[0, 0.5, 0.8], lam=[1, 2, 3])
        np.testing.assert_allclose(s.s, [0, 0.5, 1.1])

    @pytest.mark.parametrize(
        "kw",
        [
            {"T": 0.0},
            {"n_max": 1},
            {"family": "custom", "t": [0, 0.5, 0.4], "lam": [1, 2, 3]},
            {"family": "custom", "t": [0, 0.5, 0.8], "lam": [1, 1, 3]},
            {"family": "custom", "t": [0, 0.5, 1.0], "lam": [1, 2, 3]},
            {"family": "custom", "t": [0.1, 0.5, 0.8], "lam": [1, 2, 3]},
            {"family": "custom", "t": [0, 0.5], "lam": [1, 2]},
            {"family": "geometric"},
        ],
    )
    def test_rejects(self, kw):
        args = {"T": 1.0, "n_max": 2, **kw}
        with pytest.raises(ConfigurationError):
            build_schedule(**args)

    def test_schedule_json(self):
        d = build_schedule(1.0, 3).to_dict()
        assert d["lambda"][1] == 128.0 and d["family"] == "default"


class TestValidate:
    def test_default_diverges(self):
        rep = validate_schedule(build_schedule(1.0, 4, lam_base=1.0), gamma=1.0, horizon_n=20)
        g = [r for _, r in rep["growth"]]
        assert rep["diverging"]
        assert g[-1] > g[len(g) // 2]

    def test_constant_does_not(self):
        rep = validate_schedule(build_schedule(1.0, 4, family="constant", lam_base=1.0), horizon_n=20)
        assert not rep["diverging"]

    def test_step_ratio_values(self):
        s = build_schedule(1.0, 4, lam_base=1.0)
        rep = validate_schedule(s, gamma=1.0)
        n, ratio, ok = rep["step"][0]
        expected = s.lam[1] * (s.t[2] - s.t[1]) / (s.lam[0] * (s.t[1] - s.t[0]))
        assert ratio == pytest.approx(expected)
        assert ok == (expected <= 2.0)
        assert not rep["all_ok"]

    def test_gap_condition(self):
        s = build_schedule(1.0, 4, lam_base=1.0)
        rows = validate_schedule(s, gamma=1.0)["gap"]
        for n, lhs, rhs, ok in rows:
            assert lhs == pytest.approx(s.lam[n] * (s.t[n + 1] - s.t[n]))
            assert rhs == pytest.approx(s.lam[n] ** (1 / 3))
            assert ok == (lhs >= rhs)


@pytest.fixture(scope="module")
def staged(gen64):
    y0 = initial_profile(gen64, 1e-3, "smooth")
    return y0, simulate_finite_time(gen64, y0, build_schedule(1.0, 4), cfg=NO_GUARDS)


class TestSimulate:
    def test_zero_state(self, gen64):
        res = simulate_finite_time(gen64, np.zeros(gen64.n), build_schedule(1.0, 3))
        assert res.stop_reason == "floor"
        assert res.stages == [] and res.report.norm_y[0] == 0.0

    def test_stops_at_cond_limit(self, staged):
        _, res = staged
        assert res.stop_reason == "cond_limit"
        assert len(res.stages) == 3
        assert [s.n for s in res.stages] == [0, 1, 2]

    def test_plant_state_continuous(self, staged):
        _, res = staged
        for a, b in zip(res.stages[:-1], res.stages[1:]):
            assert a.norm_end == b.norm_start
        starts = np.flatnonzero(np.diff(res.stage) != 0) + 1
        for i in starts:
            assert res.report.times[i] == pytest.approx(res.report.times[i - 1])
            assert res.report.norm_y[i] == res.report.norm_y[i - 1]

    def test_companion_reset(self, staged):
        _, res = staged
        starts = np.concatenate(([0], np.flatnonzero(np.diff(res.stage) != 0) + 1))
        assert np.all(res.report.identity_error[starts] <= 1e-12 * res.report.norm_ytilde[starts])

    def test_stage_norms_decrease(self, staged):
        _, res = staged
        assert np.all(np.diff(res.stage_norms()) < 0)

    def test_first_stage_envelope(self, staged, gen64):
        y0, res = staged
        st = res.stages[0]
        sel = res.stage == 0
        t = res.report.times[sel]
        bound = 2 * np.exp(-2 * st.lam * t) * st.norm_start * 1.1
        assert np.all(res.report.norm_y[sel] <= bound)

    def test_beats_constant_baseline(self, staged, gen64):
        y0, res = staged
        base = constant_lambda_baseline(gen64, y0, build_schedule(1.0, 4), NO_GUARDS)
        norms = res.stage_norms()
        assert base[0] == norms[0]
        assert np.all(np.asarray(norms[2:]) < base[2 : len(norms)])

    def test_columns(self, staged, tmp_path):
        _, res = staged
        path = write_staged_csv(tmp_path / "s.csv", res)
        rows = list(csv.reader(open(path)))
        assert rows[0][-3:] == ["stage", "lambda_n", "cond_Qn"]
        assert len(rows) == len(res.report.times) + 1

    def test_decay_profile(self, staged):
        _, res = staged
        prof = res.decay_profile()
        assert prof[0][1] == prof[0][2]
        assert [p[0] for p in prof] == list(range(len(prof)))

    def test_guard_stops_with_partial_report(self, gen64):
        y0 = initial_profile(gen64, 1e-3, "smooth")
        res = simulate_finite_time(gen64, y0, build_schedule(1.0, 3), cfg=LoopConfig())
        assert res.stop_reason == "guard"
        assert len(res.stages) == 1
        assert "stage 1" in res.message

    def test_dynamic_mode(self, gen64):
        y0 = initial_profile(gen64, 1e-4, "smooth")
        sched = build_schedule(1.0, 2)
        res = simulate_finite_time(gen64, y0, sched, mode="dynamic", cfg=NO_GUARDS)
        assert len(res.stages) == 2
        for st in res.stages:
            assert st.lam1 >= (2 + sched.c) * st.lam
        assert res.report.z_norm is not None

    def test_unknown_mode(self, gen64):
        with pytest.raises(ConfigurationError):
            simulate_finite_time(gen64, np.zeros(gen64.n), build_schedule(1.0, 2), mode="hybrid")


def test_stage_gramians_parallel_and_cached(gen64, tmp_path):
    sched = build_schedule(1.0, 3)
    seq = stage_gramians(gen64, sched)
    par = stage_gramians(gen64, sched, cache=GramianCache(tmp_path), workers=3)
    for a, b in zip(seq, par):
        np.testing.assert_array_equal(a.Q, b.Q)
    assert len(list(tmp_path.glob("*.q.bin"))) == 3
