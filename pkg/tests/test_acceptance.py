"""End-to-end acceptance checks at desk scale (L=1, N=64, dt=1e-3, T=2).

Each test prints one ``criterion N: PASS|FAIL`` line with its measured
values before asserting, so ``pytest -v`` output doubles as a scorecard.
"""

import numpy as np
import pytest

from kdvstab.cli import main
from kdvstab.closedloop import LoopConfig, decay_report, fit_rate, initial_profile, simulate_dynamic, simulate_static
from kdvstab.critical import conditioning_scan, uncontrollable_mode_probe
from kdvstab.discretization import build_generator, build_grid
from kdvstab.errors import ConfigurationError
from kdvstab.finitetime import build_schedule, constant_lambda_baseline, simulate_finite_time
from kdvstab.gramian import assemble_quadrature, assemble_sylvester, invert, sylvester_residual
from kdvstab.propagator import PropagatorConfig, propagate, standard_test_functions, weak_form_residual

L, N, DT, T, AMP = 1.0, 64, 1e-3, 2.0, 1e-3


def verdict(capsys, number, ok, **metrics):
    text = " ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in metrics.items())
    with capsys.disabled():
        print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} {text}")
    assert ok, f"criterion {number}: {text}"


@pytest.fixture(scope="module")
def gen():
    return build_generator(build_grid(L, N))


@pytest.fixture(scope="module")
def gram(gen):
    return assemble_sylvester(gen, 1.0)


def test_criterion_1_conservation(capsys, gen):
    y0 = initial_profile(gen, AMP, "gauss")
    traj, _ = propagate(gen, y0, T, PropagatorConfig(dt=DT))
    norms = np.array([gen.norm(s) for s in traj.states])
    drift = float(np.max(np.abs(norms - norms[0])) / norms[0])
    verdict(capsys, 1, drift <= 1e-8, max_relative_drift=drift)


def test_criterion_2_gramian_oracles(capsys, gen, gram):
    quad = assemble_quadrature(gen, 1.0)
    dist = float(np.linalg.norm(quad.Q - gram.Q) / np.linalg.norm(gram.Q))
    res = sylvester_residual(gen, gram)
    verdict(capsys, 2, dist <= 1e-3 and res <= 1e-9, frobenius_distance=dist, residual=res)


def test_criterion_3_static_rapid_stabilization(capsys, gen):
    y0 = initial_profile(gen, AMP, "gauss")
    ok, metrics = True, {}
    for lam in (0.5, 1.0, 2.0):
        rep = simulate_static(gen, y0, assemble_sylvester(gen, lam), T, LoopConfig(dt=DT))
        rate, viol = decay_report(rep, lam, slack=0.1, prefactor=2.0)
        ok &= viol == 0 and rate >= 1.6 * lam
        metrics[f"rate_{lam:g}"] = rate
        metrics[f"violations_{lam:g}"] = viol
    verdict(capsys, 3, ok, **metrics)


def _identity_ratio(n_grid, dt):
    g = build_generator(build_grid(L, n_grid))
    rep = simulate_static(g, initial_profile(g, AMP, "gauss"), assemble_sylvester(g, 1.0), T, LoopConfig(dt=dt))
    return float(np.max(rep.identity_error) / np.max(rep.norm_ytilde))


def test_criterion_4_trajectory_identity(capsys):
    coarse, fine = _identity_ratio(64, 1e-3), _identity_ratio(128, 5e-4)
    ok = bool(np.isfinite(coarse) and np.isfinite(fine) and coarse > fine)
    verdict(capsys, 4, ok, ratio_N64=coarse, ratio_N128=fine)


def test_criterion_5_dynamic_stabilization(capsys, gen, gram):
    Qinv, _ = invert(gram)
    y0 = initial_profile(gen, AMP, "gauss")
    yt0 = initial_profile(gen, AMP, "random", seed=1)
    mismatch = gen.norm(yt0 - Qinv @ y0) / gen.norm(yt0)
    rep = simulate_dynamic(gen, y0, yt0, gram, 3.5, 1.0, T, LoopConfig(dt=DT), Qinv=Qinv)
    window = (T / 10, T)
    r_y = fit_rate(rep.times, rep.norm_y, window)
    r_yt = fit_rate(rep.times, rep.norm_ytilde, window)
    r_z = fit_rate(rep.times, rep.z_norm, window)
    try:
        simulate_dynamic(gen, y0, yt0, gram, 2.9, 1.0, T, LoopConfig(dt=DT), Qinv=Qinv)
        rejected = False
    except ConfigurationError:
        rejected = True
    ok = mismatch > 0.1 and r_y >= 1.6 and r_yt >= 1.6 and r_z > r_y and rejected
    verdict(capsys, 5, ok, rate_y=r_y, rate_ytilde=r_yt, rate_z=r_z, lambda1_2p9_rejected=rejected)


def test_criterion_6_finite_time(capsys, gen):
    # the stage smallness guard refuses the state handed to stage 1, so guards
    # are off to realize the stages at all
    cfg = LoopConfig(dt=DT, guards=False)
    sched = build_schedule(1.0, 4, lam_base=0.5)
    y0 = initial_profile(gen, AMP, "gauss")
    res = simulate_finite_time(gen, y0, sched, cfg=cfg)
    ratios = res.ratios[:3]
    base = constant_lambda_baseline(gen, y0, sched, cfg)
    norms = res.stage_norms()
    factor = float(base[3] / norms[3]) if len(norms) > 3 and norms[3] > 0 else float("nan")
    decreasing = len(ratios) == 3 and all(b < a for a, b in zip(ratios, ratios[1:]))
    ok = decreasing and factor >= 5
    verdict(capsys, 6, ok, stages=len(res.stages), ratios=[float(f"{r:.3g}") for r in ratios],
            baseline_factor=factor, stop=res.stop_reason)


def test_criterion_7_critical_length(capsys):
    rows = conditioning_scan((5.5, 7.0), 1.0, N, 31)
    Ls = np.array([r.L for r in rows])
    lmin = np.array([r.lambda_min for r in rows])
    at = Ls[int(np.argmin(lmin))]
    nearest = Ls[int(np.argmin(np.abs(Ls - 2 * np.pi)))]
    dip = float(np.median(lmin) / np.min(lmin))
    crit = uncontrollable_mode_probe(2 * np.pi, N)["indicator"]
    reg = uncontrollable_mode_probe(1.0, N)["indicator"]
    ok = at == nearest and dip >= 100 and crit <= 1e-2 and reg > 1e-2
    verdict(capsys, 7, ok, argmin_L=float(at), dip=dip, probe_2pi=crit, probe_L1=reg)


def test_criterion_8_monotone_bounds(capsys, gen):
    ev = [assemble_sylvester(gen, lam).eigvalsh() for lam in (0.5, 1.0, 2.0, 4.0)]
    lmin = np.array([e[0] for e in ev])
    lmax = np.array([e[-1] for e in ev])
    ok = bool(np.all(np.diff(lmin) <= 0) and np.all(np.diff(lmax) <= 0))
    verdict(capsys, 8, ok, lambda_min=[float(f"{v:.3g}") for v in lmin], lambda_max=[float(f"{v:.3g}") for v in lmax])


def _weak_residuals(n_grid, dt):
    g = build_generator(build_grid(L, n_grid))
    traj, _ = propagate(g, g.sample(lambda x: np.sin(2 * np.pi * x) ** 2), T, PropagatorConfig(dt=dt))
    return [weak_form_residual(g, traj, tf) for tf in standard_test_functions(T, L)]


def test_criterion_9_weak_form(capsys):
    coarse, fine = _weak_residuals(64, 1e-3), _weak_residuals(128, 5e-4)
    ratios = [c / f for c, f in zip(coarse, fine)]
    verdict(capsys, 9, all(r >= 3 for r in ratios), ratios=[float(f"{r:.3g}") for r in ratios])


def test_criterion_10_reproducibility(capsys, tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [main(["simulate", "--out", str(o), "--seed", "7", "--override", "ic=random"]) for o in outs]
    names = sorted(p.name for p in outs[0].glob("*.csv"))
    same = bool(names) and all((outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in names)
    verdict(capsys, 10, same and codes == [0, 0], files=",".join(names), exit_codes=codes)
