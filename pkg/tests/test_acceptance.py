"""Acceptance criteria, each run at its stated tolerance with a printed verdict."""
import math
import time

import numpy as np
from scipy.special import mathieu_a, mathieu_b

from conftest import ACCEPTANCE
from twomode.hamiltonian import ChargeConfig, CircuitParams, build_hamiltonian, dispersion_epsilon, dispersions
from twomode.locator import biangulate, induced_offsets, surrogate_map
from twomode.noise import NoiseModel, default_scenario, end_to_end_eval, localize_series, run_scenario
from twomode.ramsey import ExperimentConfig, branch_offsets, fit_peaks, spectrum, synthesize_trace, track_series
from twomode.tight_binding import (
    InfeasibleSplittingError,
    SplittingPair,
    calibrate_A0,
    delta_fs,
    fit_epsilon_slope,
    invert_delta_fs,
    ratio_sweep,
)

LEVELS = [(0, 0), (0, 1), (1, 0), (1, 1)]


def verdict(n: int, ok: bool, detail: str):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line


# --- 1 --------------------------------------------------------------------

def test_criterion_1_device_a_dispersion():
    t0 = time.perf_counter()
    p = CircuitParams.symmetric(11.0, 0.5, 0.2)
    eps = dispersions(p, [(0, 1), (1, 0)])
    dt = time.perf_counter() - t0
    e01, e10 = 1e3 * eps[0, 1], 1e3 * eps[1, 0]
    ok = abs(e01 / 4.0 - 1) <= 0.15 and abs(e10 / 4.1 - 1) <= 0.15 and dt < 10
    verdict(1, ok, f"eps_01={e01:.3f} MHz (4.0) eps_10={e10:.3f} MHz (4.1) in {dt:.2f} s")


# --- 2 --------------------------------------------------------------------

def test_criterion_2_sweep_shape():
    t0 = time.perf_counter()
    params = ratio_sweep(15, 80, 14, E_C=0.5, coupling=0.4)
    ratios = np.array([p.ratio for p in params])
    num = [dispersions(p, LEVELS, check=False) for p in params]
    problems = []
    worst_slope = worst_factor = 0.0
    for lab in LEVELS:
        eps = np.array([e[lab] for e in num])
        if not np.all(np.diff(eps) < 0):
            problems.append(f"{lab} not decreasing")
        full = fit_epsilon_slope(ratios, eps)
        half = len(ratios) // 2
        for sl in (slice(0, half + 1), slice(half, None)):
            worst_slope = max(worst_slope, abs(fit_epsilon_slope(ratios[sl], eps[sl]) / full - 1))
        cal = calibrate_A0(params, lab, eps)
        worst_factor = max(worst_factor, cal.max_ratio)
    dt = time.perf_counter() - t0
    ok = not problems and worst_slope <= 0.10 and worst_factor <= 2.0 and dt < 120
    verdict(2, ok, f"slope variation {100 * worst_slope:.1f}% (<=10%), closed form within x{worst_factor:.2f} "
                   f"(<=2) in {dt:.1f} s {' '.join(problems)}")


# --- 3 --------------------------------------------------------------------

def test_criterion_3_suppression():
    e22, e70 = (dispersion_epsilon(CircuitParams.from_ratio(r, 0.5, 0.4), (1, 1), check=False) for r in (22, 70))
    factor, khz = e22 / e70, 1e6 * e70
    ok = 400 <= factor <= 1e4 and 2 <= khz <= 50
    verdict(3, ok, f"eps_11(22)/eps_11(70)={factor:.0f} [400, 1e4], eps_11(70)={khz:.1f} kHz [2, 50]")


# --- 4 --------------------------------------------------------------------

def charge_levels_1d(E_J, E_C, n_g, N=40):
    n = np.arange(-N, N + 1)
    H = np.diag(4 * E_C * (n - n_g) ** 2) - 0.5 * E_J * (np.eye(n.size, k=1) + np.eye(n.size, k=-1))
    return np.linalg.eigvalsh(H)


def mathieu_pair(E_J, E_C):
    q = E_J / (2 * E_C)
    at0 = np.sort([E_C * mathieu_a(0, q), E_C * mathieu_b(2, q)])
    at_half = np.sort([E_C * mathieu_b(1, q), E_C * mathieu_a(1, q)])
    return at0, at_half


def test_criterion_4_oracle_equivalence():
    rng = np.random.default_rng(2024)
    worst_e = worst_eps = 0.0
    for _ in range(20):
        E_C = rng.uniform(0.2, 1.0)
        E_J1, E_J2 = E_C * rng.uniform(15, 80, 2)
        ng1, ng2 = rng.uniform(-1, 1, 2)
        # labels are degenerate at E_p = 0, so compare the raw eigenvalues
        H = build_hamiltonian(CircuitParams(E_J1, E_J2, E_C, 0.0), ChargeConfig(ng1, ng2), cutoff=14)
        two = np.linalg.eigvalsh(H)[:6]
        a, b = charge_levels_1d(E_J1, E_C, ng1)[:4], charge_levels_1d(E_J2, E_C, ng2)[:4]
        ref = np.sort(np.add.outer(a, b).ravel())[:6]
        worst_e = max(worst_e, np.max(np.abs(two - ref) / np.abs(ref)))
        sym = CircuitParams.symmetric(E_J1, E_C, 0.0)
        (g0, x0), (g5, x5) = mathieu_pair(E_J1, E_C)
        want = {(0, 0): 2 * abs(g5 - g0), (0, 1): abs((g0 + x0) - (g5 + x5))}
        got = dispersions(sym, want, cutoff=14, check=False)
        worst_eps = max(worst_eps, *(abs(got[k] / want[k] - 1) for k in want))
    ok = worst_e < 1e-3 and worst_eps < 1e-3
    verdict(4, ok, f"max rel. error: levels {worst_e:.1e}, dispersion {worst_eps:.1e} (<1e-3) over 20 draws")


# --- 5 --------------------------------------------------------------------

def test_criterion_5_round_trip():
    rng = np.random.default_rng(5)
    worst = 0.0
    for s, d in rng.uniform(0, 0.5, size=(1000, 2)):
        eps = rng.uniform(0.5, 10)
        pair = delta_fs(s, d, eps)
        sols = invert_delta_fs(pair, eps)
        worst = max(worst, min(max(abs(a - s), abs(b - d)) for a, b in sols))
    rejected = 0
    trials = 1000
    for df1, df2, eps in rng.uniform(0, 10, size=(trials, 3)) + [0, 0, 0.1]:
        if abs(df1 + df2) <= eps and abs(df2 - df1) <= eps:
            df2 = eps + df1 + rng.uniform(1e-6, 1)  # force infeasible
        try:
            invert_delta_fs(SplittingPair(df1, df2), eps)
        except InfeasibleSplittingError:
            rejected += 1
    ok = worst < 1e-9 and rejected == trials
    verdict(5, ok, f"max inverse error {worst:.1e} (<1e-9), infeasible rejected {rejected}/{trials}")


# --- 6 --------------------------------------------------------------------

def test_criterion_6_ramsey_closed_loop():
    cfg = ExperimentConfig(detuning=3.5, shots=2500, T2=15.0)
    rng = np.random.default_rng(6)
    good = 0
    for seed in range(50):
        pair = delta_fs(*rng.uniform(0, 0.5, 2), 4.0)
        sp = spectrum(synthesize_trace(branch_offsets(pair), cfg, seed=seed))
        fit = fit_peaks(sp)
        tol = max(0.1, 2 * sp.bin_spacing)
        lo, hi = sorted((pair.df1, pair.df2))
        good += fit.resolved and abs(fit.df1 - lo) < tol and abs(fit.df2 - hi) < tol
    null_cfg = ExperimentConfig(delays=0.1 * np.arange(1000), T2=30.0)
    false_splits = 0
    for seed in range(100):
        fit = fit_peaks(spectrum(synthesize_trace([0.0], null_cfg, seed=1000 + seed)), "auto")
        false_splits += fit.resolved
    ok = good >= 45 and false_splits == 0
    verdict(6, ok, f"{good}/50 fits within tolerance (>=45), {false_splits}/100 false splittings at "
                   f"{1e3 / null_cfg.span:.0f} kHz resolution (0)")


# --- 7 --------------------------------------------------------------------

def test_criterion_7_localization():
    smap = surrogate_map()
    sym = smap.symmetry_error() == (0.0, 0.0)
    rng = np.random.default_rng(7)
    sig = 0.01 * smap.max_abs
    inside = 0
    for _ in range(100):
        r, th = rng.uniform(150, 450), rng.uniform(0, 2 * np.pi)
        x, y = r * np.cos(th), r * np.sin(th)
        region = biangulate(*induced_offsets(smap, x, y), sig, sig, smap)
        inside += region.contains(x, y, any_quadrant=True)
    ok = sym and inside >= 90
    verdict(7, ok, f"{inside}/100 inside 1 sigma (>=90), mirror symmetry exact: {sym}")


# --- 8 --------------------------------------------------------------------

def test_criterion_8_end_to_end():
    t0 = time.perf_counter()
    script = default_scenario()
    smap = surrogate_map()
    traces, truth = run_scenario(script, NoiseModel(), smap=smap)
    points = track_series(traces, script.epsilon, truth.times)
    regions = localize_series(points, smap, script.background)
    m = end_to_end_eval(points, truth, regions)
    dt = time.perf_counter() - t0
    one_jump = len(m.flagged) == 1 and m.jump_recall == 1.0
    ok = m.rms_ng < 0.05 and one_jump and m.hit_rate >= 0.8 and dt < 300 and not math.isnan(m.rms_ng)
    verdict(8, ok, f"rms {m.rms_ng:.2e} (<0.05), flagged {list(m.flagged)} vs true {list(truth.jump_indices)}, "
                   f"hit rate {m.hit_rate:.2f} (>=0.8) in {dt:.0f} s (<300)")
