import math

import numpy as np
import pytest

from twomode.ramsey import (
    AliasingError,
    ExperimentConfig,
    branch_offsets,
    branch_offsets_from_offsets,
    charge_config_from_fit,
    detect_jumps,
    fit_peaks,
    fit_time_domain,
    read_trace,
    spectrum,
    synthesize_trace,
    track_series,
    write_trace,
)
from twomode.tight_binding import InfeasibleSplittingError, SplittingPair, delta_fs

NULL_CFG = ExperimentConfig(delays=0.1 * np.arange(1000), T2=30.0)


def tolerance(spec):
    return max(0.1, 2 * spec.bin_spacing)


# --- synthesis ------------------------------------------------------------

def test_coarse_grid_rejected_as_aliased():
    cfg = ExperimentConfig(delays=np.linspace(0, 20, 60, endpoint=False))
    with pytest.raises(AliasingError):
        synthesize_trace(branch_offsets(SplittingPair(1.0, 4.0)), cfg)


def test_noiseless_single_branch_matches_formula():
    cfg = ExperimentConfig()
    tr = synthesize_trace([0.4], cfg, noiseless=True)
    t = cfg.delays
    expected = 0.5 + 0.5 * np.exp(-t / 15.0) * np.cos(2 * np.pi * 3.9 * t)
    np.testing.assert_allclose(tr.probabilities, expected, atol=1e-15)
    assert tr.shots is None


def test_synthesis_deterministic_and_bounded():
    f = branch_offsets(SplittingPair(1.0, 3.0))
    a = synthesize_trace(f, seed=3)
    b = synthesize_trace(f, seed=3)
    assert np.array_equal(a.probabilities, b.probabilities)
    assert np.all((a.probabilities >= 0) & (a.probabilities <= 1))
    assert np.allclose(a.probabilities * 2500, np.round(a.probabilities * 2500))


def test_weights_validation():
    f = branch_offsets(SplittingPair(1.0, 3.0))
    with pytest.raises(ValueError):
        synthesize_trace(f, weights=[0.5, 0.5, 0.5, 0.5])
    with pytest.raises(ValueError):
        synthesize_trace(f, weights=np.full((10, 4), 0.25))


def test_branch_offsets_symmetric():
    off = branch_offsets_from_offsets(0.3, 0.1, 4.0)
    vals = sorted(off.values())
    assert sum(vals) == pytest.approx(0.0, abs=1e-12)
    pair = delta_fs(0.3, 0.1, 4.0)
    assert vals[-1] - vals[0] == pytest.approx(max(pair.df1, pair.df2))


# --- spectrum -------------------------------------------------------------

def test_spectrum_peak_at_tone():
    tr = synthesize_trace([0.7], noiseless=True)
    sp = spectrum(tr)
    assert abs(sp.freqs[np.argmax(sp.magnitude)] - 4.2) <= sp.bin_spacing
    assert sp.resolution == pytest.approx(1 / 80)
    assert sp.bin_spacing == pytest.approx(1 / 320)


def test_spectrum_input_checks():
    tr = synthesize_trace([0.7], noiseless=True)
    with pytest.raises(ValueError):
        spectrum(tr, pad=0)
    short = synthesize_trace([0.1], ExperimentConfig(delays=0.08 * np.arange(10)), noiseless=True)
    with pytest.raises(ValueError):
        spectrum(short)
    uneven = ExperimentConfig(delays=np.sort(np.r_[0.08 * np.arange(100), 0.123]))
    with pytest.raises(ValueError):
        spectrum(synthesize_trace([0.1], uneven, noiseless=True))


# --- fitting --------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_closed_loop_random_truth(seed):
    rng = np.random.default_rng(100 + seed)
    s, d = rng.uniform(0.05, 0.45, 2)
    pair = delta_fs(s, d, 4.0)
    tr = synthesize_trace(branch_offsets(pair), seed=seed)
    sp = spectrum(tr)
    fit = fit_peaks(sp)
    assert fit.resolved
    truth = sorted([pair.df1, pair.df2])
    assert abs(fit.df1 - truth[0]) < tolerance(sp)
    assert abs(fit.df2 - truth[1]) < tolerance(sp)
    assert fit.center == pytest.approx(3.5, abs=0.01)
    assert fit.width == pytest.approx(1 / (2 * np.pi * 15), rel=0.2)


def test_sigma_scales_with_shots():
    f = branch_offsets(SplittingPair(1.2, 3.1))
    lo = fit_peaks(spectrum(synthesize_trace(f, ExperimentConfig(shots=2500), seed=1)))
    hi = fit_peaks(spectrum(synthesize_trace(f, ExperimentConfig(shots=40000), seed=1)))
    assert lo.sigma("df2") / hi.sigma("df2") == pytest.approx(4.0, rel=0.25)


def test_covariance_matches_scatter():
    f = branch_offsets(SplittingPair(1.2, 3.1))
    fits = [fit_peaks(spectrum(synthesize_trace(f, seed=s))) for s in range(12)]
    scatter = np.std([x.df2 for x in fits], ddof=1)
    sigma = np.mean([x.sigma("df2") for x in fits])
    assert 0.5 < scatter / sigma < 2.0


def test_time_domain_cross_check():
    tr = synthesize_trace(branch_offsets(SplittingPair(1.0, 2.6)), seed=4)
    fit = fit_peaks(spectrum(tr))
    td = fit_time_domain(tr)
    assert td[1] == pytest.approx(fit.df1, abs=0.02)
    assert td[2] == pytest.approx(fit.df2, abs=0.02)


def test_auto_model_keeps_real_splitting():
    fit = fit_peaks(spectrum(synthesize_trace(branch_offsets(SplittingPair(0.8, 2.0)), seed=2)), "auto")
    assert fit.model == "four-peak" and fit.resolved
    assert fit.p_value < 1e-3


@pytest.mark.parametrize("seed", range(3))
def test_null_trace_not_split(seed):
    tr = synthesize_trace([0.0], NULL_CFG, seed=seed)
    fit = fit_peaks(spectrum(tr), "auto")
    assert not fit.resolved
    assert math.isnan(fit.df1) and math.isnan(fit.df2)
    assert fit.resolution == pytest.approx(0.01)


def test_unknown_model_rejected():
    with pytest.raises(ValueError):
        fit_peaks(spectrum(synthesize_trace([0.1], noiseless=True)), "two-peak")


# --- inversion ------------------------------------------------------------

def test_charge_config_exact_pair():
    pair = delta_fs(0.3, 0.1, 4.0)
    est = charge_config_from_fit(pair, 4.0)
    assert min(abs(a - 0.3) + abs(b - 0.1) for a, b in est.solutions) < 1e-9
    assert est.sigma_sigma == 0 and est.sigma_delta == 0
    assert not est.clipped


def test_charge_config_propagates_errors():
    pair = delta_fs(0.3, 0.1, 4.0)
    est = charge_config_from_fit(pair, 4.0, np.diag([1e-4, 1e-4]))
    assert 0 < est.sigma_sigma < 0.01 and 0 < est.sigma_delta < 0.01


def test_charge_config_infeasible():
    with pytest.raises(InfeasibleSplittingError):
        charge_config_from_fit(SplittingPair(3.0, 3.0), 4.0, np.diag([1e-4, 1e-4]))
    est = charge_config_from_fit(SplittingPair(2.005, 2.0), 4.0, np.diag([1e-4, 1e-4]))
    assert est.clipped


def test_unresolved_fit_not_inverted():
    fit = fit_peaks(spectrum(synthesize_trace([0.0], NULL_CFG, seed=0)), "one-peak")
    with pytest.raises(ValueError):
        charge_config_from_fit(fit, 4.0)


# --- tracking -------------------------------------------------------------

def test_detect_jumps_single_step():
    rng = np.random.default_rng(0)
    v = rng.normal(0, 0.01, 20)
    v[5:] += 1.0
    flags = detect_jumps(v, np.full(20, 0.01))
    assert np.flatnonzero(flags).tolist() == [5]


def test_detect_jumps_flat_series_quiet():
    rng = np.random.default_rng(1)
    assert not detect_jumps(rng.normal(0, 0.01, 50), np.full(50, 0.01)).any()


def test_track_series_flags_step():
    offs = [(0.3, 0.1)] * 4 + [(0.15, 0.05)] * 4
    traces = [synthesize_trace(branch_offsets(delta_fs(s, d, 4.0)), seed=i) for i, (s, d) in enumerate(offs)]
    pts = track_series(traces, 4.0)
    assert [p.jump for p in pts].count(True) == 1 and pts[4].jump
    for p, (s, d) in zip(pts, offs):
        assert p.ok
        assert p.n_g_sigma == pytest.approx(s, abs=0.01)
        assert p.n_g_delta == pytest.approx(d, abs=0.01)


def test_track_series_records_failures():
    traces = [synthesize_trace(branch_offsets(SplittingPair(1.0, 3.0)), seed=i) for i in range(2)]
    pts = track_series(traces, 0.5)
    assert all(not p.ok for p in pts)
    assert all("InfeasibleSplittingError" in p.error for p in pts)


# --- files ----------------------------------------------------------------

def test_trace_file_round_trip(tmp_path):
    tr = synthesize_trace(branch_offsets(SplittingPair(1.0, 2.0)), seed=5)
    write_trace(tmp_path / "t.txt", tr)
    back = read_trace(tmp_path / "t.txt")
    assert np.array_equal(back.delays, tr.delays)
    assert np.array_equal(back.probabilities, tr.probabilities)
    assert back.shots == 2500 and back.config.detuning == 3.5


def test_trace_file_bad_row(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("# detuning_MHz: 3.5\n# T2_us: 15\n0 0.5\n0.08 0.4 1\n")
    with pytest.raises(ValueError, match=":4:"):
        read_trace(p)


def test_detect_jumps_ignores_steady_motion():
    v = 0.004 * np.arange(10.0)
    assert not detect_jumps(v, np.full(10, 1e-4)).any()
    v[6:] += 0.05
    assert np.flatnonzero(detect_jumps(v, np.full(10, 1e-4))).tolist() == [6]
