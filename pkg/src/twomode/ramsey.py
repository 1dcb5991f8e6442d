"""Synthetic Ramsey traces, their spectra, and symmetric multi-peak fits.

Frequencies are in MHz and delays in microseconds throughout.

The spectral model is the exact discrete Fourier transform of the windowed,
sampled signal p(t) = c + (A/2) e^{-t/T2} sum_i w_i cos(2 pi f_i t + phi).
Each component is therefore a discrete-time Lorentzian including its
negative-frequency image and finite-record sidelobes, so the fit has no
leakage bias. The amplitude, phase and baseline enter linearly and are
eliminated by linear least squares inside the nonlinear fit.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg, optimize, signal, stats

from .hamiltonian import Parity
from .tight_binding import InfeasibleSplittingError, SplittingPair, branch_energies, DispersionModel
from .tight_binding import invert_delta_fs, REPRESENTABILITY_RTOL

MODES = ("delta", "sigma", "01-11")
# F-test significance for preferring four peaks over one
SPLIT_ALPHA = 1e-3


class FitError(RuntimeError):
    pass


class AliasingError(ValueError):
    pass


def default_delays(count: int = 1000, step: float = 0.08) -> np.ndarray:
    return step * np.arange(count)


@dataclass(frozen=True)
class ExperimentConfig:
    detuning: float = 3.5          # MHz
    shots: int = 2500
    delays: np.ndarray = field(default_factory=default_delays)  # us
    T2: float = 15.0               # us
    acquisition_ms: float = 100.0  # per delay point

    def __post_init__(self):
        d = np.asarray(self.delays, dtype=float)
        object.__setattr__(self, "delays", d)
        if d.ndim != 1 or d.size < 2 or np.any(np.diff(d) <= 0) or d[0] < 0:
            raise ValueError("delays must be a non-negative, strictly increasing 1D grid")
        if int(self.shots) != self.shots or self.shots < 1:
            raise ValueError(f"shots must be a positive integer, got {self.shots}")
        if self.T2 <= 0 or self.detuning <= 0 or self.acquisition_ms <= 0:
            raise ValueError("T2, detuning and acquisition time must be positive")

    @property
    def nyquist(self) -> float:
        return 0.5 / float(np.max(np.diff(self.delays)))

    @property
    def span(self) -> float:
        return float(self.delays.size * np.mean(np.diff(self.delays)))

    def check_aliasing(self, offsets: Sequence[float]):
        """Every branch tone detuning + f must lie strictly inside (0, Nyquist)."""
        off = np.asarray(offsets, dtype=float)
        lo, hi = self.detuning + off.min(), self.detuning + off.max()
        if lo <= 0 or hi >= self.nyquist:
            raise AliasingError(
                f"branch tones span [{lo:.4g}, {hi:.4g}] MHz, outside (0, {self.nyquist:.4g}) MHz; "
                "raise the detuning or sample faster"
            )


@dataclass(frozen=True)
class RamseyTrace:
    delays: np.ndarray
    probabilities: np.ndarray
    config: ExperimentConfig
    mode: str = "delta"
    shots: int | None = None   # None for noiseless traces

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        p = np.asarray(self.probabilities, dtype=float)
        if p.shape != np.shape(self.delays):
            raise ValueError("probabilities must match the delay grid")
        if np.any(p < 0) or np.any(p > 1):
            raise ValueError("probabilities must lie in [0, 1]")


def branch_offsets(pair: SplittingPair) -> np.ndarray:
    """Four branch offsets from the mean frequency: outer and inner pairs."""
    return np.array([-pair.df2 / 2, -pair.df1 / 2, pair.df1 / 2, pair.df2 / 2])


def branch_offsets_from_offsets(n_gs: float, n_gd: float, epsilon: float) -> dict[Parity, float]:
    """Per-parity-branch frequency offsets (MHz) in the cos*cos dispersion model."""
    e = branch_energies(n_gs, n_gd, DispersionModel(0.0, epsilon))
    return {p: e[p] for p in Parity}


def synthesize_trace(branch_freqs: Sequence[float], cfg: ExperimentConfig = ExperimentConfig(),
                     weights: Sequence[float] | np.ndarray | None = None, seed=None,
                     mode: str = "delta", noiseless: bool = False) -> RamseyTrace:
    """Ramsey excited-state probabilities with binomial shot noise.

    ``branch_freqs`` are offsets from the detuning. ``weights`` is either one
    weight per branch or an array of shape (n_delays, n_branches) giving the
    branch occupation during each delay's acquisition.
    """
    f = np.asarray(branch_freqs, dtype=float)
    if f.ndim != 1 or f.size == 0:
        raise ValueError("need at least one branch frequency")
    cfg.check_aliasing(f)
    t = cfg.delays
    w = np.full(f.size, 1.0 / f.size) if weights is None else np.asarray(weights, dtype=float)
    if w.ndim == 1:
        w = np.broadcast_to(w, (t.size, f.size))
    if w.shape != (t.size, f.size):
        raise ValueError(f"weights must have shape ({f.size},) or ({t.size}, {f.size})")
    if np.any(w < 0) or not np.allclose(w.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("weights must be non-negative and sum to 1")
    osc = np.cos(2 * np.pi * np.outer(t, cfg.detuning + f))
    p = 0.5 + 0.5 * np.exp(-t / cfg.T2) * np.sum(w * osc, axis=1)
    p = np.clip(p, 0.0, 1.0)
    if noiseless:
        return RamseyTrace(t.copy(), p, cfg, mode, None)
    rng = np.random.default_rng(seed)
    counts = rng.binomial(cfg.shots, p)
    return RamseyTrace(t.copy(), counts / cfg.shots, cfg, mode, cfg.shots)


# --- spectrum -------------------------------------------------------------

@dataclass(frozen=True)
class Spectrum:
    freqs: np.ndarray        # MHz
    values: np.ndarray       # complex DFT * dt
    window: np.ndarray = field(repr=False)
    trace: RamseyTrace = field(repr=False)
    pad: int = 4

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)

    @property
    def dt(self) -> float:
        return float(self.trace.delays[1] - self.trace.delays[0])

    @property
    def n_fft(self) -> int:
        return self.pad * self.trace.delays.size

    @property
    def bin_spacing(self) -> float:
        return float(self.freqs[1] - self.freqs[0])

    @property
    def resolution(self) -> float:
        """Natural resolution 1/span of the record."""
        return 1.0 / (self.trace.delays.size * self.dt)

    def transform(self, x: np.ndarray) -> np.ndarray:
        """Windowed, padded DFT of time-domain columns, same scaling as ``values``."""
        x = np.asarray(x, dtype=float)
        w = self.window if x.ndim == 1 else self.window[:, None]
        phase = np.exp(-2j * np.pi * self.freqs * self.trace.delays[0])
        out = np.fft.rfft(w * x, n=self.n_fft, axis=0) * self.dt
        return out * (phase if x.ndim == 1 else phase[:, None])


def _window(name: str, n: int) -> np.ndarray:
    if name in (None, "none"):
        return np.ones(n)
    if name.lower() == "hann":
        return signal.windows.hann(n, sym=True)
    raise ValueError(f"unknown window {name!r}")


def spectrum(trace: RamseyTrace, pad: int = 4, window: str = "hann") -> Spectrum:
    """One-sided spectrum of the mean-removed trace; frequency axis in MHz."""
    t = trace.delays
    if t.size < 16:
        raise ValueError(f"need at least 16 delay points, got {t.size}")
    dt = np.diff(t)
    if not np.allclose(dt, dt[0], rtol=1e-6, atol=0):
        raise ValueError("spectrum requires a uniform delay grid")
    if int(pad) != pad or pad < 1:
        raise ValueError("pad must be a positive integer")
    w = _window(window, t.size)
    n_fft = int(pad) * t.size
    freqs = np.fft.rfftfreq(n_fft, dt[0])
    spec = Spectrum(freqs, np.zeros(freqs.size, complex), w, trace, int(pad))
    x = trace.probabilities - trace.probabilities.mean()
    return replace(spec, values=spec.transform(x))


# --- fitting --------------------------------------------------------------

PARAM_NAMES = ("center", "df1", "df2", "width", "amplitude", "phase", "baseline")
ONE_PEAK_NAMES = ("center", "width", "amplitude", "phase", "baseline")


@dataclass(frozen=True)
class PeakFit:
    """Symmetric four-peak (or single-peak) fit. Frequencies in MHz.

    ``width`` is the Lorentzian half width at half maximum, 1/(2 pi T2).
    ``resolved`` is False when the splitting is below the record resolution
    or not statistically supported; the splittings are then NaN.
    """

    center: float
    df1: float
    df2: float
    width: float
    amplitude: float
    baseline: float
    phase: float
    covariance: np.ndarray = field(repr=False)
    param_names: tuple[str, ...]
    model: str
    resolved: bool
    rss: float
    n_points: int
    resolution: float
    p_value: float = float("nan")

    def sigma(self, name: str) -> float:
        try:
            i = self.param_names.index(name)
        except ValueError:
            return float("nan")
        return float(math.sqrt(max(self.covariance[i, i], 0.0)))

    @property
    def pair(self) -> SplittingPair:
        return SplittingPair(self.df1, self.df2)

    @property
    def pair_covariance(self) -> np.ndarray:
        if self.model != "four-peak":
            return np.full((2, 2), np.nan)
        i, j = self.param_names.index("df1"), self.param_names.index("df2")
        return self.covariance[np.ix_([i, j], [i, j])]

    def as_dict(self) -> dict:
        out = {"model": self.model, "resolved": self.resolved, "center": self.center, "df1": self.df1,
               "df2": self.df2, "width": self.width, "amplitude": self.amplitude,
               "baseline": self.baseline, "rss": self.rss, "p_value": self.p_value}
        for name in ("center", "df1", "df2", "width", "amplitude"):
            out[f"sigma_{name}"] = self.sigma(name)
        return out


def _time_model(t: np.ndarray, freqs: np.ndarray, gamma: float) -> np.ndarray:
    """Basis columns (cos part, sin part, constant) for equally weighted tones."""
    env = 0.5 * np.exp(-gamma * t) / freqs.size
    arg = 2 * np.pi * np.outer(t, freqs)
    return np.column_stack([env * np.cos(arg).sum(axis=1), -env * np.sin(arg).sum(axis=1), np.ones_like(t)])


def _tones(center: float, df2: float, r: float, four: bool) -> np.ndarray:
    if not four:
        return np.array([center])
    return center + 0.5 * df2 * np.array([-1.0, -r, r, 1.0])


def _split(z: np.ndarray) -> np.ndarray:
    return np.concatenate([z.real, z.imag], axis=0)


class _Problem:
    def __init__(self, spec: Spectrum):
        self.spec = spec
        self.t = spec.trace.delays
        self.data = _split(spec.values)

    def basis(self, theta, four):
        if four:
            center, df2, r, gamma = theta
        else:
            center, gamma = theta
            df2 = r = 0.0
        return _split(self.spec.transform(_time_model(self.t, _tones(center, df2, r, four), gamma)))

    def linear(self, theta, four):
        B = self.basis(theta, four)
        try:
            coef = linalg.solve(B.T @ B, B.T @ self.data, assume_a="pos")
        except linalg.LinAlgError:
            coef, *_ = linalg.lstsq(B, self.data)
        return coef, B

    def residual(self, theta, four):
        coef, B = self.linear(theta, four)
        return B @ coef - self.data


def _initial_guesses(spec: Spectrum, gamma0: float, four: bool, n_peaks: int = 6) -> list[np.ndarray]:
    """Candidate starts built from the largest spectral maxima.

    Every pair of maxima is tried as the outer pair, with the inner ratio
    taken from each remaining maximum or set to zero.
    """
    mag = spec.magnitude
    f = spec.freqs
    masked = np.where(f > 2 * spec.resolution, mag, 0.0)
    idx, _ = signal.find_peaks(masked)
    if idx.size == 0:
        idx = np.array([int(np.argmax(masked))])
    idx = idx[np.argsort(masked[idx])[::-1]][:n_peaks]
    pk = f[idx]
    top = pk[0]
    if not four:
        return [np.array([top, g]) for g in (gamma0, 3 * gamma0)]
    res = spec.resolution
    guesses = [np.array([top, 2 * res, 0.5, gamma0]), np.array([top, 10 * res, 0.0, gamma0])]
    for i in range(pk.size):
        for j in range(i + 1, pk.size):
            c, d2 = 0.5 * (pk[i] + pk[j]), abs(pk[j] - pk[i])
            ratios = {0.0} | {min(1.0, 2 * abs(pk[k] - c) / d2) for k in range(pk.size) if k not in (i, j)}
            guesses += [np.array([c, d2, r, gamma0]) for r in sorted(ratios)]
    return guesses


def _solve(problem: _Problem, guesses, four: bool, nyq: float, n_refine: int = 3):
    if four:
        lb, ub = np.array([0.0, 0.0, 0.0, 1e-4]), np.array([nyq, 2 * nyq, 1.0, 50.0])
    else:
        lb, ub = np.array([0.0, 1e-4]), np.array([nyq, 50.0])
    starts = [np.clip(g, lb + 1e-12, ub - 1e-12) for g in guesses]
    # screen every start with one cheap evaluation, refine the best few
    costs = [float(np.sum(problem.residual(g, four) ** 2)) for g in starts]
    best = None
    for k in np.argsort(costs, kind="stable")[:n_refine]:
        try:
            sol = optimize.least_squares(problem.residual, starts[k], args=(four,), bounds=(lb, ub),
                                         method="trf", x_scale="jac", max_nfev=100)
        except (ValueError, np.linalg.LinAlgError):
            continue
        if np.all(np.isfinite(sol.x)) and (best is None or sol.cost < best.cost):
            best = sol
    if best is None:
        raise FitError("peak fit failed to converge from every start")
    return best


def _full_model(t, params, four):
    if four:
        center, df1, df2, width, amp, phase, base = params
        r = df1 / df2 if df2 > 0 else 0.0
        tones = _tones(center, df2, r, True)
    else:
        center, width, amp, phase, base = params
        tones = np.array([center])
    B = _time_model(t, tones, 2 * np.pi * width)
    return amp * (math.cos(phase) * B[:, 0] + math.sin(phase) * B[:, 1]) + base


def _gram(spec: Spectrum) -> np.ndarray:
    """Re(F^H F) for the stacked real/imag spectral operator F."""
    n = spec.trace.delays.size
    j = np.arange(spec.freqs.size)
    lag = np.arange(n)
    c = np.cos(2 * np.pi * np.outer(lag, j) / spec.n_fft).sum(axis=1)
    K = linalg.toeplitz(c)
    w = spec.window * spec.dt
    return w[:, None] * K * w[None, :]


def _covariance(spec: Spectrum, params: np.ndarray, four: bool, rss: float) -> np.ndarray:
    t = spec.trace.delays
    base = _full_model(t, params, four)
    J = np.empty((t.size, params.size))
    for k in range(params.size):
        h = 1e-6 * max(abs(params[k]), 1e-3)
        up, dn = params.copy(), params.copy()
        up[k] += h
        dn[k] -= h
        J[:, k] = (_full_model(t, up, four) - _full_model(t, dn, four)) / (2 * h)
    G = _gram(spec)
    A = J.T @ G @ J
    Ainv = linalg.pinvh(A)
    shots = spec.trace.shots
    if shots:
        # the spectrum is of the mean-removed trace, so restore the offset
        p = np.clip(base + spec.trace.probabilities.mean(), 1.0 / shots, 1 - 1.0 / shots)
        var = p * (1 - p) / shots
        GJ = G @ J
        meat = GJ.T @ (var[:, None] * GJ)
        cov = Ainv @ meat @ Ainv
    else:
        dof = max(t.size - params.size, 1)
        cov = Ainv * rss / dof
    return 0.5 * (cov + cov.T)


def _pack(problem: _Problem, theta: np.ndarray, four: bool):
    coef, _ = problem.linear(theta, four)
    a_c, a_s, base = coef
    amp, phase = math.hypot(a_c, a_s), math.atan2(a_s, a_c)
    if four:
        center, df2, r, gamma = theta
        return np.array([center, r * df2, df2, gamma / (2 * np.pi), amp, phase, base])
    center, gamma = theta
    return np.array([center, gamma / (2 * np.pi), amp, phase, base])


def _fit_model(spec: Spectrum, four: bool, gamma0: float):
    problem = _Problem(spec)
    sol = _solve(problem, _initial_guesses(spec, gamma0, four), four, spec.freqs[-1])
    params = _pack(problem, sol.x, four)
    rss = float(2 * sol.cost)
    cov = _covariance(spec, params, four, rss)
    return params, cov, rss


def fit_peaks(spec: Spectrum, model: str = "four-peak", gamma0: float | None = None) -> PeakFit:
    """Fit four symmetric peaks, one peak, or choose between them (``model='auto'``).

    Four-peak fits whose outer splitting falls below the record resolution
    are reported unresolved. In ``auto`` mode the four-peak model must also
    beat the single peak in an F-test at level ``SPLIT_ALPHA``.
    """
    if model not in ("four-peak", "one-peak", "auto"):
        raise ValueError(f"unknown model {model!r}")
    if gamma0 is None:
        gamma0 = 1.0 / spec.trace.config.T2
    n = spec.trace.delays.size
    res = spec.resolution

    def one():
        params, cov, rss = _fit_model(spec, False, gamma0)
        return params, cov, rss

    def make_one(params, cov, rss, p_value=float("nan")):
        center, width, amp, phase, base = params
        return PeakFit(center, float("nan"), float("nan"), width, amp, base, phase, cov, ONE_PEAK_NAMES,
                       "one-peak", False, rss, n, res, p_value)

    if model == "one-peak":
        return make_one(*one())

    params, cov, rss4 = _fit_model(spec, True, gamma0)
    center, df1, df2, width, amp, phase, base = params
    p_value = float("nan")
    resolved = df2 >= res
    if model == "auto":
        p1, c1, rss1 = one()
        dof = n - len(PARAM_NAMES)
        F = max(rss1 - rss4, 0.0) / 3 / (rss4 / dof)
        p_value = float(stats.f.sf(F, 3, dof))
        if not (resolved and p_value < SPLIT_ALPHA):
            return make_one(p1, c1, rss1, p_value)
    if not resolved:
        df1 = df2 = float("nan")
    return PeakFit(center, df1, df2, width, amp, base, phase, cov, PARAM_NAMES, "four-peak", bool(resolved),
                   rss4, n, res, p_value)


def fit_time_domain(trace: RamseyTrace, four: bool = True, gamma0: float | None = None) -> np.ndarray:
    """Cross-check: direct least-squares fit of the time-domain model.

    Returns parameters in ``PARAM_NAMES`` (or ``ONE_PEAK_NAMES``) order.
    """
    spec = spectrum(trace, pad=1, window="none")
    seeds = _initial_guesses(spec, gamma0 or 1.0 / trace.config.T2, four)
    t, y = trace.delays, trace.probabilities

    def resid(theta):
        if four:
            c, d2, r, g = theta
        else:
            (c, g), d2, r = theta, 0.0, 0.0
        B = _time_model(t, _tones(c, d2, r, four), g)
        coef, *_ = linalg.lstsq(B, y, lapack_driver="gelsy")
        return B @ coef - y

    nyq = spec.freqs[-1]
    lb = [0.0, 0.0, 0.0, 1e-4] if four else [0.0, 1e-4]
    ub = [nyq, 2 * nyq, 1.0, 50.0] if four else [nyq, 50.0]
    best = None
    for g in seeds:
        g = np.clip(g, np.array(lb) + 1e-12, np.array(ub) - 1e-12)
        sol = optimize.least_squares(resid, g, bounds=(lb, ub), x_scale="jac", max_nfev=400)
        if best is None or sol.cost < best.cost:
            best = sol
    theta = best.x
    if four:
        c, d2, r, g = theta
        B = _time_model(t, _tones(c, d2, r, True), g)
    else:
        c, g = theta
        B = _time_model(t, np.array([c]), g)
    (a_c, a_s, base), *_ = linalg.lstsq(B, y)
    amp, phase = math.hypot(a_c, a_s), math.atan2(a_s, a_c)
    if four:
        return np.array([c, r * d2, d2, g / (2 * np.pi), amp, phase, base])
    return np.array([c, g / (2 * np.pi), amp, phase, base])


# --- inversion and tracking ----------------------------------------------

@dataclass(frozen=True)
class ChargeEstimate:
    solutions: tuple[tuple[float, float], ...]
    sigma_sigma: float
    sigma_delta: float
    covariance: np.ndarray = field(repr=False)
    pair: SplittingPair
    clipped: bool = False

    @property
    def best(self) -> tuple[float, float]:
        return self.solutions[0]


def _project_feasible(pair: SplittingPair, eps: float, cov: np.ndarray) -> tuple[SplittingPair, bool]:
    """Pull a slightly infeasible pair onto the feasible set if within 1 sigma."""
    s1 = math.sqrt(max(cov[0, 0], 0.0)) if np.all(np.isfinite(cov)) else 0.0
    s2 = math.sqrt(max(cov[1, 1], 0.0)) if np.all(np.isfinite(cov)) else 0.0
    df1, df2 = max(pair.df1, 0.0), max(pair.df2, 0.0)
    excess_sum = df1 + df2 - eps
    excess_diff = abs(df2 - df1) - eps
    tol = math.hypot(s1, s2) + REPRESENTABILITY_RTOL * eps
    if excess_sum > tol or excess_diff > tol:
        name = "|df2+df1|<=eps" if excess_sum > excess_diff else "|df2-df1|<=eps"
        raise InfeasibleSplittingError(
            f"splitting ({pair.df1:.4g}, {pair.df2:.4g}) MHz is inconsistent with epsilon={eps:.4g} MHz "
            f"beyond its 1-sigma uncertainty", name, max(excess_sum, excess_diff))
    q = _clip_feasible(df1, df2, eps)
    return q, (q.df1, q.df2) != (pair.df1, pair.df2)


def _clip_feasible(df1: float, df2: float, eps: float) -> SplittingPair:
    df1, df2 = max(df1, 0.0), max(df2, 0.0)
    if df1 + df2 > eps:
        scale = eps / (df1 + df2)
        df1, df2 = df1 * scale, df2 * scale
    if abs(df2 - df1) > eps:
        mid = 0.5 * (df1 + df2)
        half = 0.5 * eps * np.sign(df2 - df1)
        df1, df2 = mid - half, mid + half
    return SplittingPair(max(df1, 0.0), max(df2, 0.0))


def charge_config_from_fit(fit: PeakFit | SplittingPair, epsilon: float,
                           covariance: np.ndarray | None = None) -> ChargeEstimate:
    """Invert a fitted splitting to (n_gSigma, n_gDelta) with propagated 1-sigma errors.

    The inverse-map Jacobian is a central secant with a step of one standard
    deviation (or 1e-6 epsilon when smaller), one-sided at the domain edges;
    near boundaries where the exact derivative diverges this yields a large
    but finite uncertainty.
    """
    if isinstance(fit, PeakFit):
        if not fit.resolved:
            raise ValueError("cannot invert an unresolved fit")
        pair, cov = fit.pair, fit.pair_covariance
    else:
        pair = fit
        cov = np.zeros((2, 2)) if covariance is None else np.asarray(covariance, dtype=float)
    pair, clipped = _project_feasible(pair, epsilon, cov)
    sols = invert_delta_fs(pair, epsilon)
    x0 = np.array([pair.df1, pair.df2])
    sd = np.sqrt(np.clip(np.diag(cov), 0, None))

    def inv(x):
        q = _clip_feasible(x[0], x[1], epsilon)
        return np.array(invert_delta_fs(q, epsilon)[0])

    J = np.zeros((2, 2))
    for k in range(2):
        h = max(sd[k], 1e-6 * epsilon)
        up, dn = x0.copy(), x0.copy()
        up[k] += h
        dn[k] = max(dn[k] - h, 0.0)
        J[:, k] = (inv(up) - inv(dn)) / (up[k] - dn[k])
    c = J @ cov @ J.T
    return ChargeEstimate(tuple(sols), float(math.sqrt(max(c[0, 0], 0))), float(math.sqrt(max(c[1, 1], 0))),
                          c, pair, clipped)


@dataclass
class TrackPoint:
    time: float
    df1: float = float("nan")
    df2: float = float("nan")
    sigma_df1: float = float("nan")
    sigma_df2: float = float("nan")
    n_g_sigma: float = float("nan")
    n_g_delta: float = float("nan")
    sigma_n_g_sigma: float = float("nan")
    sigma_n_g_delta: float = float("nan")
    solutions: tuple = ()
    jump: bool = False
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


def detect_jumps(values: np.ndarray, sigmas: np.ndarray, threshold: float = 5.0) -> np.ndarray:
    """Flag index j when the step from j-1 to j departs from the typical step by
    more than ``threshold`` sigma.

    The typical step is the median step (zero when fewer than three steps), so
    steady motion is not flagged. The per-step sigma combines both fit errors with a robust scale (scaled
    median absolute deviation) of all successive differences, which captures
    scatter the fit errors miss. NaN entries are skipped.
    """
    values = np.asarray(values, float)
    sigmas = np.asarray(sigmas, float)
    flags = np.zeros(values.size, bool)
    idx = np.flatnonzero(np.isfinite(values) & np.isfinite(sigmas))
    if idx.size < 2:
        return flags
    d = np.diff(values[idx])
    trend = np.median(d) if d.size >= 3 else 0.0
    tau = 1.4826 * np.median(np.abs(d - np.median(d)))
    scale = np.sqrt(sigmas[idx[1:]] ** 2 + sigmas[idx[:-1]] ** 2 + tau**2)
    flags[idx[1:]] = np.abs(d - trend) > threshold * np.maximum(scale, 1e-15)
    return flags


def track_series(traces: Sequence[RamseyTrace], epsilon: float, times: Sequence[float] | None = None,
                 threshold: float = 5.0) -> list[TrackPoint]:
    """Fit and invert each trace; flag jumps between successive traces.

    The reported offsets are the canonical image (n_gSigma >= n_gDelta);
    ``solutions`` keeps every fundamental-domain solution. Per-trace
    failures are recorded in ``error``.
    """
    if len(traces) < 2:
        raise ValueError("need at least two traces to track")
    times = list(range(len(traces))) if times is None else list(times)
    if len(times) != len(traces):
        raise ValueError("times must match traces")
    points = []
    for t, tr in zip(times, traces):
        pt = TrackPoint(time=float(t))
        try:
            fit = fit_peaks(spectrum(tr), "four-peak")
            pt.df1, pt.df2 = fit.df1, fit.df2
            pt.sigma_df1, pt.sigma_df2 = fit.sigma("df1"), fit.sigma("df2")
            if not fit.resolved:
                raise FitError("splitting below resolution")
            est = charge_config_from_fit(fit, epsilon)
            pt.solutions = est.solutions
            pt.n_g_sigma, pt.n_g_delta = est.best
            pt.sigma_n_g_sigma, pt.sigma_n_g_delta = est.sigma_sigma, est.sigma_delta
        except (FitError, InfeasibleSplittingError, ValueError, np.linalg.LinAlgError) as exc:
            pt.error = f"{type(exc).__name__}: {exc}"
        points.append(pt)
    flags = np.zeros(len(points), bool)
    for key in ("df1", "df2"):
        vals = np.array([getattr(p, key) for p in points])
        sig = np.array([getattr(p, "sigma_" + key) for p in points])
        flags |= detect_jumps(vals, sig, threshold)
    for p, f in zip(points, flags):
        p.jump = bool(f)
    return points


# --- trace files ----------------------------------------------------------

_HEADER = re.compile(r"#\s*([A-Za-z0-9_]+)\s*:\s*(.*)$")


def write_trace(path: str | Path, trace: RamseyTrace):
    cfg = trace.config
    lines = [
        f"# detuning_MHz: {cfg.detuning!r}",
        f"# shots: {trace.shots if trace.shots is not None else 'inf'}",
        f"# T2_us: {cfg.T2!r}",
        f"# acquisition_ms: {cfg.acquisition_ms!r}",
        f"# mode: {trace.mode}",
        "# columns: delay_us probability",
    ]
    lines += [f"{t:.17g} {p:.17g}" for t, p in zip(trace.delays, trace.probabilities)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_trace(path: str | Path) -> RamseyTrace:
    meta, rows = {}, []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            m = _HEADER.match(line)
            if m:
                meta[m.group(1)] = m.group(2).strip()
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 2 columns, got {len(parts)}")
        rows.append([float(x) for x in parts])
    if not rows:
        raise ValueError(f"{path}: no data rows")
    data = np.array(rows)
    try:
        shots = None if meta.get("shots", "inf") == "inf" else int(meta["shots"])
        cfg = ExperimentConfig(detuning=float(meta["detuning_MHz"]), shots=shots or 1, delays=data[:, 0],
                               T2=float(meta["T2_us"]), acquisition_ms=float(meta.get("acquisition_ms", 100.0)))
    except KeyError as exc:
        raise ValueError(f"{path}: missing header key {exc}") from None
    return RamseyTrace(data[:, 0], data[:, 1], cfg, meta.get("mode", "delta"), shots)
