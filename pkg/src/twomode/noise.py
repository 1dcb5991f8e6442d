"""Charge-noise scenarios and the closed synthesize -> fit -> invert -> localize loop."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .hamiltonian import DEVICE_A, ChargeConfig, CircuitParams, Parity, parity_branch_frequencies
from .locator import LocalizationRegion, SensitivityMap, biangulate, induced_offsets
from .ramsey import ExperimentConfig, RamseyTrace, TrackPoint, branch_offsets_from_offsets, synthesize_trace
from .tight_binding import image_distance

DRIFT_KINDS = ("walk", "ou")
# branch order used for dwell weights: (island-1 odd, island-2 odd)
_BRANCHES = (Parity.EE, Parity.EO, Parity.OE, Parity.OO)


@dataclass(frozen=True)
class NoiseModel:
    qp_rate: float = 0.01              # per us, per island
    drift_sigma: float = 0.0002        # n_g per sqrt(minute), per coordinate
    drift_kind: str = "walk"
    ou_band: tuple[float, float] = (1e-3, 1e-1)  # 1/f band, cycles per minute
    ou_per_decade: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.qp_rate < 0 or self.drift_sigma < 0:
            raise ValueError("rate and drift sigma must be non-negative")
        if self.drift_kind not in DRIFT_KINDS:
            raise ValueError(f"drift_kind must be one of {DRIFT_KINDS}")
        lo, hi = self.ou_band
        if not 0 < lo < hi:
            raise ValueError("ou_band must satisfy 0 < low < high")
        if self.ou_per_decade < 1:
            raise ValueError("ou_per_decade must be at least 1")


@dataclass(frozen=True)
class Waypoint:
    """Charge path node: a point charge at (x, y) um, or direct offsets when x/y are None."""

    time: float                        # minutes
    x: float | None = None
    y: float | None = None
    q: float = 1.0
    n_g_sigma: float | None = None
    n_g_delta: float | None = None

    def __post_init__(self):
        spatial = self.x is not None and self.y is not None
        direct = self.n_g_sigma is not None and self.n_g_delta is not None
        if spatial == direct:
            raise ValueError("a waypoint needs either (x, y) or (n_g_sigma, n_g_delta)")

    @property
    def spatial(self) -> bool:
        return self.x is not None


@dataclass(frozen=True)
class OffsetStep:
    """Sudden background offset change at ``time`` minutes."""

    time: float
    d_sigma: float
    d_delta: float = 0.0


@dataclass(frozen=True)
class ScenarioScript:
    duration: float = 150.0            # minutes
    cadence: float = 2.0               # minutes
    waypoints: tuple[Waypoint, ...] = ()
    background: tuple[float, float] = (0.0, 0.0)
    steps: tuple[OffsetStep, ...] = ()
    epsilon: float = 4.0               # MHz, cos*cos dispersion of the probed transition
    high_fidelity: bool = False
    params: CircuitParams = DEVICE_A
    transition: str = "delta"

    def __post_init__(self):
        if self.duration <= 0 or self.cadence <= 0 or self.cadence > self.duration:
            raise ValueError("need 0 < cadence <= duration")
        if not self.waypoints:
            raise ValueError("at least one waypoint is required")
        t = [w.time for w in self.waypoints]
        if any(b < a for a, b in zip(t, t[1:])) or t[0] < 0 or t[-1] > self.duration:
            raise ValueError("waypoints must be time-ordered within [0, duration]")
        if len({w.spatial for w in self.waypoints}) != 1:
            raise ValueError("waypoints must be all spatial or all direct")
        if any(not 0 <= s.time <= self.duration for s in self.steps):
            raise ValueError("offset steps must lie within [0, duration]")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    @property
    def spatial(self) -> bool:
        return self.waypoints[0].spatial

    @property
    def times(self) -> np.ndarray:
        return self.cadence * np.arange(int(math.floor(self.duration / self.cadence + 1e-9)) + 1)

    def position(self, t: float) -> tuple[float, float, float]:
        """Linearly interpolated (x, y, q) of a spatial path."""
        w = self.waypoints
        tt = [p.time for p in w]
        return tuple(float(np.interp(t, tt, [getattr(p, k) for p in w])) for k in ("x", "y", "q"))

    def background_at(self, t: float) -> tuple[float, float]:
        s, d = self.background
        for st in self.steps:
            if t >= st.time:
                s, d = s + st.d_sigma, d + st.d_delta
        return s, d


def default_scenario() -> ScenarioScript:
    """150-minute run: a charge drifts outward from island 1 and back, one offset step at 75 min."""
    return ScenarioScript(
        waypoints=(Waypoint(0.0, 260.0, 40.0), Waypoint(74.0, 320.0, 60.0), Waypoint(150.0, 210.0, 30.0)),
        background=(0.36, 0.02),
        steps=(OffsetStep(75.0, -0.3, 0.0),),
    )


@dataclass(frozen=True)
class EventLog:
    times: np.ndarray                  # us, sorted
    islands: np.ndarray                # 1 or 2
    duration: float                    # us

    def __post_init__(self):
        if np.any(np.diff(self.times) < 0):
            raise ValueError("events must be time-ordered")
        if not np.all(np.isin(self.islands, (1, 2))):
            raise ValueError("island index must be 1 or 2")

    def count(self, island: int) -> int:
        return int(np.count_nonzero(self.islands == island))


def _arrivals(rng: np.random.Generator, rate: float, duration: float) -> np.ndarray:
    if rate == 0:
        return np.empty(0)
    n = rng.poisson(rate * duration)
    return np.sort(rng.uniform(0.0, duration, n))


def simulate_parity_process(rate: float, duration: float, seed=None) -> EventLog:
    """Independent homogeneous Poisson parity switches on each island."""
    if rate < 0 or duration < 0:
        raise ValueError("rate and duration must be non-negative")
    rng = np.random.default_rng(seed)
    t1, t2 = _arrivals(rng, rate, duration), _arrivals(rng, rate, duration)
    times = np.concatenate([t1, t2])
    isl = np.concatenate([np.ones(t1.size, int), np.full(t2.size, 2)])
    order = np.argsort(times, kind="stable")
    return EventLog(times[order], isl[order], float(duration))


def dwell_weights(log: EventLog, edges: np.ndarray, start: tuple[int, int] = (0, 0)) -> np.ndarray:
    """Fraction of each window [edges[k], edges[k+1]) spent in each parity branch.

    Columns follow EE, EO, OE, OO with the first letter for island 1.
    """
    edges = np.asarray(edges, float)
    knots = np.concatenate([[edges[0]], log.times[(log.times > edges[0]) & (log.times < edges[-1])], [edges[-1]]])
    isl = log.islands[(log.times > edges[0]) & (log.times < edges[-1])]
    p1 = (start[0] + np.concatenate([[0], np.cumsum(isl == 1)])) % 2
    p2 = (start[1] + np.concatenate([[0], np.cumsum(isl == 2)])) % 2
    state = 2 * p1 + p2                # branch index on each interval between knots
    lengths = np.diff(knots)
    out = np.empty((edges.size - 1, 4))
    for b in range(4):
        # occupation time is piecewise linear between knots, so interpolation is exact
        cum = np.concatenate([[0.0], np.cumsum(lengths * (state == b))])
        at = np.interp(edges, knots, cum)
        out[:, b] = np.diff(at)
    return out / np.diff(edges)[:, None]


def _ou_components(model: NoiseModel) -> tuple[np.ndarray, np.ndarray]:
    """Relaxation rates (1/min) and diffusion constants of the OU sum.

    Equal stationary variance per component gives a 1/f spectrum between the
    band edges; the diffusion constants add up to ``drift_sigma**2`` so the
    short-time behaviour matches the random walk.
    """
    lo, hi = model.ou_band
    k = max(2, int(round(model.ou_per_decade * math.log10(hi / lo))) + 1)
    lam = 2 * np.pi * np.geomspace(lo, hi, k)
    return lam, model.drift_sigma**2 * lam / lam.sum()


def simulate_drift(model: NoiseModel, duration: float, cadence: float, seed=None) -> tuple[np.ndarray, np.ndarray]:
    """Drift trajectory sampled every ``cadence`` minutes starting from zero.

    Returns ``(times, offsets)`` with offsets of shape (n, 2) for
    (n_gSigma, n_gDelta).
    """
    if duration < 0 or cadence <= 0:
        raise ValueError("need duration >= 0 and cadence > 0")
    rng = np.random.default_rng(model.seed if seed is None else seed)
    n = int(math.floor(duration / cadence + 1e-9)) + 1
    times = cadence * np.arange(n)
    if model.drift_sigma == 0:
        return times, np.zeros((n, 2))
    if model.drift_kind == "walk":
        steps = rng.normal(0.0, model.drift_sigma * math.sqrt(cadence), size=(n - 1, 2))
        return times, np.vstack([np.zeros((1, 2)), np.cumsum(steps, axis=0)])
    lam, diff = _ou_components(model)
    decay = np.exp(-lam * cadence)
    kick = np.sqrt(diff * (1 - decay**2) / (2 * lam))
    state = np.zeros((lam.size, 2))
    out = np.zeros((n, 2))
    noise = rng.standard_normal((n - 1, lam.size, 2))
    for i in range(1, n):
        state = decay[:, None] * state + kick[:, None] * noise[i - 1]
        out[i] = state.sum(axis=0)
    return times, out


@dataclass(frozen=True)
class ScenarioTruth:
    times: np.ndarray                  # minutes
    n_g_sigma: np.ndarray              # total offsets driving each trace
    n_g_delta: np.ndarray
    induced: np.ndarray                # (n, 2) offsets from the tracked charge
    background: np.ndarray             # (n, 2) background including steps
    drift: np.ndarray                  # (n, 2)
    positions: np.ndarray | None       # (n, 3) x, y, q for spatial paths
    jump_indices: tuple[int, ...]
    events: np.ndarray                 # (n, 2) parity events per island during each trace
    mean_weights: np.ndarray           # (n, 4) acquisition-averaged branch weights

    @property
    def offsets(self) -> np.ndarray:
        return np.column_stack([self.n_g_sigma, self.n_g_delta])


def _branch_offsets(script: ScenarioScript, n_gs: float, n_gd: float) -> dict[Parity, float]:
    if not script.high_fidelity:
        return branch_offsets_from_offsets(n_gs, n_gd, script.epsilon)
    f = parity_branch_frequencies(script.params, ChargeConfig.from_sum_diff(n_gs, n_gd), script.transition)
    mean = np.mean(list(f.values()))
    return {p: 1e3 * (v - mean) for p, v in f.items()}


def run_scenario(script: ScenarioScript, noise: NoiseModel = NoiseModel(), cfg: ExperimentConfig = ExperimentConfig(),
                 smap: SensitivityMap | None = None, mode: str = "delta") -> tuple[list[RamseyTrace], ScenarioTruth]:
    """Generate one Ramsey trace per cadence tick together with the ground truth.

    Parity switches during a trace blend the four branch weights of each
    delay point in proportion to the dwell time within its acquisition.
    """
    if script.spatial and smap is None:
        raise ValueError("a spatial charge path needs a sensitivity map")
    times = script.times
    n = times.size
    ss = np.random.SeedSequence(noise.seed)
    drift_seed, parity_seed, shot_seed = ss.spawn(3)
    _, drift = simulate_drift(noise, float(times[-1]), script.cadence, seed=np.random.default_rng(drift_seed))
    prng = np.random.default_rng(parity_seed)
    shot_seeds = shot_seed.spawn(n)

    induced = np.zeros((n, 2))
    positions = np.zeros((n, 3)) if script.spatial else None
    for i, t in enumerate(times):
        if script.spatial:
            x, y, q = script.position(t)
            if not smap.contains_point(x, y):
                raise ValueError(f"charge path at t = {t:g} min leaves the map: ({x:g}, {y:g}) um")
            positions[i] = (x, y, q)
            induced[i] = induced_offsets(smap, x, y, q)
        else:
            w = script.waypoints
            tt = [p.time for p in w]
            induced[i] = (np.interp(t, tt, [p.n_g_sigma for p in w]), np.interp(t, tt, [p.n_g_delta for p in w]))
    background = np.array([script.background_at(t) for t in times])
    total = induced + background + drift

    acq = cfg.acquisition_ms * 1e3     # us per delay point
    edges = acq * np.arange(cfg.delays.size + 1)
    traces, events, mean_w = [], np.zeros((n, 2), int), np.zeros((n, 4))
    state = (0, 0)
    for i in range(n):
        offs = _branch_offsets(script, total[i, 0], total[i, 1])
        freqs = [offs[p] for p in _BRANCHES]
        log = simulate_parity_process(noise.qp_rate, edges[-1], seed=prng)
        w = dwell_weights(log, edges, state)
        state = ((state[0] + log.count(1)) % 2, (state[1] + log.count(2)) % 2)
        events[i] = (log.count(1), log.count(2))
        mean_w[i] = w.mean(axis=0)
        traces.append(synthesize_trace(freqs, cfg, weights=w, seed=np.random.default_rng(shot_seeds[i]), mode=mode))

    jumps = tuple(int(np.searchsorted(times, st.time)) for st in script.steps
                  if 0 < np.searchsorted(times, st.time) < n)
    truth = ScenarioTruth(times, total[:, 0], total[:, 1], induced, background, drift, positions,
                          tuple(sorted(set(jumps))), events, mean_w)
    return traces, truth


def localize_series(points: Sequence[TrackPoint], smap: SensitivityMap, background: tuple[float, float],
                    sigma_floor: float | None = None, q: float = 1.0) -> list[LocalizationRegion | None]:
    """Biangulate each tracked point after removing the background offset.

    The background starts at the calibrated value and absorbs the measured
    offset change at every flagged jump, since a sudden step is not a slowly
    moving charge. ``sigma_floor`` (default 1 % of the map maximum) is added
    in quadrature to the propagated errors to cover map and drift error.
    """
    floor = 0.01 * smap.max_abs if sigma_floor is None else sigma_floor
    bg = np.array(background, float)
    prev = None
    out: list[LocalizationRegion | None] = []
    for p in points:
        if not p.ok:
            out.append(None)
            continue
        cur = np.array([p.n_g_sigma, p.n_g_delta])
        if p.jump and prev is not None:
            bg = bg + (cur - prev)
        prev = cur
        ns, nd = cur - bg
        out.append(biangulate(ns, nd, math.hypot(p.sigma_n_g_sigma, floor), math.hypot(p.sigma_n_g_delta, floor),
                              smap, q=q))
    return out


@dataclass(frozen=True)
class EndToEndMetrics:
    rms_ng: float
    n_points: int
    n_failed: int
    hit_rate: float
    jump_precision: float
    jump_recall: float
    flagged: tuple[int, ...]

    def as_dict(self) -> dict:
        return {"rms_ng": self.rms_ng, "n_points": self.n_points, "n_failed": self.n_failed,
                "hit_rate": self.hit_rate, "jump_precision": self.jump_precision,
                "jump_recall": self.jump_recall, "flagged": list(self.flagged)}


def end_to_end_eval(series: Sequence[TrackPoint], truth: ScenarioTruth,
                    regions: Sequence[LocalizationRegion | None] | None = None,
                    level: str = "1sigma") -> EndToEndMetrics:
    """Score a tracked series against the scenario truth.

    The n_g error of a point is its distance to the nearest image of the true
    offsets that gives the same splittings, reported as a per-coordinate RMS;
    failed points are excluded from
    the RMS and counted as localization misses.
    """
    n = truth.times.size
    if len(series) != n or (regions is not None and len(regions) != n):
        raise ValueError(f"series of length {len(series)} does not match truth of length {n}")
    err = [image_distance((p.n_g_sigma, p.n_g_delta), (s, d)) ** 2
           for p, s, d in zip(series, truth.n_g_sigma, truth.n_g_delta) if p.ok]
    rms = math.sqrt(0.5 * float(np.mean(err))) if err else float("nan")

    hit_rate = float("nan")
    if regions is not None and truth.positions is not None:
        hits = [r is not None and r.contains(x, y, level, any_quadrant=True)
                for r, (x, y, _) in zip(regions, truth.positions)]
        hit_rate = float(np.mean(hits))

    flagged = tuple(i for i, p in enumerate(series) if p.jump)
    tp = len(set(flagged) & set(truth.jump_indices))
    precision = tp / len(flagged) if flagged else 1.0
    recall = tp / len(truth.jump_indices) if truth.jump_indices else 1.0
    return EndToEndMetrics(rms, n, n - len(err), hit_rate, precision, recall, flagged)
