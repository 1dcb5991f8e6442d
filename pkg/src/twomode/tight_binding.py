"""Closed-form charge-dispersion model and the peak-splitting maps.

Convention: epsilon is the peak-to-peak dispersion of a level over the
offset-charge unit cell, so the outer Ramsey peak separation at the sweet
spot equals epsilon/h. The cos*cos energy surface therefore has amplitude
epsilon/2.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import integrate, linalg

from .hamiltonian import CircuitParams, Label, Parity, dispersion_epsilon, from_sum_diff

LATTICE_VECTOR = (2 * math.pi, 2 * math.pi)
REPRESENTABILITY_RTOL = 1e-9


class InfeasibleSplittingError(ValueError):
    """Splitting pair that no charge configuration can produce for the given epsilon."""

    def __init__(self, message: str, bound: str, excess: float):
        super().__init__(message)
        self.bound = bound
        self.excess = excess


class RegimeWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class DispersionModel:
    mean: float
    epsilon: float
    level: Label = (0, 1)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")

    @property
    def bounds(self) -> tuple[float, float]:
        return self.mean - self.epsilon / 2, self.mean + self.epsilon / 2


@dataclass(frozen=True)
class SplittingPair:
    """Inner (df1) and outer (df2) peak separations, MHz."""

    df1: float
    df2: float

    def representable(self, epsilon: float, rtol: float = REPRESENTABILITY_RTOL) -> bool:
        try:
            _check_representable(self, epsilon, rtol)
        except InfeasibleSplittingError:
            return False
        return True


@dataclass(frozen=True)
class TBCoefficients:
    alpha: float
    beta: float
    gamma: float
    orbital: str = "harmonic"

    @property
    def dominance(self) -> float:
        """|alpha beta / gamma|; small in the transmon regime."""
        return abs(self.alpha * self.beta / self.gamma)

    @property
    def amplitude(self) -> float:
        """Magnitude of the cos*cos coefficient gamma - alpha*beta."""
        return abs(self.gamma - self.alpha * self.beta)


def tb_energy(n_gs, n_gd, model: DispersionModel):
    return model.mean + 0.5 * model.epsilon * np.cos(np.pi * n_gs) * np.cos(np.pi * n_gd)


def branch_energies(n_gs: float, n_gd: float, model: DispersionModel) -> dict[Parity, float]:
    """Model energy in each parity branch; an odd island shifts its offset by 0.5."""
    n1, n2 = from_sum_diff(n_gs, n_gd)
    out = {}
    for p in Parity:
        s1, s2 = p.shift
        out[p] = float(tb_energy(n1 + s1 + n2 + s2, n1 + s1 - n2 - s2, model))
    return out


def delta_fs(n_gs: float, n_gd: float, epsilon: float) -> SplittingPair:
    """Peak separations for dispersion ``epsilon`` (MHz in, MHz out)."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    u, v = math.pi * n_gs, math.pi * n_gd
    return SplittingPair(epsilon * abs(math.sin(u) * math.sin(v)), epsilon * abs(math.cos(u) * math.cos(v)))


def fold(n: float) -> float:
    """Map an offset onto the fundamental domain [0, 0.5] of |sin|, |cos|."""
    r = n % 1.0
    return 1.0 - r if r > 0.5 else r


def _check_representable(pair: SplittingPair, epsilon: float, rtol: float):
    if epsilon <= 0:
        raise InfeasibleSplittingError("epsilon must be positive to invert", "epsilon>0", -epsilon)
    slack = rtol * epsilon
    checks = (
        ("df1>=0", -pair.df1),
        ("df2>=0", -pair.df2),
        ("|df2+df1|<=eps", abs(pair.df2 + pair.df1) - epsilon),
        ("|df2-df1|<=eps", abs(pair.df2 - pair.df1) - epsilon),
    )
    for name, excess in checks:
        if excess > slack:
            raise InfeasibleSplittingError(
                f"splitting ({pair.df1:.6g}, {pair.df2:.6g}) violates {name} for epsilon={epsilon:.6g} "
                f"(excess {excess:.3g})",
                name,
                excess,
            )


def invert_delta_fs(pair: SplittingPair, epsilon: float) -> list[tuple[float, float]]:
    """All (n_gSigma, n_gDelta) in [0, 0.5]^2 reproducing ``pair``.

    Uses cos(u - v) = (df2 + df1)/eps and cos(u + v) = (df2 - df1)/eps with
    u = pi n_gSigma, v = pi n_gDelta. The exchange image (v, u) is returned
    as a second solution unless it coincides with the first.
    """
    _check_representable(pair, epsilon, REPRESENTABILITY_RTOL)
    c_minus = min(1.0, max(-1.0, (pair.df2 + pair.df1) / epsilon))
    c_plus = min(1.0, max(-1.0, (pair.df2 - pair.df1) / epsilon))
    s = math.acos(c_plus)
    d = math.acos(c_minus)
    sols = [((s + d) / (2 * math.pi), (s - d) / (2 * math.pi))]
    if d > 0:
        sols.append(((s - d) / (2 * math.pi), (s + d) / (2 * math.pi)))
    return [(min(0.5, max(0.0, a)), min(0.5, max(0.0, b))) for a, b in sols]


def _analytic_shape(params: CircuitParams, m: int, n: int) -> float:
    EJ = params.E_J
    ecs = params.E_C * (1 + params.E_p / params.E_C / 2)
    ecd = params.E_C * (1 - params.E_p / params.E_C / 2)
    pref = EJ * 2 ** (2 * (m + n)) / (math.factorial(m) * math.factorial(n))
    power = (EJ / ecs) ** (m / 2) * (EJ / ecd) ** (n / 2)
    return pref * power * math.exp(-(math.sqrt(2 * EJ / ecs) + math.sqrt(2 * EJ / ecd)))


def analytic_epsilon(params: CircuitParams, m: int, n: int, A0: float = 1.0) -> float:
    """Closed-form dispersion of level (m, n), GHz, up to the fitted prefactor A0."""
    if params.ratio < 10:
        warnings.warn(f"E_J/E_C = {params.ratio:.3g} is below the transmon regime (10)", RegimeWarning,
                      stacklevel=2)
    return A0 * _analytic_shape(params, m, n)


@dataclass(frozen=True)
class A0Calibration:
    A0: float
    level: Label
    log_residual_std: float
    max_ratio: float
    ratios: tuple[float, ...]
    numerical: tuple[float, ...]

    def model(self, params: CircuitParams) -> float:
        return analytic_epsilon(params, *self.level, A0=self.A0)


def calibrate_A0(params_sweep: Sequence[CircuitParams], level: Label,
                 numerical: Sequence[float] | None = None, cutoff: int = 12) -> A0Calibration:
    """Least-squares fit of log(A0 * shape) to log(numerical epsilon).

    ``numerical`` may be supplied to skip the diagonalisations.
    """
    if len(params_sweep) < 10:
        raise ValueError(f"need at least 10 sweep points, got {len(params_sweep)}")
    level = tuple(level)
    if numerical is None:
        numerical = [dispersion_epsilon(p, level, cutoff=cutoff, check=False) for p in params_sweep]
    num = np.asarray(numerical, dtype=float)
    if num.shape != (len(params_sweep),) or np.any(num <= 0) or not np.all(np.isfinite(num)):
        raise ValueError("numerical dispersions must be finite, positive and match the sweep")
    shape = np.array([_analytic_shape(p, *level) for p in params_sweep])
    log_ratio = np.log(num) - np.log(shape)
    # closed-form minimiser of sum (log A0 - log_ratio)^2
    logA0 = float(np.mean(log_ratio))
    if not math.isfinite(logA0):
        raise RuntimeError("A0 fit diverged")
    resid = log_ratio - logA0
    return A0Calibration(
        A0=math.exp(logA0),
        level=level,
        log_residual_std=float(np.std(resid)),
        max_ratio=float(np.exp(np.max(np.abs(resid)))),
        ratios=tuple(p.ratio for p in params_sweep),
        numerical=tuple(float(x) for x in num),
    )


# --- tight-binding overlap integrals -------------------------------------

def _hermite_orbital(s2: float, k: int):
    """k-th oscillator eigenfunction with <phi^2>_0 = s2."""
    from scipy.special import eval_hermite

    norm = (2 * math.pi * s2) ** -0.25 / math.sqrt(2.0**k * math.factorial(k))

    def f(x):
        return norm * np.exp(-x * x / (4 * s2)) * eval_hermite(k, x / math.sqrt(2 * s2))

    return f


def _well_orbital(E_J: float, E_Ci: float, k: int, per_cell: int = 1000):
    """k-th bound state of 8 E_Ci n^2 - 2 E_J cos(phi/2) in a single well.

    The potential is held at its barrier value 2 E_J beyond |phi| = 2 pi, so
    the tails see the true cosine shape rather than a parabola. Returns the
    grid and samples; the grid step divides the lattice vector exactly.
    """
    h = LATTICE_VECTOR[0] / per_cell
    x = h * np.arange(-2 * per_cell, 2 * per_cell + 1)
    V = np.where(np.abs(x) <= 2 * math.pi, -2 * E_J * np.cos(x / 2), 2 * E_J)
    t = 8 * E_Ci / h**2
    _, v = linalg.eigh_tridiagonal(2 * t + V, -t * np.ones(x.size - 1), select="i", select_range=(0, k))
    psi = v[:, k] / math.sqrt(h)
    if psi[np.argmax(np.abs(psi))] < 0:
        psi = -psi
    return x, psi


def _overlaps_quad(u, a: float, rtol: float) -> list[float]:
    vals = []
    for integrand in (
        lambda x: u(x) * u(x - a),
        lambda x: u(x) ** 2 * np.sin(x / 4) ** 2,
        lambda x: u(x) * u(x - a) * np.sin(x / 4) ** 2,
    ):
        val, err = integrate.quad(integrand, 0.0, a, epsabs=0.0, epsrel=rtol * 1e-2, limit=200)
        if err > rtol * abs(val) and err > 1e-300:
            raise RuntimeError(f"overlap integral did not converge: {val:.3e} +- {err:.1e}")
        vals.append(val)
    return vals


def _overlaps_grid(x: np.ndarray, psi: np.ndarray, a: float) -> list[float]:
    shift = int(round(a / (x[1] - x[0])))
    i0 = int(np.searchsorted(x, -1e-12))
    sl = slice(i0, i0 + shift + 1)
    xs, u, u_shift = x[sl], psi[sl], psi[i0 - shift:i0 + 1]
    s2 = np.sin(xs / 4) ** 2
    return [float(integrate.simpson(f, x=xs)) for f in (u * u_shift, u * u * s2, u * u_shift * s2)]


def tb_coefficients(params: CircuitParams, level: Label = (0, 0), orbital: str = "harmonic",
                    rtol: float = 1e-8) -> TBCoefficients:
    """Overlap (alpha), on-site shift (beta) and bond (gamma) integrals.

    The site orbital is a product u(phi_S) u(phi_D) of local orbitals with
    excitation numbers given by ``level``. ``orbital='harmonic'`` uses
    oscillator eigenfunctions with the local-harmonic widths; ``'well'``
    solves each decoupled cosine well numerically. The separable integrands
    reduce each 2D integral over [0, 2 pi]^2 to a product of 1D integrals.
    """
    m, n = level
    a = LATTICE_VECTOR[0]
    EJ = params.E_J
    parts = []
    for E_Ci, k in ((params.E_C_sigma, m), (params.E_C_delta, n)):
        if orbital == "harmonic":
            parts.append(_overlaps_quad(_hermite_orbital(math.sqrt(8 * E_Ci / EJ), k), a, rtol))
        elif orbital == "well":
            parts.append(_overlaps_grid(*_well_orbital(EJ, E_Ci, k), a))
        else:
            raise ValueError(f"unknown orbital model {orbital!r}")
    (I_s, K_s, J_s), (I_d, K_d, J_d) = parts
    return TBCoefficients(
        alpha=4 * I_s * I_d,
        beta=-16 * EJ * K_s * K_d,
        gamma=-16 * EJ * J_s * J_d,
        orbital=orbital,
    )


def fit_energy_surface(n_gs: np.ndarray, n_gd: np.ndarray, energies: np.ndarray) -> tuple[DispersionModel, float]:
    """Linear least-squares fit of E = mean + (eps/2) cos cos; returns the model and max |residual|."""
    S, D = np.meshgrid(n_gs, n_gd, indexing="ij")
    basis = np.cos(np.pi * S) * np.cos(np.pi * D)
    A = np.column_stack([np.ones(basis.size), basis.ravel()])
    coef, *_ = np.linalg.lstsq(A, energies.ravel(), rcond=None)
    resid = energies.ravel() - A @ coef
    return DispersionModel(mean=float(coef[0]), epsilon=float(2 * abs(coef[1]))), float(np.max(np.abs(resid)))


def fit_epsilon_slope(ratios: Sequence[float], eps: Sequence[float]) -> float:
    """Slope of log(eps) against sqrt(E_J/E_C)."""
    x = np.sqrt(np.asarray(ratios, dtype=float))
    return float(np.polyfit(x, np.log(np.asarray(eps, dtype=float)), 1)[0])


def ratio_sweep(lo: float = 15.0, hi: float = 80.0, count: int = 14, E_C: float = 0.5,
                coupling: float = 0.4) -> list[CircuitParams]:
    """Symmetric devices over E_J/E_C in [lo, hi] at fixed E_C and E_p/E_C."""
    return [CircuitParams.from_ratio(r, E_C, coupling) for r in np.linspace(lo, hi, count)]


def canonical_offsets(n_gs: float, n_gd: float) -> tuple[float, float]:
    """Representative of the offsets that give identical splittings.

    Sign flips, exchange of the two coordinates and shifts by (1, 0),
    (0, 1) or (1/2, 1/2) leave the unordered pair of peak splittings
    unchanged. The returned
    image lies in the triangle 0 <= n_gDelta <= n_gSigma, n_gSigma +
    n_gDelta <= 1/2, which is the first solution of :func:`invert_delta_fs`.
    """
    s, d = fold(n_gs), fold(n_gd)
    if s + d > 0.5:
        s, d = 0.5 - d, 0.5 - s
    return (s, d) if s >= d else (d, s)


def image_distance(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Smallest Euclidean distance between offsets ``a`` and any splitting-equivalent image of ``b``."""
    best = math.inf
    for s, d in ((b[0], b[1]), (b[1], b[0])):
        for gs in (1, -1):
            for gd in (1, -1):
                vs, vd = a[0] - gs * s, a[1] - gd * d
                # equivalent shifts form the integer lattice in (vs + vd, vs - vd)
                u, w = vs + vd, vs - vd
                du, dw = u - round(u), w - round(w)
                best = min(best, math.sqrt(0.5 * (du * du + dw * dw)))
    return best
