"""Charge-basis model of the two-island, two-junction transmon.

Energies are in GHz (i.e. E/h), offsets in Cooper-pair units. Island 1 is the
slow index of the product charge basis, so a basis vector is |n1, n2> with flat
index ``(n1 + N) * (2N + 1) + (n2 + N)``.
"""
from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.constants as const
import scipy.linalg

Label = tuple[int, int]

DEFAULT_CUTOFF = 10
MIN_CUTOFF = 5

# e^2 / (1 fF) expressed in GHz * h
_E2_PER_FF_GHZ = const.e**2 / 1e-15 / const.h / 1e9

# overlap ties closer than this are broken by energy order
_TIE_TOL = 1e-6
# eigenvalues closer than this (GHz) are treated as one degenerate cluster
_DEGENERACY_TOL = 1e-9
_MAX_REF_EXCITATIONS = 5


class LabelingError(RuntimeError):
    """Raised when eigenstates cannot be given unique |mn> labels."""


class ModelViolationError(RuntimeError):
    """Raised when the offset-charge landscape contradicts the cos*cos extremal structure."""


class ModelViolationWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class CircuitParams:
    """Junction, charging and coupling energies of the two-mode circuit (GHz)."""

    E_J1: float
    E_J2: float
    E_C: float
    E_p: float

    def __post_init__(self):
        vals = (self.E_J1, self.E_J2, self.E_C, self.E_p)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite circuit parameters: {vals}")
        if self.E_J1 < 0 or self.E_J2 < 0:
            raise ValueError("Josephson energies must be non-negative")
        if self.E_C <= 0:
            raise ValueError("E_C must be positive")
        if not 0 <= self.E_p < 2 * self.E_C:
            raise ValueError(f"need 0 <= E_p < 2 E_C, got E_p={self.E_p}, E_C={self.E_C}")

    @classmethod
    def symmetric(cls, E_J: float, E_C: float, E_p: float) -> "CircuitParams":
        return cls(E_J, E_J, E_C, E_p)

    @classmethod
    def from_ratio(cls, ratio: float, E_C: float, coupling: float = 0.4) -> "CircuitParams":
        """Symmetric junctions at E_J/E_C = ``ratio`` and E_p = ``coupling`` * E_C."""
        return cls.symmetric(ratio * E_C, E_C, coupling * E_C)

    @classmethod
    def from_capacitances(cls, E_J1: float, E_J2: float, C: float, C_m: float) -> "CircuitParams":
        E_C, E_p = derive_energies(C, C_m)
        return cls(E_J1, E_J2, E_C, E_p)

    @property
    def E_J(self) -> float:
        """Mean Josephson energy."""
        return 0.5 * (self.E_J1 + self.E_J2)

    @property
    def E_C_sigma(self) -> float:
        return self.E_C + self.E_p / 2

    @property
    def E_C_delta(self) -> float:
        return self.E_C - self.E_p / 2

    @property
    def ratio(self) -> float:
        return self.E_J / self.E_C


# Device A: estimated from the measured spectrum. Device B: E_J/E_C = 70 at
# E_p = 0.4 E_C, scaled so the Delta mode sits near 4.6 GHz.
DEVICE_A = CircuitParams.symmetric(E_J=11.0, E_C=0.5, E_p=0.2)
DEVICE_B = CircuitParams.symmetric(E_J=70 * 0.226, E_C=0.226, E_p=0.4 * 0.226)


def derive_energies(C: float, C_m: float) -> tuple[float, float]:
    """Charging and coupling energy (GHz) from island capacitances in fF.

    ``C`` is the island shunt capacitance parameter and ``C_m`` the
    island-island coupling capacitance. Uses the effective shunt
    ``C* = C (C + 2 C_m) / (C + C_m)``.
    """
    if not (math.isfinite(C) and math.isfinite(C_m)):
        raise ValueError("capacitances must be finite")
    if C <= 0:
        raise ValueError(f"C must be positive, got {C}")
    if C_m < 0:
        raise ValueError(f"C_m must be non-negative, got {C_m}")
    c_star = C * (C + 2 * C_m) / (C + C_m)
    if C_m >= c_star:
        raise ValueError(
            f"C_m={C_m} fF >= C*={c_star:.6g} fF gives a non-positive difference-mode charging energy"
        )
    den = c_star**2 - C_m**2
    E_C = _E2_PER_FF_GHZ * c_star / (2 * den)
    E_p = _E2_PER_FF_GHZ * C_m / den
    return E_C, E_p


def coupling_capacitance(C: float, ratio: float) -> float:
    """Inverse of :func:`derive_energies` for the coupling ratio E_p/E_C.

    E_p/E_C = 2 C_m / C*, which is bounded by 2, so ratios >= 2 have no
    physical solution.
    """
    if not 0 <= ratio < 2:
        raise ValueError(f"E_p/E_C={ratio} is not realisable: need 0 <= E_p/E_C < 2")
    # 2x(1+x) = r(1+2x) with x = C_m / C
    b = 2 - 2 * ratio
    x = (-b + math.sqrt(b * b + 8 * ratio)) / 4
    return x * C


class Parity(enum.Enum):
    """Charge-parity branch; first letter is island 1, O adds 0.5 to that island."""

    EE = "EE"
    EO = "EO"
    OE = "OE"
    OO = "OO"

    @property
    def shift(self) -> tuple[float, float]:
        return (0.5 if self.value[0] == "O" else 0.0, 0.5 if self.value[1] == "O" else 0.0)


def to_sum_diff(n_g1: float, n_g2: float) -> tuple[float, float]:
    """Island offsets -> (n_gSigma, n_gDelta) = (n_g1 + n_g2, n_g1 - n_g2)."""
    return n_g1 + n_g2, n_g1 - n_g2


def from_sum_diff(n_gs: float, n_gd: float) -> tuple[float, float]:
    return 0.5 * (n_gs + n_gd), 0.5 * (n_gs - n_gd)


@dataclass(frozen=True)
class ChargeConfig:
    """Base island offsets plus a parity branch."""

    n_g1: float = 0.0
    n_g2: float = 0.0
    parity: Parity = Parity.EE

    def __post_init__(self):
        if not (math.isfinite(self.n_g1) and math.isfinite(self.n_g2)):
            raise ValueError("offset charges must be finite")
        if not isinstance(self.parity, Parity):
            object.__setattr__(self, "parity", Parity(self.parity))

    @classmethod
    def from_sum_diff(cls, n_gs: float, n_gd: float, parity: Parity = Parity.EE) -> "ChargeConfig":
        n1, n2 = from_sum_diff(n_gs, n_gd)
        return cls(n1, n2, parity)

    @property
    def n_g_sigma(self) -> float:
        return self.n_g1 + self.n_g2

    @property
    def n_g_delta(self) -> float:
        return self.n_g1 - self.n_g2

    @property
    def effective(self) -> tuple[float, float]:
        """Island offsets with the parity shift applied."""
        s1, s2 = self.parity.shift
        return self.n_g1 + s1, self.n_g2 + s2

    def with_parity(self, parity: Parity) -> "ChargeConfig":
        return replace(self, parity=parity)


@dataclass(frozen=True)
class LabeledSpectrum:
    labels: tuple[Label, ...]
    energies: np.ndarray
    cutoff: int
    offsets: ChargeConfig
    overlaps: np.ndarray = field(repr=False)
    # labels fixed by tie-breaking or inside a degenerate eigenvalue cluster
    ambiguous: frozenset = frozenset()
    vectors: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.labels)

    def energy(self, label: Label) -> float:
        try:
            return float(self.energies[self.labels.index(tuple(label))])
        except ValueError:
            raise LabelingError(f"level {label} not among the {len(self)} computed states") from None

    def transition(self, upper: Label, lower: Label = (0, 0)) -> float:
        return self.energy(upper) - self.energy(lower)

    def as_dict(self) -> dict[Label, float]:
        return {lab: float(e) for lab, e in zip(self.labels, self.energies)}


@dataclass(frozen=True)
class ModeParams:
    """Mode frequencies, anharmonicities (positive numbers) and cross-Kerr, all GHz.

    Anharmonicities are reported as positive magnitudes: eta = 2 E_1 - E_0 - E_2.
    """

    omega_sigma: float
    omega_delta: float
    eta_sigma: float
    eta_delta: float
    chi: float
    method: str = "numerical"

    def as_dict(self) -> dict[str, float]:
        return {
            "omega_sigma": self.omega_sigma,
            "omega_delta": self.omega_delta,
            "eta_sigma": self.eta_sigma,
            "eta_delta": self.eta_delta,
            "chi": self.chi,
        }


def _charge_ladder(cutoff: int) -> tuple[np.ndarray, np.ndarray]:
    n = np.arange(-cutoff, cutoff + 1, dtype=float)
    hop = np.eye(n.size, k=1) + np.eye(n.size, k=-1)
    return n, hop


def _check_cutoff(cutoff: int) -> int:
    if int(cutoff) != cutoff or cutoff < MIN_CUTOFF:
        raise ValueError(f"cutoff must be an integer >= {MIN_CUTOFF}, got {cutoff}")
    return int(cutoff)


def build_hamiltonian(params: CircuitParams, cfg: ChargeConfig = ChargeConfig(),
                      cutoff: int = DEFAULT_CUTOFF) -> np.ndarray:
    """Dense real-symmetric Hamiltonian of dimension (2*cutoff+1)**2."""
    cutoff = _check_cutoff(cutoff)
    ng1, ng2 = cfg.effective
    n, hop = _charge_ladder(cutoff)
    eye = np.eye(n.size)
    q1 = np.repeat(n - ng1, n.size)
    q2 = np.tile(n - ng2, n.size)
    diag = 4 * params.E_C * (q1**2 + q2**2) + 4 * params.E_p * q1 * q2
    H = -0.5 * params.E_J1 * np.kron(hop, eye) - 0.5 * params.E_J2 * np.kron(eye, hop)
    H[np.diag_indices_from(H)] = diag
    return H


def _transmon_1d(E_J: float, E_C: float, n_g: float, cutoff: int, count: int):
    """Sign-fixed eigenpairs of 4 E_C (n - n_g)^2 - E_J cos(phi).

    Signs are chosen so that <k|n|k-1> > 0, which makes the ladder behave like
    real harmonic-oscillator Fock states up to a common phase per step.
    """
    n, hop = _charge_ladder(cutoff)
    H = np.diag(4 * E_C * (n - n_g) ** 2) - 0.5 * E_J * hop
    w, v = scipy.linalg.eigh(H, subset_by_index=[0, count - 1])
    if v[np.argmax(np.abs(v[:, 0])), 0] < 0:
        v[:, 0] *= -1
    for k in range(1, count):
        elem = v[:, k] @ (n * v[:, k - 1])
        if abs(elem) < 1e-12:
            elem = v[np.argmax(np.abs(v[:, k])), k]
        if elem < 0:
            v[:, k] *= -1
    return w, v


def _mode_coefficients(m: int, n: int) -> dict[tuple[int, int], float]:
    """Island Fock amplitudes of |m_Sigma, n_Delta> with a_S = (a1+a2)/sqrt2, a_D = (a1-a2)/sqrt2."""
    poly = {(0, 0): 1.0}
    for sign, count in ((1, m), (-1, n)):
        for _ in range(count):
            nxt: dict[tuple[int, int], float] = {}
            for (a, b), c in poly.items():
                nxt[(a + 1, b)] = nxt.get((a + 1, b), 0.0) + c
                nxt[(a, b + 1)] = nxt.get((a, b + 1), 0.0) + sign * c
            poly = nxt
    norm = math.sqrt(2.0 ** (m + n) * math.factorial(m) * math.factorial(n))
    return {
        (a, b): c * math.sqrt(math.factorial(a) * math.factorial(b)) / norm
        for (a, b), c in poly.items()
        if c != 0
    }


def _canonical_labels(max_exc: int) -> list[Label]:
    # Delta (lower mode) first within each manifold
    return [(m, tot - m) for tot in range(max_exc + 1) for m in range(tot + 1)]


def _reference_states(params: CircuitParams, cfg: ChargeConfig, cutoff: int,
                      max_exc: int = _MAX_REF_EXCITATIONS):
    ng1, ng2 = cfg.effective
    nlev = max_exc + 1
    _, v1 = _transmon_1d(params.E_J1, params.E_C, ng1, cutoff, nlev)
    _, v2 = _transmon_1d(params.E_J2, params.E_C, ng2, cutoff, nlev)
    labels = _canonical_labels(max_exc)
    refs = np.zeros((v1.shape[0] ** 2, len(labels)))
    for j, (m, n) in enumerate(labels):
        for (a, b), c in _mode_coefficients(m, n).items():
            refs[:, j] += c * np.kron(v1[:, a], v2[:, b])
    return labels, refs


def _clusters(w: np.ndarray, tol: float) -> list[list[int]]:
    groups = [[0]]
    for i in range(1, len(w)):
        if w[i] - w[i - 1] < tol * max(1.0, abs(w[i])):
            groups[-1].append(i)
        else:
            groups.append([i])
    return groups


def solve_spectrum(params: CircuitParams, cfg: ChargeConfig = ChargeConfig(), cutoff: int = DEFAULT_CUTOFF,
                   k: int = 6, keep_vectors: bool = False) -> LabeledSpectrum:
    """Lowest ``k`` eigenenergies with |mn> labels (m Sigma, n Delta excitations).

    Labels come from maximal overlap with product states of the uncoupled
    (E_p = 0) single-island transmons, rotated into sum/difference modes. The
    uncoupled states are evaluated at the same offsets as the Hamiltonian.
    Inside a degenerate eigenvalue cluster the eigenbasis is first rotated
    onto the reference states; overlap ties go to the lower-energy state in
    canonical label order.
    """
    cutoff = _check_cutoff(cutoff)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > 9:
        warnings.warn("labeling is only validated for k <= 9", stacklevel=2)
    H = build_hamiltonian(params, cfg, cutoff)
    n_extra = min(k + 4, H.shape[0])
    w, v = scipy.linalg.eigh(H, subset_by_index=[0, n_extra - 1])
    labels_all, refs = _reference_states(params, cfg, cutoff)

    ambiguous: set[Label] = set()
    degenerate_idx: set[int] = set()
    for group in _clusters(w, _DEGENERACY_TOL):
        if len(group) < 2:
            continue
        vc = v[:, group]
        proj = vc.T @ refs
        best = np.argsort(-np.linalg.norm(proj, axis=0), kind="stable")[: len(group)]
        u, _, vh = np.linalg.svd(proj[:, best], full_matrices=False)
        v[:, group] = vc @ (u @ vh)
        degenerate_idx.update(group)

    overlaps = (v[:, :k].T @ refs) ** 2
    claimed: dict[Label, int] = {}
    assigned: list[Label] = []
    for i in range(k):
        row = overlaps[i]
        top = row.max()
        tied = [j for j in range(len(labels_all)) if row[j] >= top - _TIE_TOL]
        free = [j for j in tied if labels_all[j] not in claimed]
        if not free:
            lab = labels_all[tied[0]]
            raise LabelingError(
                f"state {i} (E={w[i]:.9g} GHz) claims label {lab} already held by state {claimed[lab]}"
            )
        lab = labels_all[free[0]]
        claimed[lab] = i
        assigned.append(lab)
        if len(tied) > 1 or i in degenerate_idx:
            ambiguous.add(lab)

    return LabeledSpectrum(
        labels=tuple(assigned),
        energies=w[:k].copy(),
        cutoff=cutoff,
        offsets=cfg,
        overlaps=overlaps,
        ambiguous=frozenset(ambiguous),
        vectors=v[:, :k].copy() if keep_vectors else None,
    )


_MODE_LABELS = ((0, 0), (0, 1), (1, 0), (0, 2), (2, 0), (1, 1))


def mode_parameters(params: CircuitParams, method: str = "numerical", cfg: ChargeConfig = ChargeConfig(),
                    cutoff: int = DEFAULT_CUTOFF) -> ModeParams:
    """Mode frequencies, anharmonicities and cross-Kerr shift.

    ``numerical`` takes energy differences of the labeled spectrum;
    ``perturbative`` uses the fourth-order expansion of the cos*cos potential
    with harmonic sum/difference modes, and chi = 4 sqrt(eta_S eta_D).
    """
    if method == "perturbative":
        return _perturbative_modes(params)
    if method != "numerical":
        raise ValueError(f"unknown method {method!r}")
    spec = solve_spectrum(params, cfg, cutoff, k=9)
    bad = [lab for lab in _MODE_LABELS if lab in spec.ambiguous]
    if bad:
        raise LabelingError(
            f"Sigma/Delta labels {bad} are degenerate or tied (E_p={params.E_p}); mode parameters undefined"
        )
    E = {lab: spec.energy(lab) for lab in _MODE_LABELS}
    return ModeParams(
        omega_sigma=E[1, 0] - E[0, 0],
        omega_delta=E[0, 1] - E[0, 0],
        eta_sigma=2 * E[1, 0] - E[0, 0] - E[2, 0],
        eta_delta=2 * E[0, 1] - E[0, 0] - E[0, 2],
        chi=E[0, 1] + E[1, 0] - E[0, 0] - E[1, 1],
        method="numerical",
    )


def _perturbative_modes(params: CircuitParams) -> ModeParams:
    EJ, ecs, ecd = params.E_J, params.E_C_sigma, params.E_C_delta
    # Normal-ordered quartic terms: self-Kerr E_Ci/2, cross term sqrt(ecs*ecd)
    # which also shifts each frequency by half of itself.
    cross = math.sqrt(ecs * ecd)
    eta_s, eta_d = ecs / 2, ecd / 2
    return ModeParams(
        omega_sigma=math.sqrt(8 * EJ * ecs) - eta_s - cross / 2,
        omega_delta=math.sqrt(8 * EJ * ecd) - eta_d - cross / 2,
        eta_sigma=eta_s,
        eta_delta=eta_d,
        chi=4 * math.sqrt(eta_s * eta_d),
        method="perturbative",
    )


TRANSITIONS: Mapping[str, tuple[Label, Label]] = {
    "sigma": ((1, 0), (0, 0)),
    "delta": ((0, 1), (0, 0)),
    "01-11": ((1, 1), (0, 1)),
}


def transition_labels(transition: str) -> tuple[Label, Label]:
    try:
        return TRANSITIONS[transition]
    except KeyError:
        raise ValueError(f"unknown transition {transition!r}; choose from {sorted(TRANSITIONS)}") from None


def parity_branch_frequencies(params: CircuitParams, base_cfg: ChargeConfig, transition: str = "delta",
                              cutoff: int = DEFAULT_CUTOFF) -> dict[Parity, float]:
    """Transition frequency (GHz) in each of the four parity branches of ``base_cfg``."""
    upper, lower = transition_labels(transition)
    k = 5 if upper == (1, 1) else 3
    out = {}
    for p in Parity:
        spec = solve_spectrum(params, base_cfg.with_parity(p), cutoff, k=k)
        out[p] = spec.transition(upper, lower)
    return out


_CORNERS = ((0.0, 0.0), (0.5, 0.5))


def dispersions(params: CircuitParams, levels: Iterable[Label], *, cutoff: int = DEFAULT_CUTOFF,
                kind: str = "level", check: bool = True, grid_step: float = 0.25) -> dict[Label, float]:
    """Peak-to-peak offset-charge dispersion (GHz) of each level.

    Extremes are taken at island offsets (0, 0) and (0.5, 0.5), i.e.
    (n_gSigma, n_gDelta) = (0, 0) and (1, 0). With ``check`` a coarse grid
    over the unit cell confirms these are the extremes to 1 %; a violation
    raises :class:`ModelViolationError` for E_J/E_C < 10 and warns otherwise.
    ``kind='transition'`` measures E_mn - E_00 instead of E_mn.
    """
    if kind not in ("level", "transition"):
        raise ValueError(f"kind must be 'level' or 'transition', got {kind!r}")
    levels = [tuple(lab) for lab in levels]
    kmax = max(3, max((m + n) * (m + n + 1) // 2 + m + n + 1 for m, n in levels))

    def energies_at(ng1, ng2):
        spec = solve_spectrum(params, ChargeConfig(ng1, ng2), cutoff, k=kmax)
        ref = spec.energy((0, 0)) if kind == "transition" else 0.0
        return {lab: spec.energy(lab) - ref for lab in levels}

    corners = [energies_at(*c) for c in _CORNERS]
    eps = {lab: abs(corners[0][lab] - corners[1][lab]) for lab in levels}
    if check:
        pts = np.arange(0.0, 1.0, grid_step)
        grid = [energies_at(a, b) for a in pts for b in pts]
        for lab in levels:
            vals = [g[lab] for g in grid]
            spread = max(vals) - min(vals)
            if spread > 1.01 * eps[lab] + 1e-15:
                msg = (f"level {lab}: grid spread {spread:.6g} GHz exceeds corner dispersion "
                       f"{eps[lab]:.6g} GHz; extremes are not at (0,0)/(1,0)")
                if params.ratio < 10:
                    raise ModelViolationError(msg)
                warnings.warn(msg, ModelViolationWarning, stacklevel=2)
    return eps


def dispersion_epsilon(params: CircuitParams, level: Label, *, cutoff: int = DEFAULT_CUTOFF,
                       kind: str = "level", check: bool = True) -> float:
    """Peak-to-peak charge dispersion epsilon_mn of one level, GHz."""
    return dispersions(params, [level], cutoff=cutoff, kind=kind, check=check)[tuple(level)]


def energy_surface(params: CircuitParams, level: Label, n_gs: Sequence[float], n_gd: Sequence[float],
                   cutoff: int = DEFAULT_CUTOFF) -> np.ndarray:
    """E_mn on a (n_gSigma, n_gDelta) grid, shape (len(n_gs), len(n_gd))."""
    k = max(3, sum(level) * (sum(level) + 1) // 2 + sum(level) + 1)
    out = np.empty((len(n_gs), len(n_gd)))
    for i, s in enumerate(n_gs):
        for j, d in enumerate(n_gd):
            spec = solve_spectrum(params, ChargeConfig.from_sum_diff(s, d), cutoff, k=k)
            out[i, j] = spec.energy(level)
    return out
