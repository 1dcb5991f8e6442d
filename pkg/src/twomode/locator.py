"""Induced-offset sensitivity maps and two-constraint charge localization.

Positions are in micrometres. Island 1 occupies x > 0 and island 2 is its
mirror image, so the sum response is even in x and the difference response
odd. The built-in surrogate replaces a field solver with a short-range
kernel; any gridded map in the text format below can be loaded instead.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import interpolate, optimize
from skimage import measure

SIGMA_LEVELS = {"1sigma": 2.30, "2sigma": 6.18}
MAX_LOCALIZATION_STEP = 10.0  # um


class MapFormatError(ValueError):
    pass


class MapSymmetryWarning(UserWarning):
    pass


@dataclass(frozen=True)
class DeviceGeometry:
    inner_radius: float = 125.0
    gap: float = 120.0
    outer_inner_radius: float = 389.5
    outer_outer_radius: float = 489.5

    def __post_init__(self):
        vals = (self.inner_radius, self.gap, self.outer_inner_radius, self.outer_outer_radius)
        if not all(v > 0 and math.isfinite(v) for v in vals):
            raise ValueError("geometry lengths must be positive")
        if self.gap >= 2 * self.inner_radius:
            raise ValueError("gap must be narrower than the inner disc")
        if not self.inner_radius < self.outer_inner_radius < self.outer_outer_radius:
            raise ValueError("outer annulus must enclose the inner islands")

    def describe(self) -> str:
        return (f"inner_radius={self.inner_radius!r} gap={self.gap!r} "
                f"outer_inner_radius={self.outer_inner_radius!r} outer_outer_radius={self.outer_outer_radius!r}")

    @classmethod
    def parse(cls, text: str) -> "DeviceGeometry":
        try:
            kv = dict(item.split("=", 1) for item in text.split())
            return cls(**{k: float(v) for k, v in kv.items()})
        except (TypeError, ValueError) as exc:
            raise MapFormatError(f"bad geometry block {text!r}: {exc}") from None


DEVICE_A_GEOMETRY = DeviceGeometry()


@dataclass(frozen=True)
class GridSpec:
    """Grid symmetric about both axes: nodes at -half_width..half_width in ``step``."""

    half_width: float = 1000.0
    step: float = 5.0

    def axis(self) -> np.ndarray:
        n = int(round(self.half_width / self.step))
        if n < 1 or not math.isclose(n * self.step, self.half_width, rel_tol=1e-9):
            raise ValueError("half_width must be a positive multiple of step")
        # same node formula as load_map, so saved grids reload bit-identically
        step = float(self.step)
        return -n * step + step * np.arange(2 * n + 1)


@dataclass(frozen=True)
class SensitivityMap:
    """Induced (n_gSigma, n_gDelta) per elementary charge; arrays indexed [iy, ix]."""

    x: np.ndarray
    y: np.ndarray
    s_sigma: np.ndarray
    s_delta: np.ndarray
    geometry: DeviceGeometry
    provenance: str = "surrogate"
    _interp: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        shape = (self.y.size, self.x.size)
        if self.s_sigma.shape != shape or self.s_delta.shape != shape:
            raise ValueError(f"map arrays must have shape {shape}")
        for axis in (self.x, self.y):
            d = np.diff(axis)
            if axis.size < 2 or np.any(d <= 0) or not np.allclose(d, d[0], rtol=1e-9):
                raise ValueError("map axes must be uniform and increasing")
        interp = tuple(
            interpolate.RegularGridInterpolator((self.y, self.x), a, method="linear", bounds_error=True)
            for a in (self.s_sigma, self.s_delta)
        )
        object.__setattr__(self, "_interp", interp)

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def dy(self) -> float:
        return float(self.y[1] - self.y[0])

    @property
    def max_abs(self) -> float:
        return float(max(np.abs(self.s_sigma).max(), np.abs(self.s_delta).max()))

    def contains_point(self, x: float, y: float) -> bool:
        return self.x[0] <= x <= self.x[-1] and self.y[0] <= y <= self.y[-1]

    def values(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        pts = np.column_stack([np.ravel(y), np.ravel(x)])
        return self._interp[0](pts), self._interp[1](pts)

    def mirrored(self) -> "SensitivityMap":
        """Map of the device reflected through x = 0 (requires an x-symmetric grid)."""
        if not np.allclose(self.x, -self.x[::-1], atol=1e-9 * max(1.0, abs(self.x[0]))):
            raise ValueError("mirroring needs a grid symmetric about x = 0")
        return SensitivityMap(self.x, self.y, self.s_sigma[:, ::-1].copy(), -self.s_delta[:, ::-1],
                              self.geometry, self.provenance)

    def symmetry_error(self) -> tuple[float, float]:
        """Max deviation of s_sigma from mirror-even and s_delta from mirror-odd."""
        return (float(np.max(np.abs(self.s_sigma - self.s_sigma[:, ::-1]))),
                float(np.max(np.abs(self.s_delta + self.s_delta[:, ::-1]))))


# --- surrogate ------------------------------------------------------------

def _dist_to_island(x: np.ndarray, y: np.ndarray, R: float, gap: float) -> np.ndarray:
    """Distance to the region {x >= gap/2, x^2 + y^2 <= R^2}."""
    g = gap / 2
    h = math.sqrt(R * R - g * g)
    r = np.hypot(x, y)
    inside = (x >= g) & (r <= R)
    # flat edge segment x = g, |y| <= h
    d_seg = np.hypot(x - g, np.clip(np.abs(y) - h, 0, None))
    # arc, valid where the radial projection lands on the island side
    on_arc = np.abs(np.arctan2(y, x)) <= math.acos(g / R)
    d_arc = np.where(on_arc, np.abs(r - R), np.inf)
    return np.where(inside, 0.0, np.minimum(d_seg, d_arc))


def _kernel(d: np.ndarray, length: float) -> np.ndarray:
    return length**2 / (length**2 + d**2)


def surrogate_map(geometry: DeviceGeometry = DEVICE_A_GEOMETRY, grid: GridSpec = GridSpec(),
                  length: float = 20.0, ground: float = 0.2) -> SensitivityMap:
    """Analytic stand-in for a field-solver map.

    Each conductor's share of a unit surface charge is proportional to a
    regularised inverse-square kernel L^2 / (L^2 + d^2) of the distance d to
    that conductor. The outer island and the surrounding ground plane act as
    one sink occupying r >= outer_inner_radius, and ``ground`` is a constant
    share for the back plane. The island-1 share f1 is evaluated once and
    island 2 uses its exact mirror. Offsets count Cooper pairs:
    s_Sigma = (f1 + f2)/2, s_Delta = (f1 - f2)/2.
    """
    ax = grid.axis()
    X, Y = np.meshgrid(ax, ax)
    k1 = _kernel(_dist_to_island(X, Y, geometry.inner_radius, geometry.gap), length)
    k2 = k1[:, ::-1]
    d_sink = np.clip(geometry.outer_inner_radius - np.hypot(X, Y), 0, None)
    total = k1 + k2 + _kernel(d_sink, length) + ground
    f1 = k1 / total
    f2 = f1[:, ::-1]
    return SensitivityMap(ax.copy(), ax.copy(), 0.5 * (f1 + f2), 0.5 * (f1 - f2), geometry, "surrogate")


# --- file format ----------------------------------------------------------

def save_map(smap: SensitivityMap, path: str | Path):
    header = [
        f"# nx: {smap.x.size}",
        f"# ny: {smap.y.size}",
        f"# x0: {float(smap.x[0])!r}",
        f"# y0: {float(smap.y[0])!r}",
        f"# dx: {float(smap.dx)!r}",
        f"# dy: {float(smap.dy)!r}",
        f"# geometry: {smap.geometry.describe()}",
        f"# provenance: {smap.provenance}",
        "# columns: s_sigma s_delta (x fastest)",
    ]
    body = np.column_stack([smap.s_sigma.ravel(), smap.s_delta.ravel()])
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        np.savetxt(fh, body, fmt="%.17g")


def load_map(path: str | Path) -> SensitivityMap:
    meta = {}
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                if ":" in s:
                    key, val = s[1:].split(":", 1)
                    meta[key.strip()] = val.strip()
                continue
            parts = s.split()
            if len(parts) != 2:
                raise MapFormatError(f"{path}:{lineno}: expected 2 values, got {len(parts)}")
            try:
                rows.append((float(parts[0]), float(parts[1])))
            except ValueError:
                raise MapFormatError(f"{path}:{lineno}: non-numeric value") from None
    try:
        nx, ny = int(meta["nx"]), int(meta["ny"])
        x0, y0, dx, dy = (float(meta[k]) for k in ("x0", "y0", "dx", "dy"))
    except (KeyError, ValueError) as exc:
        raise MapFormatError(f"{path}: malformed header ({exc})") from None
    if dx <= 0 or dy <= 0 or nx < 2 or ny < 2:
        raise MapFormatError(f"{path}: grid must have positive spacing and at least 2x2 nodes")
    if len(rows) != nx * ny:
        raise MapFormatError(f"{path}: expected {nx * ny} rows, found {len(rows)}")
    data = np.array(rows)
    bad = np.flatnonzero(~np.all(np.isfinite(data), axis=1))
    if bad.size:
        iy, ix = divmod(int(bad[0]), nx)
        raise MapFormatError(f"{path}: non-finite value at cell ix={ix}, iy={iy} (row {bad[0]})")
    geometry = DeviceGeometry.parse(meta["geometry"]) if "geometry" in meta else DEVICE_A_GEOMETRY
    smap = SensitivityMap(x0 + dx * np.arange(nx), y0 + dy * np.arange(ny), data[:, 0].reshape(ny, nx),
                          data[:, 1].reshape(ny, nx), geometry, meta.get("provenance", "loaded"))
    if np.allclose(smap.x, -smap.x[::-1], atol=1e-9 * max(1.0, abs(x0))):
        es, ed = smap.symmetry_error()
        tol = 1e-6 * max(smap.max_abs, 1e-300)
        if es > tol or ed > tol:
            warnings.warn(f"{path}: mirror symmetry violated (sigma {es:.3g}, delta {ed:.3g})", MapSymmetryWarning,
                          stacklevel=2)
    else:
        warnings.warn(f"{path}: grid not symmetric about x = 0; mirror symmetry not checked", MapSymmetryWarning,
                      stacklevel=2)
    return smap


# --- forward and inverse --------------------------------------------------

def induced_offsets(smap: SensitivityMap, x: float, y: float, q: float = 1.0) -> tuple[float, float]:
    """Offsets (n_gSigma, n_gDelta) induced by charge ``q`` (elementary charges) at (x, y)."""
    if not smap.contains_point(x, y):
        raise ValueError(f"position ({x}, {y}) um outside the map")
    s, d = smap.values(x, y)
    return float(q * s[0]), float(q * d[0])


@dataclass(frozen=True)
class LocalizationRegion:
    found: bool
    best: tuple[float, float]
    min_chi2: float
    contours: dict[str, list[np.ndarray]] = field(repr=False)
    areas: dict[str, float]
    quadrant: tuple[int, int] | None
    target: tuple[float, float, float, float] = field(repr=False)
    smap: SensitivityMap = field(repr=False)
    q: float = 1.0

    def chi2(self, x, y) -> np.ndarray:
        ns, nd, ss, sd = self.target
        s, d = self.smap.values(x, y)
        return ((self.q * s - ns) / ss) ** 2 + ((self.q * d - nd) / sd) ** 2

    def contains(self, x: float, y: float, level: str = "1sigma", any_quadrant: bool = False) -> bool:
        """Is (x, y) inside the region? ``any_quadrant`` also accepts mirror images in y."""
        if not self.found:
            return False
        pts = [(x, y), (x, -y)] if any_quadrant else [(x, y)]
        for px, py in pts:
            if self.quadrant is not None and not any_quadrant and not self._in_quadrant(px, py):
                continue
            if self.smap.contains_point(px, py) and self.chi2(px, py)[0] - self.min_chi2 <= SIGMA_LEVELS[level]:
                return True
        return False

    def _in_quadrant(self, x, y) -> bool:
        sx, sy = self.quadrant
        return x * sx >= -1e-9 and y * sy >= -1e-9


def _quadrant_mask(smap: SensitivityMap, n_gd: float):
    sx = 1 if n_gd >= 0 else -1
    X, Y = np.meshgrid(smap.x, smap.y)
    return (X * sx >= 0) & (Y >= 0), (sx, 1)


def biangulate(n_gs: float, n_gd: float, sigma_s: float, sigma_d: float, smap: SensitivityMap,
               q: float = 1.0, quadrant: bool = True) -> LocalizationRegion:
    """Chi-square localization of a point charge from its two induced offsets.

    Confidence regions are the level sets chi2 - min <= 2.30 (1 sigma) and
    6.18 (2 sigma) for two parameters. With ``quadrant`` the search is
    restricted to y >= 0 and to the island side given by the sign of
    n_gDelta; the map's fourfold symmetry makes the other images equivalent.
    """
    if sigma_s <= 0 or sigma_d <= 0:
        raise ValueError("uncertainties must be positive")
    if max(smap.dx, smap.dy) > MAX_LOCALIZATION_STEP:
        raise ValueError(f"map spacing above {MAX_LOCALIZATION_STEP} um is too coarse for localization")
    chi2 = ((q * smap.s_sigma - n_gs) / sigma_s) ** 2 + ((q * smap.s_delta - n_gd) / sigma_d) ** 2
    quad = None
    if quadrant:
        mask, quad = _quadrant_mask(smap, n_gd)
        chi2 = np.where(mask, chi2, np.inf)
    iy, ix = np.unravel_index(np.argmin(chi2), chi2.shape)
    target = (n_gs, n_gd, sigma_s, sigma_d)
    region = LocalizationRegion(True, (float(smap.x[ix]), float(smap.y[iy])), float(chi2[iy, ix]), {}, {},
                                quad, target, smap, q)

    # continuous refinement on the interpolated field around the best node
    lo = (max(smap.x[0], smap.x[ix] - smap.dx), max(smap.y[0], smap.y[iy] - smap.dy))
    hi = (min(smap.x[-1], smap.x[ix] + smap.dx), min(smap.y[-1], smap.y[iy] + smap.dy))
    if quad is not None:
        lo = (max(lo[0], 0.0) if quad[0] > 0 else lo[0], max(lo[1], 0.0))
        hi = (min(hi[0], 0.0) if quad[0] < 0 else hi[0], hi[1])
    res = optimize.minimize(lambda p: float(region.chi2(p[0], p[1])[0]), x0=region.best,
                            bounds=list(zip(lo, hi)), method="L-BFGS-B")
    best, min_chi2 = region.best, region.min_chi2
    if res.success and res.fun < min_chi2:
        best, min_chi2 = (float(res.x[0]), float(res.x[1])), float(res.fun)

    found = min_chi2 <= SIGMA_LEVELS["2sigma"]
    delta = chi2 - min_chi2
    contours, areas = {}, {}
    finite = np.where(np.isfinite(delta), delta, 1e6)
    for name, level in SIGMA_LEVELS.items():
        areas[name] = float(np.count_nonzero(delta <= level) * smap.dx * smap.dy) if found else 0.0
        lines = measure.find_contours(finite, level) if found else []
        contours[name] = [np.column_stack([smap.x[0] + c[:, 1] * smap.dx, smap.y[0] + c[:, 0] * smap.dy])
                          for c in lines]
    return LocalizationRegion(found, best, min_chi2, contours, areas, quad, target, smap, q)
