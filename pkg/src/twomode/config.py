"""Run configuration: YAML with explicit units on every physical quantity."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import pint
import yaml

from .hamiltonian import DEVICE_A, DEVICE_B, CircuitParams
from .locator import GridSpec
from .noise import NoiseModel, OffsetStep, ScenarioScript, Waypoint, default_scenario
from .ramsey import MODES, ExperimentConfig

PRESETS = {"A": DEVICE_A, "B": DEVICE_B}
FIT_MODELS = ("four-peak", "one-peak", "auto")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        self.line = line
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


@lru_cache(maxsize=1)
def _units() -> pint.UnitRegistry:
    return pint.UnitRegistry()


class _Map(dict):
    """Mapping that remembers the source line of itself and of each key."""

    def __init__(self, items, line, key_lines):
        super().__init__(items)
        self.line = line
        self.key_lines = key_lines


class _List(list):
    def __init__(self, items, line):
        super().__init__(items)
        self.line = line


def _convert(node: yaml.Node, source: str):
    line = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        items, lines = {}, {}
        for k, v in node.value:
            key = k.value
            if key in items:
                raise ConfigError(f"duplicate key {key!r}", k.start_mark.line + 1, source)
            items[key] = _convert(v, source)
            lines[key] = k.start_mark.line + 1
        return _Map(items, line, lines)
    if isinstance(node, yaml.SequenceNode):
        return _List([_convert(v, source) for v in node.value], line)
    return _Scalar(node.value, node.tag, line)


@dataclass(frozen=True)
class _Scalar:
    text: str
    tag: str
    line: int

    @property
    def value(self):
        return self.text if self.tag == "tag:yaml.org,2002:str" else yaml.safe_load(self.text)


class _Reader:
    def __init__(self, source: str):
        self.source = source

    def error(self, msg, line=None):
        return ConfigError(msg, line, self.source)

    def section(self, parent: _Map, key: str) -> _Map:
        val = parent.get(key)
        if val is None:
            return _Map({}, parent.key_lines.get(key, parent.line), {})
        if not isinstance(val, _Map):
            raise self.error(f"section {key!r} must be a mapping", parent.key_lines[key])
        return val

    def done(self, m: _Map, allowed: set[str], name: str):
        extra = [k for k in m if k not in allowed]
        if extra:
            k = extra[0]
            raise self.error(f"unknown key {k!r} in {name}; allowed: {sorted(allowed)}", m.key_lines[k])

    def quantity(self, m: _Map, key: str, unit: str, default=None) -> float | None:
        if key not in m:
            return default
        node = m[key]
        line = m.key_lines[key]
        if not isinstance(node, _Scalar):
            raise self.error(f"{key!r} must be a quantity such as '1 {unit}'", line)
        if isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            raise self.error(f"{key!r} = {node.text} has no unit; write e.g. '{node.text} {unit}'", line)
        try:
            q = _units().Quantity(str(node.value))
            return float(q.to(unit).magnitude)
        except (pint.errors.PintError, ValueError, TypeError, AttributeError) as exc:
            raise self.error(f"{key!r} = {node.text!r} is not a quantity convertible to {unit} ({exc})", line)

    def number(self, m: _Map, key: str, default=None, integer=False):
        if key not in m:
            return default
        node, line = m[key], m.key_lines[key]
        val = node.value if isinstance(node, _Scalar) else None
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise self.error(f"{key!r} must be a plain number", line)
        if integer and int(val) != val:
            raise self.error(f"{key!r} must be an integer", line)
        return int(val) if integer else float(val)

    def text(self, m: _Map, key: str, default=None, choices=None):
        if key not in m:
            return default
        node, line = m[key], m.key_lines[key]
        if not isinstance(node, _Scalar):
            raise self.error(f"{key!r} must be a string", line)
        val = str(node.value)
        if choices is not None and val not in choices:
            raise self.error(f"{key!r} = {val!r}; choose from {list(choices)}", line)
        return val

    def flag(self, m: _Map, key: str, default=False) -> bool:
        if key not in m:
            return default
        val = m[key].value if isinstance(m[key], _Scalar) else None
        if not isinstance(val, bool):
            raise self.error(f"{key!r} must be true or false", m.key_lines[key])
        return val


@dataclass(frozen=True)
class RamseySpec:
    df1: float | None = 1.0            # MHz
    df2: float | None = 3.0
    n_g_sigma: float | None = None
    n_g_delta: float | None = None
    epsilon: float = 4.0               # MHz
    model: str = "four-peak"
    mode: str = "delta"
    null: bool = False                 # single unsplit tone


@dataclass(frozen=True)
class SweepSpec:
    ratio_min: float = 15.0
    ratio_max: float = 80.0
    count: int = 14
    E_C: float = 0.5                   # GHz
    coupling: float = 0.4
    levels: tuple[tuple[int, int], ...] = ((0, 0), (0, 1), (1, 0), (1, 1))


@dataclass(frozen=True)
class LocalizeSpec:
    x: float | None = 230.0            # um
    y: float | None = 80.0
    q: float = 1.0
    n_g_sigma: float | None = None
    n_g_delta: float | None = None
    sigma: float | None = None         # n_g; default 1 % of the map maximum


@dataclass(frozen=True)
class RunConfig:
    params: CircuitParams = DEVICE_A
    device: str = "A"
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    ramsey: RamseySpec = RamseySpec()
    noise: NoiseModel = NoiseModel()
    scenario: ScenarioScript = field(default_factory=default_scenario)
    map_file: Path | None = None
    grid: GridSpec = GridSpec()
    localize: LocalizeSpec = LocalizeSpec()
    sweep: SweepSpec = SweepSpec()
    output: Path = Path("results")
    seed: int = 0
    source: str = "<defaults>"

    def normalised(self) -> dict:
        """Semantic content in canonical units; output location excluded."""
        def clean(obj):
            if isinstance(obj, dict):
                return {k: clean(v) for k, v in obj.items()}
            if isinstance(obj, (list, tuple)):
                return [clean(v) for v in obj]
            if isinstance(obj, np.ndarray):
                return [float(v) for v in obj]
            if isinstance(obj, Path):
                return str(obj)
            if isinstance(obj, (np.floating, float)):
                return float(obj)
            return obj

        e = self.experiment
        sc = self.scenario
        return clean({
            "params": vars(self.params),
            "experiment": {"detuning_MHz": e.detuning, "shots": e.shots, "delays_us": e.delays,
                           "T2_us": e.T2, "acquisition_ms": e.acquisition_ms},
            "ramsey": vars(self.ramsey),
            "noise": vars(self.noise),
            "scenario": {"duration_min": sc.duration, "cadence_min": sc.cadence,
                         "waypoints": [vars(w) for w in sc.waypoints], "background": sc.background,
                         "steps": [vars(s) for s in sc.steps], "epsilon_MHz": sc.epsilon,
                         "high_fidelity": sc.high_fidelity, "params": vars(sc.params), "transition": sc.transition},
            "map": {"file": self.map_file, "grid": vars(self.grid)},
            "localize": vars(self.localize),
            "sweep": vars(self.sweep),
            "seed": self.seed,
        })

    def with_overrides(self, seed: int | None = None, output: str | Path | None = None,
                       map_file: str | Path | None = None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=int(seed), noise=replace(cfg.noise, seed=int(seed)))
        if output is not None:
            cfg = replace(cfg, output=Path(output))
        if map_file is not None:
            path = Path(map_file)
            if not path.exists():
                raise ConfigError(f"map file {path} does not exist", None, "--map")
            cfg = replace(cfg, map_file=path)
        return cfg

    @property
    def hash(self) -> str:
        blob = json.dumps(self.normalised(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _device(r: _Reader, m: _Map) -> tuple[CircuitParams, str]:
    r.done(m, {"preset", "E_J", "E_J1", "E_J2", "E_C", "E_p", "C", "C_m"}, "device")
    preset = r.text(m, "preset", None, choices=tuple(PRESETS))
    explicit = [k for k in m if k != "preset"]
    if preset and explicit:
        raise r.error("give either a device preset or explicit energies, not both", m.key_lines[explicit[0]])
    if not explicit:
        name = preset or "A"
        return PRESETS[name], name
    EJ = r.quantity(m, "E_J", "GHz")
    EJ1, EJ2 = r.quantity(m, "E_J1", "GHz", EJ), r.quantity(m, "E_J2", "GHz", EJ)
    if EJ1 is None or EJ2 is None:
        raise r.error("device needs E_J (or E_J1 and E_J2)", m.line)
    try:
        if "C" in m or "C_m" in m:
            if "E_C" in m or "E_p" in m:
                raise r.error("give charging energies or capacitances, not both", m.line)
            C, Cm = r.quantity(m, "C", "fF"), r.quantity(m, "C_m", "fF", 0.0)
            if C is None:
                raise r.error("capacitance C is required", m.line)
            return CircuitParams.from_capacitances(EJ1, EJ2, C, Cm), "custom"
        EC, Ep = r.quantity(m, "E_C", "GHz"), r.quantity(m, "E_p", "GHz", 0.0)
        if EC is None:
            raise r.error("device needs E_C", m.line)
        return CircuitParams(EJ1, EJ2, EC, Ep), "custom"
    except ConfigError:
        raise
    except ValueError as exc:
        raise r.error(f"invalid device: {exc}", m.line) from None


def _experiment(r: _Reader, m: _Map) -> ExperimentConfig:
    r.done(m, {"detuning", "shots", "delay_step", "delay_count", "T2", "acquisition"}, "experiment")
    d = ExperimentConfig()
    step = r.quantity(m, "delay_step", "us", 0.08)
    count = r.number(m, "delay_count", 1000, integer=True)
    kw = dict(detuning=r.quantity(m, "detuning", "MHz", d.detuning), shots=r.number(m, "shots", d.shots, integer=True),
              T2=r.quantity(m, "T2", "us", d.T2), acquisition_ms=r.quantity(m, "acquisition", "ms", d.acquisition_ms))
    try:
        return ExperimentConfig(delays=step * np.arange(count), **kw)
    except ValueError as exc:
        raise r.error(f"invalid experiment: {exc}", m.line) from None


def _ramsey(r: _Reader, m: _Map) -> RamseySpec:
    r.done(m, {"splitting", "offsets", "epsilon", "model", "mode", "null"}, "ramsey")
    base = RamseySpec()
    model = r.text(m, "model", base.model, FIT_MODELS)
    mode = r.text(m, "mode", base.mode, MODES)
    eps = r.quantity(m, "epsilon", "MHz", base.epsilon)
    null = r.flag(m, "null")
    if "splitting" in m and "offsets" in m:
        raise r.error("give either splitting or offsets", m.key_lines["offsets"])
    if "offsets" in m:
        o = r.section(m, "offsets")
        r.done(o, {"n_g_sigma", "n_g_delta"}, "ramsey.offsets")
        return RamseySpec(None, None, r.number(o, "n_g_sigma", 0.0), r.number(o, "n_g_delta", 0.0), eps, model,
                          mode, null)
    s = r.section(m, "splitting")
    r.done(s, {"df1", "df2"}, "ramsey.splitting")
    return RamseySpec(r.quantity(s, "df1", "MHz", base.df1), r.quantity(s, "df2", "MHz", base.df2), None, None,
                      eps, model, mode, null)


def _noise(r: _Reader, m: _Map, seed: int) -> NoiseModel:
    r.done(m, {"qp_rate", "drift_sigma", "drift_kind", "ou_band", "ou_per_decade"}, "noise")
    d = NoiseModel()
    band = d.ou_band
    if "ou_band" in m:
        b = m["ou_band"]
        if not isinstance(b, _List) or len(b) != 2:
            raise r.error("ou_band must be a list of two frequencies", m.key_lines["ou_band"])
        band = tuple(r.quantity(_Map({"ou_band": x}, x.line, {"ou_band": x.line}), "ou_band", "1/min") for x in b)
    try:
        return NoiseModel(qp_rate=r.quantity(m, "qp_rate", "1/us", d.qp_rate),
                          drift_sigma=r.quantity(m, "drift_sigma", "1/min**0.5", d.drift_sigma),
                          drift_kind=r.text(m, "drift_kind", d.drift_kind), ou_band=band,
                          ou_per_decade=r.number(m, "ou_per_decade", d.ou_per_decade, integer=True), seed=seed)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise r.error(f"invalid noise model: {exc}", m.line) from None


def _scenario(r: _Reader, m: _Map, params: CircuitParams) -> ScenarioScript:
    r.done(m, {"duration", "cadence", "waypoints", "background", "steps", "epsilon", "high_fidelity",
               "transition"}, "scenario")
    d = default_scenario()
    waypoints = d.waypoints
    if "waypoints" in m:
        nodes = m["waypoints"]
        if not isinstance(nodes, _List) or not nodes:
            raise r.error("waypoints must be a non-empty list", m.key_lines["waypoints"])
        waypoints = []
        for w in nodes:
            if not isinstance(w, _Map):
                raise r.error("each waypoint must be a mapping", w.line)
            r.done(w, {"time", "x", "y", "q", "n_g_sigma", "n_g_delta"}, "waypoint")
            try:
                waypoints.append(Waypoint(r.quantity(w, "time", "min", 0.0), r.quantity(w, "x", "um"),
                                          r.quantity(w, "y", "um"), r.number(w, "q", 1.0),
                                          r.number(w, "n_g_sigma"), r.number(w, "n_g_delta")))
            except ValueError as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise r.error(str(exc), w.line) from None
    steps = d.steps
    if "steps" in m:
        nodes = m["steps"]
        if not isinstance(nodes, _List):
            raise r.error("steps must be a list", m.key_lines["steps"])
        steps = []
        for s in nodes:
            if not isinstance(s, _Map):
                raise r.error("each step must be a mapping", s.line)
            r.done(s, {"time", "d_sigma", "d_delta"}, "step")
            steps.append(OffsetStep(r.quantity(s, "time", "min", 0.0), r.number(s, "d_sigma", 0.0),
                                    r.number(s, "d_delta", 0.0)))
    background = d.background
    if "background" in m:
        b = r.section(m, "background")
        r.done(b, {"n_g_sigma", "n_g_delta"}, "scenario.background")
        background = (r.number(b, "n_g_sigma", 0.0), r.number(b, "n_g_delta", 0.0))
    try:
        return ScenarioScript(duration=r.quantity(m, "duration", "min", d.duration),
                              cadence=r.quantity(m, "cadence", "min", d.cadence), waypoints=tuple(waypoints),
                              background=background, steps=tuple(steps),
                              epsilon=r.quantity(m, "epsilon", "MHz", d.epsilon),
                              high_fidelity=r.flag(m, "high_fidelity"), params=params,
                              transition=r.text(m, "transition", d.transition, ("delta", "sigma", "01-11")))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise r.error(f"invalid scenario: {exc}", m.line) from None


def _map(r: _Reader, root: _Map, base: Path) -> tuple[Path | None, GridSpec]:
    if "map" not in root:
        return None, GridSpec()
    node, line = root["map"], root.key_lines["map"]
    if isinstance(node, _Scalar):
        if node.value != "surrogate":
            raise r.error("map must be 'surrogate' or a mapping with 'file' or 'surrogate'", line)
        return None, GridSpec()
    if not isinstance(node, _Map) or len(node) != 1:
        raise r.error("map needs exactly one source: 'file' or 'surrogate'", line)
    r.done(node, {"file", "surrogate"}, "map")
    if "file" in node:
        path = Path(r.text(node, "file"))
        path = path if path.is_absolute() else base / path
        if not path.exists():
            raise r.error(f"map file {path} does not exist", node.key_lines["file"])
        return path, GridSpec()
    g = r.section(node, "surrogate")
    r.done(g, {"half_width", "step"}, "map.surrogate")
    try:
        grid = GridSpec(r.quantity(g, "half_width", "um", 1000.0), r.quantity(g, "step", "um", 5.0))
        grid.axis()
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise r.error(str(exc), g.line) from None
    return None, grid


def _localize(r: _Reader, m: _Map) -> LocalizeSpec:
    r.done(m, {"x", "y", "q", "n_g_sigma", "n_g_delta", "sigma"}, "localize")
    spatial = "x" in m or "y" in m
    direct = "n_g_sigma" in m or "n_g_delta" in m
    if spatial and direct:
        raise r.error("localize takes a position or offsets, not both", m.line)
    sigma = r.number(m, "sigma")
    if sigma is not None and sigma <= 0:
        raise r.error("sigma must be positive", m.key_lines["sigma"])
    if direct:
        return LocalizeSpec(None, None, r.number(m, "q", 1.0), r.number(m, "n_g_sigma", 0.0),
                            r.number(m, "n_g_delta", 0.0), sigma)
    d = LocalizeSpec()
    return LocalizeSpec(r.quantity(m, "x", "um", d.x), r.quantity(m, "y", "um", d.y), r.number(m, "q", 1.0),
                        None, None, sigma)


def _sweep(r: _Reader, m: _Map) -> SweepSpec:
    r.done(m, {"ratio_min", "ratio_max", "count", "E_C", "coupling", "levels"}, "sweep")
    d = SweepSpec()
    levels = d.levels
    if "levels" in m:
        nodes = m["levels"]
        try:
            levels = tuple((int(a.value), int(b.value)) for a, b in nodes)
        except (TypeError, ValueError, AttributeError):
            raise r.error("levels must be a list of [m, n] pairs", m.key_lines["levels"]) from None
    s = SweepSpec(r.number(m, "ratio_min", d.ratio_min), r.number(m, "ratio_max", d.ratio_max),
                  r.number(m, "count", d.count, integer=True), r.quantity(m, "E_C", "GHz", d.E_C),
                  r.number(m, "coupling", d.coupling), levels)
    if s.count < 1 or s.ratio_max < s.ratio_min or (s.count > 1 and s.ratio_max == s.ratio_min):
        raise r.error("sweep range is empty", m.line)
    return s


def parse_config(text: str, source: str = "<config>", base: Path | None = None) -> RunConfig:
    r = _Reader(source)
    try:
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}",
                          mark.line + 1 if mark else None, source) from None
    root = _convert(node, source) if node is not None else _Map({}, 1, {})
    if not isinstance(root, _Map):
        raise r.error("configuration must be a mapping", 1)
    r.done(root, {"device", "experiment", "ramsey", "noise", "scenario", "map", "localize", "sweep", "output",
                  "seed"}, "configuration")
    seed = r.number(root, "seed", 0, integer=True)
    params, name = _device(r, r.section(root, "device"))
    base = base or Path.cwd()
    map_file, grid = _map(r, root, base)
    out = r.text(root, "output", "results")
    return RunConfig(params=params, device=name, experiment=_experiment(r, r.section(root, "experiment")),
                     ramsey=_ramsey(r, r.section(root, "ramsey")), noise=_noise(r, r.section(root, "noise"), seed),
                     scenario=_scenario(r, r.section(root, "scenario"), params), map_file=map_file, grid=grid,
                     localize=_localize(r, r.section(root, "localize")), sweep=_sweep(r, r.section(root, "sweep")),
                     output=Path(out), seed=seed, source=source)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("file not found", None, str(path))
    return parse_config(path.read_text(), str(path), path.parent)
