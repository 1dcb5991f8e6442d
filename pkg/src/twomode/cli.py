"""Command-line entry points; each verb writes one result bundle."""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from typing import Sequence

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .hamiltonian import ChargeConfig, CircuitParams, LabelingError, ModelViolationError
from .hamiltonian import dispersions, mode_parameters, solve_spectrum
from .locator import biangulate, induced_offsets, load_map, surrogate_map
from .noise import end_to_end_eval, localize_series, run_scenario
from .ramsey import (
    AliasingError,
    FitError,
    PARAM_NAMES,
    branch_offsets,
    fit_peaks,
    spectrum,
    synthesize_trace,
    track_series,
)
from .results import ResultBundle, Table, provenance, rows_from
from .tight_binding import InfeasibleSplittingError, SplittingPair, calibrate_A0, delta_fs, ratio_sweep

DEVICE_A_RATIO = 22.0
_UNITS = {"center": "MHz", "df1": "MHz", "df2": "MHz", "width": "MHz", "amplitude": "1", "phase": "rad",
          "baseline": "1"}


def _bundle(command: str, cfg: RunConfig) -> ResultBundle:
    return ResultBundle(command, cfg.hash, provenance=provenance(cfg.seed, cfg.source))


def _map(cfg: RunConfig):
    return load_map(cfg.map_file) if cfg.map_file is not None else surrogate_map(grid=cfg.grid)


def cmd_spectrum(cfg: RunConfig) -> ResultBundle:
    spec = solve_spectrum(cfg.params, ChargeConfig(), k=9)
    b = _bundle("spectrum", cfg)
    b.tables["levels"] = Table(("m [1]", "n [1]", "energy [GHz]", "ambiguous [bool]"),
                               [(m, n, e - spec.energies[0], (m, n) in spec.ambiguous)
                                for (m, n), e in zip(spec.labels, spec.energies)])
    num = mode_parameters(cfg.params, "numerical").as_dict()
    pert = mode_parameters(cfg.params, "perturbative").as_dict()
    b.tables["modes"] = Table(("parameter [name]", "numerical [GHz]", "perturbative [GHz]"),
                              [(k, num[k], pert[k]) for k in num])
    b.metrics = {"device": cfg.device, "params": vars(cfg.params), "numerical": num, "perturbative": pert}
    return b


def _sweep_ratios(cfg: RunConfig) -> np.ndarray:
    s = cfg.sweep
    ratios = np.linspace(s.ratio_min, s.ratio_max, s.count)
    if s.count > 1 and s.ratio_min <= DEVICE_A_RATIO <= s.ratio_max:
        ratios = np.union1d(ratios, [DEVICE_A_RATIO])
    return ratios


def cmd_dispersion_sweep(cfg: RunConfig) -> ResultBundle:
    s = cfg.sweep
    ratios = _sweep_ratios(cfg)
    params = [CircuitParams.from_ratio(r, s.E_C, s.coupling) for r in ratios]
    num = [dispersions(p, s.levels, check=False) for p in params]
    # too few points to calibrate on: calibrate on the default sweep instead
    cal_params = params if len(params) >= 10 else ratio_sweep(E_C=s.E_C, coupling=s.coupling)
    cal_num = num if len(params) >= 10 else None
    cals = {}
    for lev in s.levels:
        cals[lev] = calibrate_A0(cal_params, lev, None if cal_num is None else [n[lev] for n in cal_num])
    rows = []
    for r, p, n in zip(ratios, params, num):
        for lev in s.levels:
            rows.append((r, p.E_J1, lev[0], lev[1], 1e3 * n[lev], 1e3 * cals[lev].model(p),
                         bool(np.isclose(r, DEVICE_A_RATIO))))
    b = _bundle("dispersion-sweep", cfg)
    b.tables["sweep"] = Table(("ratio [1]", "E_J [GHz]", "m [1]", "n [1]", "epsilon_numerical [MHz]",
                               "epsilon_analytic [MHz]", "device_a_marker [bool]"), rows)
    b.tables["calibration"] = Table(("m [1]", "n [1]", "A0 [1]", "log_residual_std [1]", "max_ratio [1]"),
                                    [(lev[0], lev[1], c.A0, c.log_residual_std, c.max_ratio)
                                     for lev, c in cals.items()])
    monotone = {f"{m}{n}": bool(np.all(np.diff([x[(m, n)] for x in num]) < 0)) for m, n in s.levels}
    b.metrics = {"points": len(ratios), "monotone_decreasing": monotone,
                 "A0": {f"{m}{n}": c.A0 for (m, n), c in cals.items()}}
    return b


def cmd_ramsey(cfg: RunConfig) -> ResultBundle:
    rs = cfg.ramsey
    if rs.null:
        freqs, truth = [0.0], {"df1": 0.0, "df2": 0.0}
    else:
        pair = delta_fs(rs.n_g_sigma, rs.n_g_delta, rs.epsilon) if rs.df1 is None else None
        df1, df2 = (min(pair.df1, pair.df2), max(pair.df1, pair.df2)) if pair else (rs.df1, rs.df2)
        if df1 > df2:
            raise ValueError(f"ramsey splitting needs df1 <= df2, got {df1} > {df2} MHz")
        freqs = branch_offsets(SplittingPair(df1, df2))
        truth = {"df1": df1, "df2": df2}
    trace = synthesize_trace(freqs, cfg.experiment, seed=cfg.seed, mode=rs.mode)
    sp = spectrum(trace)
    fit = fit_peaks(sp, rs.model)
    b = _bundle("ramsey", cfg)
    b.tables["trace"] = Table(("delay [us]", "probability [1]"), rows_from([trace.delays, trace.probabilities]))
    b.tables["spectrum"] = Table(("frequency [MHz]", "magnitude [arb]"), rows_from([sp.freqs, sp.magnitude]))
    b.tables["fit"] = Table(("parameter [name]", "value [native]", "sigma [native]", "unit [name]"),
                            [(k, getattr(fit, k), fit.sigma(k), _UNITS[k]) for k in PARAM_NAMES])
    b.metrics = {"model": fit.model, "resolved": fit.resolved, "df1": fit.df1, "df2": fit.df2,
                 "resolution_MHz": fit.resolution, "p_value": fit.p_value, "truth": truth, "mode": rs.mode}
    return b


def _trajectory(points, truth) -> Table:
    return Table(("time [min]", "df1 [MHz]", "df2 [MHz]", "sigma_df1 [MHz]", "sigma_df2 [MHz]", "n_g_sigma [1]",
                  "n_g_delta [1]", "sigma_n_g_sigma [1]", "sigma_n_g_delta [1]", "true_n_g_sigma [1]",
                  "true_n_g_delta [1]", "jump [bool]", "error [text]"),
                 [(p.time, p.df1, p.df2, p.sigma_df1, p.sigma_df2, p.n_g_sigma, p.n_g_delta, p.sigma_n_g_sigma,
                   p.sigma_n_g_delta, s, d, p.jump, p.error)
                  for p, s, d in zip(points, truth.n_g_sigma, truth.n_g_delta)])


def _simulate_and_track(cfg: RunConfig):
    sc = cfg.scenario
    smap = _map(cfg) if sc.spatial else None
    traces, truth = run_scenario(sc, cfg.noise, cfg.experiment, smap, mode=cfg.ramsey.mode)
    points = track_series(traces, sc.epsilon, truth.times)
    return smap, truth, points


def cmd_track(cfg: RunConfig) -> ResultBundle:
    _, truth, points = _simulate_and_track(cfg)
    b = _bundle("track", cfg)
    b.tables["trajectory"] = _trajectory(points, truth)
    m = end_to_end_eval(points, truth)
    b.metrics = {"rms_ng": m.rms_ng, "n_points": m.n_points, "n_failed": m.n_failed, "flagged": list(m.flagged),
                 "true_jumps": list(truth.jump_indices), "jump_precision": m.jump_precision,
                 "jump_recall": m.jump_recall}
    return b


def cmd_localize(cfg: RunConfig) -> ResultBundle:
    smap = _map(cfg)
    loc = cfg.localize
    truth = None
    if loc.x is not None:
        truth = (loc.x, loc.y)
        ns, nd = induced_offsets(smap, loc.x, loc.y, loc.q)
    else:
        ns, nd = loc.n_g_sigma, loc.n_g_delta
    sigma = loc.sigma if loc.sigma is not None else 0.01 * smap.max_abs
    region = biangulate(ns, nd, sigma, sigma, smap, q=loc.q)
    rows = []
    for level, segs in sorted(region.contours.items()):
        for k, seg in enumerate(segs):
            rows.extend((level, k, x, y) for x, y in seg)
    b = _bundle("localize", cfg)
    b.tables["contours"] = Table(("level [name]", "segment [1]", "x [um]", "y [um]"), rows)
    summary = [("n_g_sigma", ns, "1"), ("n_g_delta", nd, "1"), ("sigma", sigma, "1"), ("found", region.found, "bool"),
               ("best_x", region.best[0], "um"), ("best_y", region.best[1], "um"),
               ("min_chi2", region.min_chi2, "1"), ("area_1sigma", region.areas["1sigma"], "um^2"),
               ("area_2sigma", region.areas["2sigma"], "um^2")]
    b.tables["summary"] = Table(("quantity [name]", "value [native]", "unit [name]"), summary)
    b.metrics = {"found": region.found, "best": list(region.best), "min_chi2": region.min_chi2,
                 "areas": region.areas, "map": smap.provenance}
    if truth is not None:
        b.metrics["contains_truth"] = region.contains(*truth)
    return b


def cmd_end2end(cfg: RunConfig) -> ResultBundle:
    if not cfg.scenario.spatial:
        raise ValueError("end2end needs a spatial charge path (waypoints with x and y)")
    smap, truth, points = _simulate_and_track(cfg)
    regions = localize_series(points, smap, cfg.scenario.background)
    m = end_to_end_eval(points, truth, regions)
    b = _bundle("end2end", cfg)
    b.tables["trajectory"] = _trajectory(points, truth)
    rows = []
    for p, r, (x, y, _) in zip(points, regions, truth.positions):
        if r is None:
            rows.append((p.time, False, np.nan, np.nan, 0.0, 0.0, x, y, False))
        else:
            rows.append((p.time, r.found, r.best[0], r.best[1], r.areas["1sigma"], r.areas["2sigma"], x, y,
                         r.contains(x, y, any_quadrant=True)))
    b.tables["localization"] = Table(("time [min]", "found [bool]", "best_x [um]", "best_y [um]",
                                      "area_1sigma [um^2]", "area_2sigma [um^2]", "true_x [um]", "true_y [um]",
                                      "hit [bool]"), rows)
    b.metrics = m.as_dict() | {"true_jumps": list(truth.jump_indices),
                               "acceptance": {"rms_ng_below_0.05": m.rms_ng < 0.05,
                                              "one_jump_flagged": len(m.flagged) == 1 and m.jump_recall == 1.0,
                                              "hit_rate_at_least_0.8": m.hit_rate >= 0.8}}
    return b


COMMANDS = {
    "spectrum": cmd_spectrum,
    "dispersion-sweep": cmd_dispersion_sweep,
    "ramsey": cmd_ramsey,
    "track": cmd_track,
    "localize": cmd_localize,
    "end2end": cmd_end2end,
}

# module errors reported with command context and a nonzero exit status
_HARD_ERRORS = (LabelingError, ModelViolationError, FitError, AliasingError, InfeasibleSplittingError, ValueError,
                RuntimeError, OSError)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="twomode", description="Two-mode transmon charge-sensing experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="YAML run configuration")
        s.add_argument("--seed", type=int, help="override the configured seed")
        s.add_argument("--out", help="output directory (default: configured output)")
        s.add_argument("--map", help="sensitivity map file, replaces the configured map source")
        s.add_argument("--mode", choices=("delta", "sigma", "01-11"), help="probed transition")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = cfg.with_overrides(args.seed, args.out, args.map)
        if args.mode:
            cfg = replace(cfg, ramsey=replace(cfg.ramsey, mode=args.mode),
                          scenario=replace(cfg.scenario, transition=args.mode))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        bundle = COMMANDS[args.command](cfg)
    except _HARD_ERRORS as exc:
        print(f"{args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    out = bundle.write(cfg.output)
    print(f"{args.command}: wrote {out} (config {bundle.config_hash[:12]})")
    return 0
