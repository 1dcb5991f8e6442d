"""Result bundles: unit-annotated CSV tables, metrics and provenance."""
from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Sequence

import numpy as np

# "name [unit]"; dimensionless columns use [1]
_HEADER = re.compile(r"^[A-Za-z_][A-Za-z0-9_]* \[[^\]]+\]$")

# published column schemas per command and table
SCHEMAS: dict[str, dict[str, tuple[str, ...]]] = {
    "spectrum": {
        "levels": ("m [1]", "n [1]", "energy [GHz]", "ambiguous [bool]"),
        "modes": ("parameter [name]", "numerical [GHz]", "perturbative [GHz]"),
    },
    "dispersion-sweep": {
        "sweep": ("ratio [1]", "E_J [GHz]", "m [1]", "n [1]", "epsilon_numerical [MHz]",
                  "epsilon_analytic [MHz]", "device_a_marker [bool]"),
        "calibration": ("m [1]", "n [1]", "A0 [1]", "log_residual_std [1]", "max_ratio [1]"),
    },
    "ramsey": {
        "trace": ("delay [us]", "probability [1]"),
        "spectrum": ("frequency [MHz]", "magnitude [arb]"),
        "fit": ("parameter [name]", "value [native]", "sigma [native]", "unit [name]"),
    },
    "track": {
        "trajectory": ("time [min]", "df1 [MHz]", "df2 [MHz]", "sigma_df1 [MHz]", "sigma_df2 [MHz]",
                       "n_g_sigma [1]", "n_g_delta [1]", "sigma_n_g_sigma [1]", "sigma_n_g_delta [1]",
                       "true_n_g_sigma [1]", "true_n_g_delta [1]", "jump [bool]", "error [text]"),
    },
    "localize": {
        "contours": ("level [name]", "segment [1]", "x [um]", "y [um]"),
        "summary": ("quantity [name]", "value [native]", "unit [name]"),
    },
    "end2end": {
        "trajectory": ("time [min]", "df1 [MHz]", "df2 [MHz]", "sigma_df1 [MHz]", "sigma_df2 [MHz]",
                       "n_g_sigma [1]", "n_g_delta [1]", "sigma_n_g_sigma [1]", "sigma_n_g_delta [1]",
                       "true_n_g_sigma [1]", "true_n_g_delta [1]", "jump [bool]", "error [text]"),
        "localization": ("time [min]", "found [bool]", "best_x [um]", "best_y [um]", "area_1sigma [um^2]",
                         "area_2sigma [um^2]", "true_x [um]", "true_y [um]", "hit [bool]"),
    },
}


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else format(v, ".12g")
    return str(v)


@dataclass(frozen=True)
class Table:
    columns: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)

    def __post_init__(self):
        bad = [c for c in self.columns if not _HEADER.match(c)]
        if bad:
            raise ValueError(f"column headers need a unit annotation 'name [unit]': {bad}")
        for r in self.rows:
            if len(r) != len(self.columns):
                raise ValueError(f"row {r} does not match {len(self.columns)} columns")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(v) for v in r])
        return buf.getvalue()

    def column(self, name: str) -> list:
        i = [c.split(" [")[0] for c in self.columns].index(name)
        return [r[i] for r in self.rows]


def read_table(path: str | Path) -> Table:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return Table(tuple(rows[0]), [tuple(r) for r in rows[1:]])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return None if not math.isfinite(float(obj)) else float(obj)
    return obj


def provenance(seed: int, source: str) -> dict:
    versions = {}
    for pkg in ("artifact", "numpy", "scipy"):
        try:
            versions[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            versions[pkg] = "unknown"
    return {"seed": seed, "config_source": source, "versions": versions}


@dataclass
class ResultBundle:
    command: str
    config_hash: str
    tables: dict[str, Table] = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def validate(self):
        schema = SCHEMAS.get(self.command)
        if schema is None:
            raise ValueError(f"no schema for command {self.command!r}")
        for name, table in self.tables.items():
            if name not in schema:
                raise ValueError(f"{self.command}: unexpected table {name!r}")
            if table.columns != schema[name]:
                raise ValueError(f"{self.command}/{name}: columns {table.columns} differ from schema {schema[name]}")

    def write(self, out: str | Path) -> Path:
        """Write tables, metrics and manifest; no timestamps so reruns are byte-identical."""
        self.validate()
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        for name, table in sorted(self.tables.items()):
            (out / f"{name}.csv").write_text(table.to_csv())
        dump = lambda obj: json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"  # noqa: E731
        (out / "metrics.json").write_text(dump(self.metrics))
        manifest = {"command": self.command, "config_hash": self.config_hash, "provenance": self.provenance,
                    "tables": {k: list(v.columns) for k, v in sorted(self.tables.items())}}
        (out / "bundle.json").write_text(dump(manifest))
        return out


def rows_from(columns: Sequence[Sequence]) -> list[tuple]:
    return list(zip(*columns))
