"""Flat key=value configuration.

Grammar: one ``key = value`` per line, ``#`` starts a comment, blank
lines ignored.  Keys are dotted lowercase words; the full set with
defaults lives in `SCHEMA` and is documented in the README.  Values are
converted eagerly so a typo fails at load time with the offending key
named, which the CLI turns into a usage error.
"""

from __future__ import annotations

from dataclasses import dataclass

from .fom import FluidProps, Schedule, edge_drive, quarter_five_spot
from .geo import build_grid, build_sampler


class UsageError(Exception):
    """Bad invocation: unknown key, malformed value, missing input."""


def _lattice(text):
    """Parse probe coordinates of the form ``x,y;x,y;...``."""
    points = []
    for pair in text.split(";"):
        x, _, y = pair.partition(",")
        points.append((float(x), float(y)))
    return tuple(points)


# key -> (converter, default as written in a config file)
SCHEMA = {
    "case": (int, "1"),
    "paths.workdir": (str, "work"),
    "grid.nx": (int, "64"),
    "grid.ny": (int, "64"),
    "grid.porosity": (float, "0.2"),
    "fluid.mu_w": (float, "1.0"),
    "fluid.mu_o": (float, "1.5"),
    "fluid.s_wc": (float, "0.2"),
    "fluid.s_or": (float, "0.2"),
    "wells.rate": (float, "0.05"),
    "field.sigma": (float, "1.0"),
    "field.corr_len": (float, "0.1"),
    "field.seed": (int, "2026"),
    "cluster.count": (int, "45"),
    "cluster.seed": (int, "7"),
    "schedule.dt_pvi": (float, "0.015"),
    "schedule.steps": (int, "160"),
    "schedule.pressure_every": (int, "8"),
    "basis.rank_s": (int, "10"),
    "basis.rank_p": (int, "5"),
    "basis.deim_m": (int, "35"),
    "basis.store_rank": (int, "64"),
    "train.layers": (int, "6"),
    "train.lr": (float, "0.001"),
    "train.decay": (float, "0.9"),
    "train.epochs": (int, "5000"),
    "train.patience": (int, "200"),
    "train.seed": (int, "13"),
    "mc.count": (int, "2000"),
    "mc.base_seed": (int, "100000"),
    "report.pvi": (str, "auto"),        # auto: 0.3 for case 1, 0.4 for case 2
    "monitor.points": (str, "auto"),    # auto: case-dependent probe set
}

_AUTO_PVI = {1: 0.3, 2: 0.4}
_AUTO_POINTS = {
    1: "0.2,0.2;0.35,0.35;0.5,0.5;0.65,0.65;0.8,0.8",
    2: "0.1,0.5;0.3,0.5;0.5,0.5;0.7,0.5;0.9,0.5",
}


@dataclass(frozen=True)
class Config:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @property
    def case(self):
        return self.values["case"]

    def report_pvi(self):
        raw = self.values["report.pvi"]
        return _AUTO_PVI[self.case] if raw == "auto" else float(raw)

    def monitor_points(self):
        raw = self.values["monitor.points"]
        return _lattice(_AUTO_POINTS[self.case] if raw == "auto" else raw)


def _convert(key, raw):
    if key not in SCHEMA:
        raise UsageError(f"unknown config key: {key}")
    conv, _ = SCHEMA[key]
    try:
        return conv(raw)
    except ValueError as err:
        raise UsageError(f"bad value for {key}: {raw!r} ({err})") from err


def parse_config_file(path):
    """Read raw key/value strings, validating grammar only."""
    entries = {}
    try:
        lines = open(path).readlines()
    except OSError as err:
        raise UsageError(f"cannot read config {path}: {err}") from err
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    return entries


def load_config(path=None, overrides=()):
    """Defaults, then the file, then ``key=value`` override strings."""
    raw = {key: default for key, (_, default) in SCHEMA.items()}
    if path is not None:
        raw.update(parse_config_file(path))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"override must look like key=value: {item!r}")
        raw[key.strip()] = value.strip()
    values = {key: _convert(key, text) for key, text in raw.items()}
    cfg = Config(values=values)
    if cfg.case not in (1, 2):
        raise UsageError(f"case must be 1 or 2, got {cfg.case}")
    return cfg


# factories gluing a Config to the domain objects


def make_grid(cfg):
    return build_grid(cfg["grid.nx"], cfg["grid.ny"], cfg["grid.porosity"])


def make_props(cfg):
    return FluidProps(mu_w=cfg["fluid.mu_w"], mu_o=cfg["fluid.mu_o"],
                      s_wc=cfg["fluid.s_wc"], s_or=cfg["fluid.s_or"])


def make_src(cfg, grid):
    if cfg.case == 1:
        return quarter_five_spot(grid, cfg["wells.rate"])
    return edge_drive(grid, cfg["wells.rate"])


def make_schedule(cfg):
    return Schedule(dt_pvi=cfg["schedule.dt_pvi"],
                    n_steps=cfg["schedule.steps"],
                    pressure_every=cfg["schedule.pressure_every"])


def make_sampler(cfg, grid):
    return build_sampler(grid, sigma=cfg["field.sigma"],
                         corr_len=cfg["field.corr_len"],
                         seed=cfg["field.seed"])


def monitor_cells(cfg, grid):
    """Probe cell indices with their configured coordinates."""
    points = cfg.monitor_points()
    cells = tuple(grid.cell_at(x, y) for x, y in points)
    if len(set(cells)) != len(cells):
        raise UsageError("monitor points collapse onto a shared cell; "
                         "spread them or refine the grid")
    return cells, points
