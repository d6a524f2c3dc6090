"""Command-line driver: ``gsde <subcommand> --config PATH [--set section.key=value ...]``.

Configuration is INI text.  Sections and keys (defaults in parentheses)::

    [experiment]  T (1.0), grid_n (256), x_step (1e-2), paths (10), seed (0),
                  controls (constant_lo, constant_hi, piecewise, bang_bang_random),
                  control_seed (0)
    [band]        sigma_lo (0.5), sigma_hi (1.0)
    [system]      b, h, sigma ("0"), x0 (0.0), lipschitz_K (1.0), bound_M (1.0)
    [right]       same keys as [system]; used by ``compare``
    [converge]    factors (1, 4, 16)
    [mollify]     n_list (10, 20, 40), ref_factor (16), quad_nodes (32)
    [compare]     box (1.0, 3.0, 3.0), density (11), method (doss), tol, tol_c, probe (true)
    [flow-check]  t (0.0), x_range (-2, 2), v_range (-2, 2), points (21), fd_step (1e-5)

Exit codes: 0 success, 1 validation error, 2 numerical failure, 3 comparison
violated although its hypotheses were certified.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import flow
from .coeff_expr import CoefficientSet
from .compare import ComparisonSpec, verify_pathwise, write_report
from .doss import solve_doss
from .errors import GSDEError, NumericalError, ValidationError
from .euler import solve_euler
from .flow import FlowField, flow_terms
from .g_driver import (
    CONTROL_KINDS,
    VolatilityBand,
    concat_paths,
    make_control,
    path_seeds,
    refine_driver,
    simulate_driver,
    uniform_grid,
    write_driver_csv,
)
from .mollify import convergence_study, write_study_csv

SUBCOMMANDS = ("simulate", "represent", "converge", "mollify", "compare", "flow-check")

DEFAULTS = {
    "experiment": {
        "T": "1.0", "grid_n": "256", "x_step": "1e-2", "paths": "10", "seed": "0",
        "controls": ", ".join(CONTROL_KINDS), "control_seed": "0",
    },
    "band": {"sigma_lo": "0.5", "sigma_hi": "1.0"},
    "system": {"b": "0", "h": "0", "sigma": "0", "x0": "0.0", "lipschitz_K": "1.0", "bound_M": "1.0"},
    "right": {"b": "0", "h": "0", "sigma": "0", "x0": "0.0", "lipschitz_K": "1.0", "bound_M": "1.0"},
    "converge": {"factors": "1, 4, 16"},
    "mollify": {"n_list": "10, 20, 40", "ref_factor": "16", "quad_nodes": "32"},
    "compare": {"box": "1.0, 3.0, 3.0", "density": "11", "method": "doss", "tol": "", "tol_c": "",
                "probe": "true"},
    "flow-check": {"t": "0.0", "x_range": "-2, 2", "v_range": "-2, 2", "points": "21",
                   "fd_step": "1e-5"},
}


class Config:
    """Validated view of the INI file plus overrides; every error names its key."""

    def __init__(self, parser: configparser.ConfigParser):
        self.parser = parser

    @classmethod
    def load(cls, path, overrides=()):
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"config file not found: {path}")
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp.read_dict(DEFAULTS)
        try:
            cp.read_string(path.read_text(), source=str(path))
        except configparser.Error as err:
            raise ValidationError(f"cannot parse config {path}: {err}") from err
        for item in overrides:
            key, sep, value = item.partition("=")
            section, dot, name = key.strip().rpartition(".")
            if not sep or not dot or not section or not name:
                raise ValidationError(f"override {item!r} is not of the form section.key=value")
            if not cp.has_section(section):
                cp.add_section(section)
            cp.set(section, name, value.strip())
        for section in cp.sections():
            for key in cp[section]:
                if section not in DEFAULTS or key not in DEFAULTS[section]:
                    raise ValidationError(f"unknown config key {section}.{key}")
        return cls(cp)

    def canonical(self) -> str:
        lines = []
        for section in sorted(self.parser.sections()):
            for key in sorted(self.parser[section]):
                lines.append(f"{section}.{key}={self.raw(section, key)}")
        return "\n".join(lines) + "\n"

    def raw(self, section, key):
        value = self.parser[section][key].strip()
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        return value

    def float(self, section, key):
        try:
            return float(self.raw(section, key))
        except ValueError:
            raise ValidationError(f"{section}.{key}: expected a number, got {self.raw(section, key)!r}")

    def optional_float(self, section, key):
        return None if self.raw(section, key) == "" else self.float(section, key)

    def int(self, section, key):
        try:
            return int(self.raw(section, key))
        except ValueError:
            raise ValidationError(f"{section}.{key}: expected an integer, got {self.raw(section, key)!r}")

    def bool(self, section, key):
        try:
            return self.parser.getboolean(section, key)
        except ValueError:
            raise ValidationError(f"{section}.{key}: expected true/false")

    def list(self, section, key, kind=str):
        items = [s.strip() for s in self.raw(section, key).split(",") if s.strip()]
        try:
            return [kind(s) for s in items]
        except ValueError:
            raise ValidationError(f"{section}.{key}: cannot read {self.raw(section, key)!r}")

    def system(self, section):
        try:
            return CoefficientSet.from_strings(
                b=self.raw(section, "b"), h=self.raw(section, "h"), sigma=self.raw(section, "sigma"),
                lipschitz_K=self.float(section, "lipschitz_K"), bound_M=self.float(section, "bound_M"),
            )
        except ValidationError as err:
            raise ValidationError(f"[{section}] {err}") from err


@dataclass(frozen=True)
class Experiment:
    T: float
    grid_n: int
    x_step: float
    paths: int
    seed: int
    kinds: list
    control_seed: int
    band: VolatilityBand


def _experiment(cfg: Config, seed_override) -> Experiment:
    T = cfg.float("experiment", "T")
    grid_n = cfg.int("experiment", "grid_n")
    paths = cfg.int("experiment", "paths")
    x_step = cfg.float("experiment", "x_step")
    if not T > 0:
        raise ValidationError("experiment.T must be positive")
    if grid_n < 2:
        raise ValidationError("experiment.grid_n must be at least 2")
    if paths < 1:
        raise ValidationError("experiment.paths must be at least 1")
    if not x_step > 0:
        raise ValidationError("experiment.x_step must be positive")
    kinds = cfg.list("experiment", "controls")
    for k in kinds:
        if k not in CONTROL_KINDS:
            raise ValidationError(f"experiment.controls: unknown control kind {k!r}")
    if not kinds:
        raise ValidationError("experiment.controls is empty")
    try:
        band = VolatilityBand(cfg.float("band", "sigma_lo"), cfg.float("band", "sigma_hi"))
    except ValidationError as err:
        raise ValidationError(f"[band] {err}") from err
    seed = seed_override if seed_override is not None else cfg.int("experiment", "seed")
    return Experiment(T, grid_n, x_step, paths, seed, kinds, cfg.int("experiment", "control_seed"), band)


def _drivers(ex: Experiment):
    """``paths`` drivers for each configured control kind."""
    grid = uniform_grid(ex.T, ex.grid_n)
    out = []
    for kind in ex.kinds:
        control = make_control(kind, ex.band, grid, seed=ex.control_seed)
        out.extend(simulate_driver(control, s) for s in path_seeds(ex.seed, control.control_id, ex.paths))
    return concat_paths(out)


def _open(out_dir: Path, name):
    return open(out_dir / name, "w", newline="", encoding="utf-8")


def _cmd_simulate(cfg, ex, out, header):
    with _open(out, "drivers.csv") as fh:
        write_driver_csv(_drivers(ex), fh, header)
    return 0


def _max_errors(cs, ff, drivers, x0):
    xd = solve_doss(cs, ff, drivers, x0).x_vals
    xe = solve_euler(cs, drivers, x0).x_vals
    return np.abs(xd - xe).max(axis=1)


def _cmd_represent(cfg, ex, out, header):
    cs = cfg.system("system")
    x0 = cfg.float("system", "x0")
    drivers = _drivers(ex)
    err = _max_errors(cs, FlowField(cs, ex.x_step), drivers, x0)
    with _open(out, "represent.csv") as fh:
        fh.write(f"# {header}\n")
        fh.write("control_id,seed,max_abs_err\n")
        for cid, s, e in zip(drivers.control_ids, drivers.seeds, err):
            fh.write(f"{cid},{s},{float(e)!r}\n")
    print(f"represent: {drivers.n_paths} paths, max error {float(err.max())!r}")
    return 0


def _cmd_converge(cfg, ex, out, header):
    cs = cfg.system("system")
    x0 = cfg.float("system", "x0")
    factors = cfg.list("converge", "factors", int)
    if not factors or any(f < 1 for f in factors) or factors != sorted(set(factors)):
        raise ValidationError("converge.factors must be increasing positive integers")
    ff = FlowField(cs, ex.x_step)
    drivers = _drivers(ex)
    with _open(out, "converge.csv") as fh:
        fh.write(f"# {header}\n")
        fh.write("grid_n,dt,max_sup_err,mean_sup_err,ratio\n")
        prev = None
        for f in factors:
            d = drivers if f == 1 else refine_driver(drivers, f)
            err = _max_errors(cs, ff, d, x0)
            mx = float(err.max())
            ratio = prev / mx if prev is not None and mx > 0 else float("nan")
            fh.write(f"{ex.grid_n * f},{ex.T / (ex.grid_n * f)!r},{mx!r},{float(err.mean())!r},{ratio!r}\n")
            prev = mx
    return 0


def _cmd_mollify(cfg, ex, out, header):
    cs = cfg.system("system")
    report = convergence_study(
        cs, ex.band, cfg.list("mollify", "n_list", int), ex.paths, ex.seed, T=ex.T, grid_n=ex.grid_n,
        x0=cfg.float("system", "x0"), ref_factor=cfg.int("mollify", "ref_factor"),
        quad_nodes=cfg.int("mollify", "quad_nodes"), x_step=ex.x_step, kinds=ex.kinds,
    )
    with _open(out, "mollify.csv") as fh:
        write_study_csv(report, fh, header)
    return 0


def _cmd_compare(cfg, ex, out, header):
    box = tuple(cfg.list("compare", "box", float))
    if len(box) != 3 or min(box) <= 0:
        raise ValidationError("compare.box must be three positive numbers T, x_bar, v_bar")
    method = cfg.raw("compare", "method")
    if method not in ("doss", "euler"):
        raise ValidationError(f"compare.method must be doss or euler, got {method!r}")
    spec = ComparisonSpec(
        cfg.system("system"), cfg.float("system", "x0"), cfg.system("right"), cfg.float("right", "x0"),
        ex.band, box=box, grid_density=cfg.int("compare", "density"), x_step=ex.x_step,
    )
    report = verify_pathwise(
        spec, ex.kinds, ex.paths, ex.seed, grid_n=ex.grid_n, method=method,
        tol=cfg.optional_float("compare", "tol"), tol_c=cfg.optional_float("compare", "tol_c"),
        probe=cfg.bool("compare", "probe"),
    )
    with _open(out, "compare_violations.csv") as fh, _open(out, "compare_summary.txt") as sh:
        write_report(report, fh, sh, header)
    print(f"compare: verdict {report.verdict}")
    return 3 if report.verdict == "violated" else 0


def _cmd_flow_check(cfg, ex, out, header):
    cs = cfg.system("system")
    ff = FlowField(cs, ex.x_step)
    n = cfg.int("flow-check", "points")
    h = cfg.float("flow-check", "fd_step")
    xr = cfg.list("flow-check", "x_range", float)
    vr = cfg.list("flow-check", "v_range", float)
    if n < 1 or len(xr) != 2 or len(vr) != 2 or not h > 0:
        raise ValidationError("flow-check needs points >= 1, two-value ranges and fd_step > 0")
    x, v = np.meshgrid(np.linspace(*xr, n), np.linspace(*vr, n), indexing="ij")
    x, v = x.reshape(-1), v.reshape(-1)
    t = cfg.float("flow-check", "t")
    ph, dv, _ = flow_terms(ff, t, x, v)
    up = flow_terms(ff, t, x, v + h)[0]
    dn = flow_terms(ff, t, x, v - h)[0]
    fd = (up - dn) / (2 * h)
    with _open(out, "flow_check.csv") as fh:
        fh.write(f"# {header}\n")
        fh.write("x,v,phi,phi_dv,fd_dv,abs_err\n")
        for row in zip(x, v, ph, dv, fd, np.abs(dv - fd)):
            fh.write(",".join(repr(float(c)) for c in row) + "\n")
    return 0


COMMANDS = {
    "simulate": _cmd_simulate,
    "represent": _cmd_represent,
    "converge": _cmd_converge,
    "mollify": _cmd_mollify,
    "compare": _cmd_compare,
    "flow-check": _cmd_flow_check,
}


def run(subcommand, config_path, overrides=(), seed=None, out_dir=".", threads=None) -> int:
    """Execute one subcommand; returns the process exit status."""
    try:
        if subcommand not in COMMANDS:
            raise ValidationError(f"unknown subcommand {subcommand!r}")
        cfg = Config.load(config_path, overrides)
        ex = _experiment(cfg, seed)
        if threads is not None:
            if threads < 1:
                raise ValidationError("--threads must be at least 1")
            flow.set_threads(threads)
        digest = hashlib.sha256(cfg.canonical().encode()).hexdigest()
        header = f"config_hash={digest} seed={ex.seed}"
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[subcommand](cfg, ex, out, header)
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 2
    except ValidationError as err:
        print(f"invalid configuration: {err}", file=sys.stderr)
        return 1
    except GSDEError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="gsde", description="G-SDE sample-solution experiments")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", required=True, metavar="PATH")
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", dest="overrides")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", default=".", metavar="DIR")
    ap.add_argument("--threads", type=int)
    args = ap.parse_args(argv)
    return run(args.subcommand, args.config, args.overrides, args.seed, args.out, args.threads)


if __name__ == "__main__":
    sys.exit(main())
