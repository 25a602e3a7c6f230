"""Command-line experiment runner.

    iongate validate CONFIG
    iongate run CONFIG [--workers N] [--out DIR]
    iongate emit RECORDS.jsonl --format csv|jsonl|plotdata [--out PATH]
    iongate schema

Exit codes: 0 success, 2 invalid configuration, 3 some sweep points failed,
4 output not writable.  The worker count defaults to ``$IONGATE_WORKERS``
(or 1).
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import itertools
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Iterable, Sequence

import jsonschema
import numpy as np

from .drive import GateTarget, Variant, all_pairs, amplitude_cap_ratio, synthesize
from .dynamics import ErrorShift, HamiltonianLevel, NoiseSpec
from .errors import InfeasibleTargetError, InvalidArgumentError
from .fockspace import FockSpace, SystemSpec, default_cutoff
from .metrics import fock_fidelity, thermal_cutoffs, thermal_gate_fidelity

log = logging.getLogger("iongate")

EXIT_OK, EXIT_CONFIG, EXIT_FAILED, EXIT_UNWRITABLE = 0, 2, 3, 4
SCHEMA_VERSION = 1
WORKERS_ENV = "IONGATE_WORKERS"


class ConfigError(Exception):
    """Raised for configuration problems; carries the offending field path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


_number = {"type": "number"}
_num_or_list = {"oneOf": [_number, {"type": "array", "items": _number, "minItems": 1}]}

SCHEMA: dict = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["schema_version", "system", "gate", "initial"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "description": {"type": "string"},
        "system": {
            "type": "object", "additionalProperties": False, "required": ["n_ions"],
            "properties": {
                "n_ions": {"type": "integer", "minimum": 2, "maximum": 8},
                "coupling": {"type": "number", "minimum": 0, "maximum": 1},
                "eta": {"type": "array", "items": {"type": "array", "items": _number}},
                "mode_ratios": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
            },
        },
        "gate": {
            "type": "object", "additionalProperties": False, "required": ["variant"],
            "properties": {
                "variant": {"enum": [v.value for v in Variant]},
                "phi": {"type": "number", "minimum": 0, "maximum": math.pi / 2},
                "delta": {"type": "number", "exclusiveMinimum": 0, "maximum": 0.5},
                "central_mode": {"type": "integer", "minimum": 0},
                "pairs": {"oneOf": [{"const": "all"},
                                    {"type": "array", "minItems": 1,
                                     "items": {"type": "array", "items": {"type": "integer", "minimum": 0},
                                               "minItems": 2, "maxItems": 2}}]},
            },
        },
        "noise": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "gamma": {"type": "number", "minimum": 0},
                "gamma_minus": _num_or_list, "gamma_plus": _num_or_list, "gamma_dephasing": _num_or_list,
                "units": {"enum": ["nu", "delta"]},
            },
        },
        "errors": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "eps_nu": _num_or_list, "eps_omega": _number,
                "units": {"enum": ["nu", "delta"]},
            },
        },
        "initial": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "fock": {"oneOf": [{"type": "integer", "minimum": 0},
                                   {"type": "array", "items": {"type": "integer", "minimum": 0}}]},
                "thermal": {"oneOf": [{"type": "number", "minimum": 0},
                                      {"type": "array", "items": {"type": "number", "minimum": 0}}]},
            },
            "oneOf": [{"required": ["fock"]}, {"required": ["thermal"]}],
        },
        "sweep": {"type": "object", "additionalProperties": {"type": "array", "minItems": 1}},
        "numerics": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "margin": {"type": "integer", "minimum": 2},
                "steps": {"type": ["integer", "null"], "minimum": 1},
                "level": {"enum": [lv.value for lv in HamiltonianLevel]},
                "thermal_points": {"type": "integer", "minimum": 2},
                "thermal_tol": {"type": "number", "exclusiveMinimum": 0, "maximum": 1e-2},
            },
        },
        "output": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "dir": {"type": "string"},
                "stem": {"type": "string"},
                "formats": {"type": "array", "items": {"enum": ["csv", "jsonl", "plotdata"]}},
                "plot_x": {"type": "string"},
            },
        },
    },
}

DEFAULTS = {
    "system": {"coupling": 0.05},
    "gate": {"phi": math.pi / 4, "delta": 0.02, "central_mode": 0, "pairs": [[0, 1]]},
    "noise": {"gamma": 0.0, "units": "nu"},
    "errors": {"eps_nu": 0.0, "eps_omega": 0.0, "units": "nu"},
    "numerics": {"margin": 15, "steps": None, "level": "exact", "thermal_points": 9, "thermal_tol": 1e-8},
    "output": {"dir": "results", "stem": None, "formats": ["csv", "jsonl"], "plot_x": None},
}


# ------------------------------------------------------------------ config

def _get(cfg: dict, path: str):
    node = cfg
    for part in path.split("."):
        node = node[part]
    return node


def _set(cfg: dict, path: str, value):
    parts = path.split(".")
    node = cfg
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    if parts[0] == "initial":
        # an initial-state axis replaces the other kind
        node.pop("thermal" if parts[-1] == "fock" else "fock", None)
    node[parts[-1]] = value


def _schema_has(path: str) -> bool:
    node = SCHEMA
    for part in path.split("."):
        props = node.get("properties", {})
        if part not in props:
            return False
        node = props[part]
    return True


def _format_schema_error(err: jsonschema.ValidationError) -> str:
    where = ".".join(str(p) for p in err.absolute_path) or "<root>"
    return f"{where}: {err.message}"


def load_config(path: str | os.PathLike) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("<file>", str(exc)) from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}", exc.msg) from None
    return check_config(cfg)


def check_config(cfg: dict) -> dict:
    """Schema and range validation; returns the config with defaults filled in."""
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        raise ConfigError(".".join(str(p) for p in errors[0].absolute_path) or "<root>",
                          "; ".join(_format_schema_error(e) for e in errors))
    full = copy.deepcopy(cfg)
    for block, values in DEFAULTS.items():
        full.setdefault(block, {})
        for key, val in values.items():
            full[block].setdefault(key, copy.deepcopy(val))
    if "thermal" not in full["initial"] and "fock" not in full["initial"]:
        raise ConfigError("initial", "exactly one of fock/thermal is required")
    for axis, values in full.get("sweep", {}).items():
        if not _schema_has(axis):
            raise ConfigError(f"sweep.{axis}", "axis does not name a configuration field")
        for v in values:
            trial = copy.deepcopy(cfg)
            _set(trial, axis, v)
            errs = list(validator.iter_errors(trial))
            if errs:
                raise ConfigError(f"sweep.{axis}", _format_schema_error(errs[0]))
    return full


def sweep_points(cfg: dict) -> list[tuple[dict, dict]]:
    """Cartesian product of the sweep axes in declaration order, as
    ``(axis values, concrete config)`` pairs."""
    axes = list(cfg.get("sweep", {}).items())
    if not axes:
        return [({}, cfg)]
    out = []
    for combo in itertools.product(*[vals for _, vals in axes]):
        point = copy.deepcopy(cfg)
        values = {}
        for (name, _), val in zip(axes, combo):
            _set(point, name, val)
            values[name] = val
        point.pop("sweep", None)
        out.append((values, point))
    return out


def build_system(cfg: dict) -> SystemSpec:
    sysc = cfg["system"]
    if "eta" in sysc:
        eta = np.asarray(sysc["eta"], dtype=float)
        if eta.shape[0] != sysc["n_ions"]:
            raise ConfigError("system.eta", "row count must equal n_ions")
        ratios = sysc.get("mode_ratios")
        if ratios is None:
            raise ConfigError("system.mode_ratios", "required with an explicit eta matrix")
        if len(ratios) != eta.shape[1]:
            raise ConfigError("system.mode_ratios", "length must equal eta column count")
        return SystemSpec.from_eta(eta, ratios)
    return SystemSpec.chain(sysc["n_ions"], sysc["coupling"])


def build_pairs(cfg: dict, system: SystemSpec) -> list[tuple[int, int]]:
    pairs = cfg["gate"]["pairs"]
    if pairs == "all":
        return all_pairs(system.n_ions)
    out = [tuple(p) for p in pairs]
    for p in out:
        if p[0] == p[1] or max(p) >= system.n_ions:
            raise ConfigError("gate.pairs", f"invalid pair {list(p)} for {system.n_ions} ions")
    return out


def build_noise(cfg: dict, system: SystemSpec) -> NoiseSpec:
    nc = cfg["noise"]
    scale = cfg["gate"]["delta"] if nc.get("units") == "delta" else 1.0
    base = nc.get("gamma", 0.0)

    def rate(name):
        val = np.asarray(nc.get(name, base), dtype=float) * scale
        return np.broadcast_to(val, (system.n_modes,)).copy()
    return NoiseSpec(rate("gamma_minus"), rate("gamma_plus"), rate("gamma_dephasing"))


def build_shifts(cfg: dict, system: SystemSpec) -> ErrorShift:
    ec = cfg["errors"]
    scale = cfg["gate"]["delta"] if ec.get("units") == "delta" else 1.0
    eps_nu = np.broadcast_to(np.asarray(ec["eps_nu"], dtype=float) * scale, (system.n_modes,)).copy()
    return ErrorShift(eps_nu, float(ec["eps_omega"]) * scale)


def build_programs(cfg: dict, system: SystemSpec):
    g = cfg["gate"]
    if g["central_mode"] >= system.n_modes:
        raise ConfigError("gate.central_mode", f"chain has {system.n_modes} modes")
    out = []
    for pair in build_pairs(cfg, system):
        target = GateTarget(g["variant"], g["phi"], pair, g["central_mode"])
        try:
            out.append((pair, synthesize(system, target, g["delta"])))
        except InfeasibleTargetError as exc:
            raise ConfigError("gate.phi", f"{exc} (max phi {exc.max_phi})") from None
    return out


def initial_vector(cfg: dict, system: SystemSpec, key: str) -> list:
    val = cfg["initial"][key]
    vals = list(val) if isinstance(val, list) else [val] * system.n_modes
    if len(vals) != system.n_modes:
        raise ConfigError(f"initial.{key}", f"needs {system.n_modes} entries")
    return vals


# ------------------------------------------------------------------ running

def derived_quantities(cfg: dict) -> list[dict]:
    """Per sweep point: gate time, Rabi frequency, cutoffs and a memory estimate."""
    rows = []
    for values, point in sweep_points(cfg):
        system = build_system(point)
        programs = build_programs(point, system)
        if "fock" in point["initial"]:
            n = initial_vector(point, system, "fock")
            cut = [default_cutoff(x, system.coupling, point["numerics"]["margin"]) for x in n]
        else:
            cut = thermal_cutoffs(initial_vector(point, system, "thermal"), point["numerics"]["thermal_tol"])
            cut = [c + point["numerics"]["margin"] for c in cut]
        pair, prog = programs[0]
        dim = int(np.prod([c + 1 for c in cut]))
        noisy = not build_noise(point, system).is_zero()
        mem = 16 * dim * dim * 10 * 6 if noisy else 16 * dim * 12
        rows.append({**{k: v for k, v in values.items()}, "gate_time": prog.gate_time, "rabi": prog.rabi,
                     "cutoffs": cut, "pairs": len(programs), "memory_mb": mem / 2**20})
    return rows


def evaluate_point(point: dict) -> list[dict]:
    """All records (one per pair) for a concrete configuration."""
    system = build_system(point)
    noise = build_noise(point, system)
    shifts = build_shifts(point, system)
    num = point["numerics"]
    kwargs = dict(noise=None if noise.is_zero() else noise, shifts=shifts,
                  level=HamiltonianLevel(num["level"]), steps=num["steps"], margin=num["margin"])
    g = point["gate"]
    records = []
    for pair, prog in build_programs(point, system):
        rec = {"pair": f"{pair[0]}-{pair[1]}", "status": "ok"}
        t0 = time.perf_counter()
        try:
            if "fock" in point["initial"]:
                fid, diag = fock_fidelity(prog, system, initial_vector(point, system, "fock"), **kwargs)
            else:
                fid, diag = thermal_gate_fidelity(prog, system, initial_vector(point, system, "thermal"),
                                                  points=num["thermal_points"], tol=num["thermal_tol"],
                                                  **kwargs)
            ref = synthesize(system, GateTarget(Variant.MS_SINGLE_MODE, g["phi"], pair, g["central_mode"]),
                             g["delta"])
            rec.update(fidelity=fid, infidelity=1.0 - fid, leakage=diag.get("leakage", float("nan")),
                       amplitude_cap=amplitude_cap_ratio(prog, ref, system))
        except Exception as exc:  # a failed point is recorded, the sweep continues
            log.error("point failed: %s", exc)
            rec.update(status=f"error: {type(exc).__name__}: {exc}", fidelity=float("nan"),
                       infidelity=float("nan"), leakage=float("nan"), amplitude_cap=float("nan"))
        rec["wall_time"] = time.perf_counter() - t0
        records.append(rec)
    if len(records) > 1:
        inf = np.array([r["infidelity"] for r in records])
        for label, val in (("mean", np.mean(inf)), ("min", np.min(inf)), ("max", np.max(inf))):
            records.append({"pair": label, "status": "ok" if np.all(np.isfinite(inf)) else "partial",
                            "fidelity": 1.0 - val, "infidelity": val, "leakage": float("nan"),
                            "amplitude_cap": float("nan"), "wall_time": 0.0})
    return records


def _point_job(args):
    values, point = args
    return [{**{f"sweep:{k}": _plain(v) for k, v in values.items()}, **r} for r in evaluate_point(point)]


def _plain(v):
    return json.dumps(v) if isinstance(v, (list, dict)) else v


def add_ratio_column(records: list[dict]) -> None:
    """With variant as a sweep axis, attach I_variant / I_robust to each record."""
    key = "sweep:gate.variant"
    if not records or key not in records[0]:
        return
    robust = {}
    for r in records:
        if r[key] == Variant.ROBUST.value:
            robust[_ratio_key(r, key)] = r["infidelity"]
    for r in records:
        base = robust.get(_ratio_key(r, key))
        r["ratio_to_robust"] = (r["infidelity"] / base) if base and r[key] != Variant.ROBUST.value else float("nan")


def _ratio_key(r: dict, skip: str):
    return tuple((k, r[k]) for k in sorted(r) if k.startswith("sweep:") and k != skip) + (("pair", r["pair"]),)


def run_config(cfg: dict, workers: int = 1) -> list[dict]:
    points = sweep_points(cfg)
    jobs = [(v, p) for v, p in points]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_point_job, jobs))
    else:
        chunks = [_point_job(j) for j in jobs]
    records = [r for chunk in chunks for r in chunk]
    add_ratio_column(records)
    return records


# ------------------------------------------------------------------ output

CSV_FIXED = ["pair", "status", "fidelity", "infidelity", "ratio_to_robust", "leakage", "amplitude_cap"]


def fmt(value) -> str:
    if isinstance(value, bool) or value is None:
        return "" if value is None else str(value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "nan" if math.isnan(value) else f"{float(value):.12g}"
    return str(value)


def csv_columns(records: Sequence[dict]) -> list[str]:
    sweep = [k for k in records[0] if k.startswith("sweep:")]
    return sweep + [c for c in CSV_FIXED if any(c in r for r in records)]


def to_csv(records: Sequence[dict]) -> str:
    if not records:
        raise InvalidArgumentError("no records to emit")
    cols = csv_columns(records)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for r in records:
        writer.writerow([fmt(r.get(c, "")) for c in cols])
    return buf.getvalue()


def parse_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for row in rows:
        rec = {}
        for k, v in row.items():
            try:
                rec[k] = float(v) if k not in ("pair", "status") else v
            except ValueError:
                rec[k] = v
        out.append(rec)
    return out


def to_jsonl(records: Sequence[dict]) -> str:
    lines = []
    for r in records:
        clean = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()}
        lines.append(json.dumps(clean, sort_keys=False))
    return "\n".join(lines) + "\n"


def to_plotdata(records: Sequence[dict], x_axis: str | None = None) -> str:
    """Tab-separated ``x  series  y`` rows; the series label joins every other
    sweep axis and the pair id, ``y`` is the infidelity."""
    sweep = [k for k in records[0] if k.startswith("sweep:")]
    if x_axis is not None and not x_axis.startswith("sweep:"):
        x_axis = f"sweep:{x_axis}"
    if x_axis is None:
        x_axis = sweep[0] if sweep else None
    lines = ["# x\tseries\ty"]
    for r in records:
        x = fmt(r[x_axis]) if x_axis else "0"
        label = ";".join(f"{k[6:]}={fmt(r[k])}" for k in sweep if k != x_axis)
        label = f"{label};pair={r['pair']}" if label else f"pair={r['pair']}"
        lines.append(f"{x}\t{label}\t{fmt(r['infidelity'])}")
    return "\n".join(lines) + "\n"


def write_outputs(records: Sequence[dict], out_dir: Path, stem: str, formats: Iterable[str],
                  plot_x: str | None = None) -> list[Path]:
    writers = {"csv": (".csv", to_csv), "jsonl": (".jsonl", to_jsonl),
               "plotdata": (".plot.tsv", lambda r: to_plotdata(r, plot_x))}
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for f in formats:
        suffix, writer = writers[f]
        path = out_dir / f"{stem}{suffix}"
        path.write_text(writer(records))
        paths.append(path)
    return paths


# ------------------------------------------------------------------ commands

def _workers(arg: int | None) -> int:
    if arg is not None:
        return max(1, arg)
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    rows = derived_quantities(cfg)
    print(f"config OK: {len(rows)} sweep point(s)")
    header = ["point", "gate_time", "rabi", "cutoffs", "pairs", "memory_mb"]
    print("\t".join(header))
    for i, r in enumerate(rows):
        print("\t".join([str(i), fmt(r["gate_time"]), fmt(r["rabi"]), str(r["cutoffs"]),
                         str(r["pairs"]), f"{r['memory_mb']:.1f}"]))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    derived_quantities(cfg)  # surfaces infeasible targets before any propagation
    out = cfg["output"]
    out_dir = Path(args.out or out["dir"])
    stem = out["stem"] or Path(args.config).stem
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / f".{stem}.probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        print(f"error: cannot write to {out_dir}: {exc}", file=sys.stderr)
        return EXIT_UNWRITABLE
    records = run_config(cfg, _workers(args.workers))
    try:
        paths = write_outputs(records, out_dir, stem, out["formats"], out["plot_x"])
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNWRITABLE
    for p in paths:
        print(p)
    failed = [r for r in records if r["status"] != "ok"]
    return EXIT_FAILED if failed else EXIT_OK


def cmd_emit(args) -> int:
    try:
        lines = Path(args.records).read_text().splitlines()
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    records = [{k: (float("nan") if v is None else v) for k, v in json.loads(l).items()} for l in lines if l]
    if not records:
        print("error: no records", file=sys.stderr)
        return EXIT_CONFIG
    text = {"csv": to_csv, "jsonl": to_jsonl, "plotdata": lambda r: to_plotdata(r, args.x)}[args.format](records)
    if args.out in (None, "-"):
        sys.stdout.write(text)
        return EXIT_OK
    try:
        Path(args.out).write_text(text)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNWRITABLE
    return EXIT_OK


def cmd_schema(args) -> int:
    print(json.dumps(SCHEMA, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iongate", description="Trapped-ion entangling gate simulations")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("validate", help="check a config and print derived quantities")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)
    p = sub.add_parser("run", help="execute a sweep")
    p.add_argument("config")
    p.add_argument("--workers", type=int, default=None, help=f"worker processes (default ${WORKERS_ENV} or 1)")
    p.add_argument("--out", default=None, help="output directory (overrides the config)")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("emit", help="convert a JSON-lines record file")
    p.add_argument("records")
    p.add_argument("--format", choices=["csv", "jsonl", "plotdata"], required=True)
    p.add_argument("--x", default=None, help="sweep axis for the plotdata x column")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_emit)
    p = sub.add_parser("schema", help="print the config JSON schema")
    p.set_defaults(func=cmd_schema)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvalidArgumentError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
