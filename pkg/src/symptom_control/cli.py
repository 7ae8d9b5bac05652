"""Command-line entry point: ``symptom-control {run,simulate,report,energy,drivers}``.

Exit codes: 0 ok, 2 usage or validation error, 3 empty result, 4 numerical failure.

A run is described by one JSON config file; every key can be overridden by a
flag of the same name (``--alpha 0.01``, ``--normalize-a true``, ...)::

    {
      "observations": "obs.csv",          # paths are relative to the config file
      "moderators": "moderators.csv",     # optional
      "output_dir": "results",
      "seed": 0, "jobs": 1,
      "network": {"alpha": 0.05, "ridge_tol": 1e-6, "ridge_cap": 0.1, "backend": "auto",
                  "n_permutations": 1000, "control_df": false},
      "control": {"horizon_T": 1.0, "rho": 1.0, "use_state_cost": false, "input_spec": "identity",
                  "step": 0.001, "boundary_tol": 1e-5, "normalize_a": false},
      "stats": {"min_obs": 8, "min_transitions": 5, "loocv_granularity": "subject"},
      "drivers": {"rank_tol": 1e-8},
      "moderation": {"prs_mdd": ["age", "sex", "n_bdi", "ancestry_c1", "ancestry_c2", "ancestry_c3"]},
      "cross_sectional": true
    }
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .control import (
    ControlConfig,
    NonConvergentError,
    NumericalOverflowError,
    energy_series,
    select_driver_nodes,
)
from .exceptions import (
    IllConditionedError,
    InternalConsistencyError,
    SymptomControlError,
    ValidationError,
)
from .model import MODERATOR_COLUMNS, parse_cohort, write_moderators, write_observations
from .netest import NetworkConfig, estimate_network
from .pipeline import DEFAULT_MODERATION, AnalysisConfig, AnalysisResult, analyze_cohort, round_floats
from .synth import SynthSpec, synth_cohort

log = logging.getLogger("symptom_control")

EXIT_OK, EXIT_USAGE, EXIT_EMPTY, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------- config

def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _json_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


@dataclass(frozen=True)
class Key:
    section: str | None
    name: str
    parse: Callable[[str], Any]
    default: Any


RUN_KEYS = (
    Key(None, "observations", str, None),
    Key(None, "moderators", str, None),
    Key(None, "output_dir", str, None),
    Key(None, "seed", int, 0),
    Key(None, "jobs", int, 1),
    Key(None, "cross_sectional", _bool, True),
    Key(None, "moderation", json.loads, None),
    Key("network", "alpha", float, 0.05),
    Key("network", "ridge_tol", float, 1e-6),
    Key("network", "ridge_cap", float, 0.1),
    Key("network", "backend", str, "auto"),
    Key("network", "n_permutations", int, 1000),
    Key("network", "control_df", _bool, False),
    Key("control", "horizon_T", float, 1.0),
    Key("control", "rho", float, 1.0),
    Key("control", "use_state_cost", _bool, False),
    Key("control", "input_spec", _json_value, "identity"),
    Key("control", "step", float, 0.001),
    Key("control", "boundary_tol", float, 1e-5),
    Key("control", "normalize_a", _bool, False),
    Key("stats", "min_obs", int, 8),
    Key("stats", "min_transitions", int, 5),
    Key("stats", "loocv_granularity", str, "subject"),
    Key("drivers", "rank_tol", float, 1e-8),
)
SECTIONS = {k.section for k in RUN_KEYS if k.section}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_key_flags(p: argparse.ArgumentParser, keys) -> None:
    for k in keys:
        where = f"{k.section}.{k.name}" if k.section else k.name
        p.add_argument(_flag(k.name), dest=f"key_{k.name}", type=k.parse, default=None,
                       help=f"override config key {where}")


def load_json(path: str | os.PathLike, what: str) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"{what} not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(f"{what} {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise CliError(f"{what} {path} must contain a JSON object")
    return data


def resolve_run_config(raw: dict, overrides: dict, base_dir: Path) -> dict:
    """Merge file values, flag overrides and defaults into a flat key map."""
    flat: dict[str, Any] = {}
    known_top = {k.name for k in RUN_KEYS if k.section is None} | SECTIONS
    for key, value in raw.items():
        if key not in known_top:
            raise CliError(f"unknown config key {key!r}")
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise CliError(f"config section {key!r} must be an object")
            allowed = {k.name for k in RUN_KEYS if k.section == key}
            for sub, v in value.items():
                if sub not in allowed:
                    raise CliError(f"unknown config key {key}.{sub}")
                flat[sub] = v
        else:
            flat[key] = value
    explicit_seed = "seed" in flat or overrides.get("seed") is not None
    for k in RUN_KEYS:
        if overrides.get(k.name) is not None:
            flat[k.name] = overrides[k.name]
        flat.setdefault(k.name, k.default)
    if flat["observations"] is None:
        raise CliError("config key 'observations' is required")
    if flat["output_dir"] is None:
        raise CliError("config key 'output_dir' is required")
    for key in ("observations", "moderators"):
        if flat[key] is not None:
            path = Path(flat[key])
            path = path if path.is_absolute() else base_dir / path
            if not path.is_file():
                raise CliError(f"{key} file not found: {path}")
            flat[key] = path
    out = Path(flat["output_dir"])
    flat["output_dir"] = out if out.is_absolute() else base_dir / out
    if flat["backend"] == "permutation" and not explicit_seed:
        raise CliError("the permutation backend needs an explicit 'seed'")
    if flat["jobs"] < 1:
        raise CliError("jobs must be >= 1")
    return flat


def analysis_config(flat: dict) -> AnalysisConfig:
    try:
        mod = flat["moderation"]
        moderation = dict(DEFAULT_MODERATION) if mod is None else {str(k): tuple(v) for k, v in mod.items()}
        return AnalysisConfig(
            network=NetworkConfig(alpha=flat["alpha"], ridge_tol=flat["ridge_tol"], ridge_cap=flat["ridge_cap"],
                                  backend=flat["backend"], n_permutations=flat["n_permutations"],
                                  control_df=bool(flat["control_df"])),
            control=ControlConfig(horizon_T=flat["horizon_T"], rho=flat["rho"],
                                  use_state_cost=bool(flat["use_state_cost"]),
                                  input_spec=_input_spec(flat["input_spec"]), step=flat["step"],
                                  boundary_tol=flat["boundary_tol"], normalize_a=bool(flat["normalize_a"])),
            seed=int(flat["seed"]),
            min_obs=int(flat["min_obs"]),
            min_transitions=int(flat["min_transitions"]),
            loocv_granularity=flat["loocv_granularity"],
            rank_tol=float(flat["rank_tol"]),
            moderation=moderation,
            cross_sectional=bool(flat["cross_sectional"]),
        )
    except (TypeError, AttributeError) as exc:
        raise CliError(f"invalid config value: {exc}") from None


def _input_spec(spec):
    if isinstance(spec, list):
        return tuple(tuple(r) if isinstance(r, list) else r for r in spec)
    return spec


# -------------------------------------------------------------------- writers

def _num(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".12g")


def dump_json(obj, path: Path) -> None:
    text = json.dumps(round_floats(obj), indent=2, sort_keys=True, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_num(v) if not isinstance(v, str) else v for v in r])


def energy_rows(e):
    for i in range(len(e)):
        yield (e.patient_id, i, float(e.days[i]), int(e.bdi_sum[i]), float(e.e0[i]),
               bool(e.converged[i]), float(e.boundary_error[i]))


ENERGY_HEADER = ("patient_id", "obs_index", "day", "bdi_sum", "e0", "converged", "boundary_error")


def write_results(res: AnalysisResult, out: Path, moderators: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    nets = [o.network.to_dict() for o in res.outcomes if o.network is not None]
    dump_json({"networks": nets}, out / "networks.json")
    edge_rows = []
    for o in res.outcomes:
        if o.network is None:
            continue
        for line in o.network.edge_table().strip().splitlines()[1:]:
            edge_rows.append([o.patient_id] + line.split(","))
    with open(out / "network_edges.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("patient_id", "item_i", "item_j", "weight", "pvalue", "retained"))
        w.writerows(edge_rows)

    rows = []
    for o in res.outcomes:
        if o.energies is not None:
            rows.extend(energy_rows(o.energies))
    write_csv(out / "energies.csv", ENERGY_HEADER, rows)

    dump_json({
        "patients": [o.drivers.to_dict() for o in res.outcomes if o.drivers is not None],
        "summary": res.drivers.to_dict() if res.drivers is not None else None,
    }, out / "drivers.json")

    by_id = {c.patient_id: c for c in res.couplings}
    reasons = {e.patient_id: e.reason for e in res.exclusions}
    write_csv(out / "couplings.csv", ("patient_id", "r", "z", "n_pairs", "dropped_reason"), [
        (pid, by_id[pid].r, by_id[pid].z, by_id[pid].n_pairs, "") if pid in by_id
        else (pid, None, None, None, reasons.get(pid, ""))
        for pid in res.input_ids
    ])
    dump_json(res.group.to_dict() if res.group is not None else {"error": res.stage_errors.get("group")},
              out / "group.json")
    dump_json(res.loocv.to_dict() if res.loocv is not None else {"error": res.stage_errors.get("loocv")},
              out / "loocv.json")
    dump_json({k: v.to_dict() for k, v in res.moderation.items()}, out / "moderation.json")
    points = []
    for name in res.moderation:
        for c in res.couplings:
            v = moderators.get(c.patient_id, {}).get(name)
            if v is not None and np.isfinite(v):
                points.append((name, c.patient_id, v, c.z))
    write_csv(out / "moderation_points.csv", ("moderator", "patient_id", "value", "z"), points)
    dump_json({"exclusions": [e.to_dict() for e in res.exclusions]}, out / "exclusions.json")
    cs = res.cross_sectional
    cs_rows = []
    if cs is not None:
        iu, ju = np.triu_indices(cs.n_nodes, 1)
        cs_rows = [(int(i) + 1, int(j) + 1, float(cs.a[i, j]), float(cs.pvalues[i, j]), bool(cs.mask[i, j]))
                   for i, j in zip(iu, ju)]
    write_csv(out / "cross_sectional_edges.csv", ("item_i", "item_j", "weight", "pvalue", "retained"), cs_rows)
    dump_json(res.summary(), out / "summary.json")


# ------------------------------------------------------------------- commands

def cmd_run(args) -> int:
    cfg_path = Path(args.config)
    raw = load_json(cfg_path, "config file")
    overrides = {k.name: getattr(args, f"key_{k.name}") for k in RUN_KEYS}
    flat = resolve_run_config(raw, overrides, cfg_path.resolve().parent)
    cfg = analysis_config(flat)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        cohort = parse_cohort(flat["observations"], moderators=flat["moderators"])
    for w in caught:
        log.warning("%s", w.message)
    moderators = {s.patient_id: dict(s.moderators) for s in cohort}
    if flat["moderators"] is None:
        cfg = replace(cfg, moderation={})
        log.info("no moderator table given; moderation analyses skipped")
    out = flat["output_dir"]
    res = analyze_cohort(cohort, cfg, moderators, n_jobs=flat["jobs"])
    write_results(res, out, moderators)
    eligible = len(res.input_ids) - sum(e.reason.startswith("only ") for e in res.exclusions)
    if eligible == 0:
        raise CliError(f"no eligible patients: all {len(res.input_ids)} series have fewer than "
                       f"{cfg.min_obs} measurements (see {out / 'exclusions.json'})", EXIT_EMPTY)
    if not res.couplings:
        raise CliError(f"no patient survived the analysis (see {out / 'exclusions.json'})", EXIT_EMPTY)
    for stage, msg in sorted(res.stage_errors.items()):
        log.warning("stage %s: %s", stage, msg)
    print(f"analyzed {len(res.couplings)} of {len(res.input_ids)} patients; results in {out}")
    return EXIT_OK


SIM_FIELDS = tuple(SynthSpec.__dataclass_fields__)


def cmd_simulate(args) -> int:
    raw = load_json(args.spec, "spec file") if args.spec else {}
    for name in SIM_FIELDS:
        v = getattr(args, f"sim_{name}", None)
        if v is not None:
            raw[name] = v
    spec = SynthSpec.from_dict(raw)
    if spec.n_obs_min < 8:
        log.warning("n_obs_min=%d is below 8: shorter series will be dropped by the eligibility filter",
                    spec.n_obs_min)
    cohort, truth = synth_cohort(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "observations.csv", "w", encoding="utf-8", newline="") as fh:
        write_observations(cohort, fh)
    with open(out / "moderators.csv", "w", encoding="utf-8", newline="") as fh:
        write_moderators(cohort, fh, MODERATOR_COLUMNS)
    (out / "ground_truth.json").write_text(
        json.dumps(round_floats(truth.to_dict(), 17), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {len(cohort)} synthetic patients to {out}")
    return EXIT_OK


REPORT_INPUTS = ("couplings.csv", "moderation.json", "moderation_points.csv", "cross_sectional_edges.csv")


def cmd_report(args) -> int:
    res_dir = Path(args.results)
    missing = [f for f in REPORT_INPUTS if not (res_dir / f).is_file()]
    if missing:
        raise CliError(f"results directory {res_dir} lacks: {', '.join(missing)}")
    out = Path(args.out) if args.out else res_dir
    out.mkdir(parents=True, exist_ok=True)
    moderation = json.loads((res_dir / "moderation.json").read_text(encoding="utf-8"))
    with open(res_dir / "moderation_points.csv", encoding="utf-8", newline="") as fh:
        points = list(csv.DictReader(fh))
    if not moderation:
        print("no moderation analyses in results; fig2 tables skipped")
    for name in sorted(moderation):
        rows = [(p["patient_id"], p["value"], p["z"]) for p in points if p["moderator"] == name]
        write_csv(out / f"fig2_{name}.csv", ("patient_id", "moderator_value", "z"), rows)
    with open(res_dir / "couplings.csv", encoding="utf-8", newline="") as fh:
        kept = [(r["patient_id"], r["z"]) for r in csv.DictReader(fh) if not r["dropped_reason"]]
    write_csv(out / "figS4.csv", ("patient_id", "z"), kept)
    with open(res_dir / "cross_sectional_edges.csv", encoding="utf-8", newline="") as fh:
        edges = [(r["item_i"], r["item_j"], r["weight"]) for r in csv.DictReader(fh) if r["retained"] == "1"]
    write_csv(out / "figS3.csv", ("item_i", "item_j", "weight"), edges)
    print(f"wrote {len(moderation)} fig2 tables, figS4.csv ({len(kept)} patients), figS3.csv ({len(edges)} edges)")
    return EXIT_OK


def _control_from_args(args) -> ControlConfig:
    return ControlConfig(horizon_T=args.horizon_T, rho=args.rho, step=args.step, boundary_tol=args.boundary_tol,
                         normalize_a=args.normalize_a, use_state_cost=args.use_state_cost,
                         input_spec=_input_spec(args.input_spec))


def _read_network_json(path):
    if not Path(path).is_file():
        raise CliError(f"network file not found: {path}")
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(f"network file {path} is not valid JSON: {exc}") from None


def _load_network(path) -> np.ndarray:
    data = _read_network_json(path)
    if isinstance(data, dict) and "networks" in data:
        raise CliError(f"{path} holds several networks; pick one with --patient")
    if isinstance(data, list):
        return np.asarray(data, dtype=float)
    if isinstance(data, dict) and "a" in data:
        return np.asarray(data["a"], dtype=float)
    raise CliError(f"{path}: expected a matrix or an object with key 'a'")


def _patient_network(path, patient):
    data = load_json(path, "network file")
    for net in data.get("networks", []):
        if net.get("patient_id") == patient:
            return np.asarray(net["a"], dtype=float)
    raise CliError(f"patient {patient!r} not found in {path}")


def _one_patient(args):
    if not Path(args.observations).is_file():
        raise CliError(f"observations file not found: {args.observations}")
    cohort = parse_cohort(args.observations)
    try:
        return cohort[args.patient]
    except KeyError:
        raise CliError(f"patient {args.patient!r} not in {args.observations}") from None


def _network_for(args, series):
    if args.network:
        if series is not None:
            data = _read_network_json(args.network)
            if isinstance(data, dict) and "networks" in data:
                return _patient_network(args.network, series.patient_id)
        return _load_network(args.network)
    cfg = NetworkConfig(alpha=args.alpha, backend=args.backend, seed=args.seed)
    return np.asarray(estimate_network(series, cfg).a)


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_energy(args) -> int:
    series = _one_patient(args)
    a = _network_for(args, series)
    es = energy_series(series, a, _control_from_args(args))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ENERGY_HEADER)
    for r in energy_rows(es):
        w.writerow([v if isinstance(v, str) else _num(v) for v in r])
    _emit(buf.getvalue(), args.out)
    if es.excluded:
        raise CliError(f"patient {series.patient_id}: {es.reason}", EXIT_NUMERIC)
    return EXIT_OK


def cmd_drivers(args) -> int:
    if args.network and not args.observations:
        a, pid = _load_network(args.network), None
    elif args.observations and args.patient:
        series = _one_patient(args)
        a, pid = _network_for(args, series), series.patient_id
    else:
        raise CliError("give --network FILE, or --observations FILE --patient ID")
    d = select_driver_nodes(a, args.rank_tol, patient_id=pid)
    _emit(json.dumps(round_floats(d.to_dict()), indent=2, sort_keys=True) + "\n", args.out)
    return EXIT_OK


# ----------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="symptom-control",
                                description="Symptom networks, control energy and coupling analysis.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="full cohort pipeline from a config file")
    r.add_argument("config")
    _add_key_flags(r, RUN_KEYS)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("simulate", help="write a synthetic cohort with ground truth")
    s.add_argument("--spec", help="JSON file with SynthSpec fields")
    s.add_argument("--out", required=True)
    for name, f in SynthSpec.__dataclass_fields__.items():
        kind = {"int": int, "float": float, "str": str}.get(str(f.type), json.loads)
        s.add_argument(_flag(name), dest=f"sim_{name}", type=kind, default=None, help=f"override spec field {name}")
    s.set_defaults(func=cmd_simulate)

    rep = sub.add_parser("report", help="plot-ready tables from a results directory")
    rep.add_argument("results")
    rep.add_argument("--out")
    rep.set_defaults(func=cmd_report)

    for name, func, helptext in (("energy", cmd_energy, "E0 series of one patient"),
                                 ("drivers", cmd_drivers, "driver nodes of one network")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--observations")
        c.add_argument("--patient")
        c.add_argument("--network", help="JSON matrix, network object, or networks.json from run")
        c.add_argument("--out")
        c.add_argument("--alpha", type=float, default=0.05)
        c.add_argument("--backend", default="auto")
        c.add_argument("--seed", type=int, default=0)
        if name == "energy":
            c.add_argument("--horizon-T", dest="horizon_T", type=float, default=1.0)
            c.add_argument("--rho", type=float, default=1.0)
            c.add_argument("--step", type=float, default=0.001)
            c.add_argument("--boundary-tol", type=float, default=1e-5)
            c.add_argument("--normalize-a", type=_bool, default=False)
            c.add_argument("--use-state-cost", type=_bool, default=False)
            c.add_argument("--input-spec", type=_json_value, default="identity")
        else:
            c.add_argument("--rank-tol", type=float, default=1e-8)
        c.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (InternalConsistencyError, NumericalOverflowError, NonConvergentError, IllConditionedError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, SymptomControlError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
