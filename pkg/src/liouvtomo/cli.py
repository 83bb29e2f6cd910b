"""Command-line front end.

Subcommands wire the library into files: ``theory`` emits device matrices,
``simulate`` generates conditioned homodyne datasets, ``reconstruct`` runs
the estimator pipeline over a dataset directory, ``compare`` scores an
estimate against a theory matrix, ``patterns`` dumps pattern functions for
plotting.  Configs are JSON, schema-validated with unknown keys rejected;
matrices travel in the shared row,col,value,sigma CSV format.

Exit codes: 0 ok, 2 config error, 3 incomplete data, 4 numerical failure.
All outputs are deterministic for fixed config and seed; wall-clock timing
goes to run_meta.json, which is excluded from determinism guarantees.
"""

from __future__ import annotations

import argparse
import glob
import hashlib
import json
import os
import sys
import time
import warnings

import jsonschema
import numpy as np

from .devices import (AtomInit, LaserParams, PiaParams, build_pia,
                      laser_green_ode, laser_green_qjump)
from .errors import (BranchFailureError, ConfigError, EfficiencyThresholdError,
                     IncompleteDataError, IntegrationError, InvalidInputError)
from .experiment import (ExperimentConfig, GreenCsvDeviceSpec, LaserDeviceSpec,
                         PiaDeviceSpec, ReconstructionParams, canonical_json,
                         compare_block, config_sha256, estimate_tables,
                         reconstruct, run_experiment)
from .fock import matrix_exp, read_matrix_csv, write_matrix_csv
from .homodyne import HomodyneConfig, pattern_basis, wavefunctions_upto
from .twinbeam import OutcomeTable, TwinBeamConfig

WORKERS_ENV = "LIOUVTOMO_WORKERS"
DESK_SAMPLES_PER_STATE = 2_000_000
DESK_TOTAL_SAMPLES = 30_000_000

_NUM = {"type": "number"}
_INT = {"type": "integer"}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["device"],
    "properties": {
        "device": {
            "oneOf": [
                {"type": "object", "additionalProperties": False,
                 "required": ["type", "a_gain", "b_loss", "tau", "dim"],
                 "properties": {"type": {"const": "pia"}, "a_gain": _NUM,
                                "b_loss": _NUM, "tau": _NUM, "dim": _INT}},
                {"type": "object", "additionalProperties": False,
                 "required": ["type", "c_coop", "n_sat", "sigma0", "f_ratio",
                              "gamma_cav", "t_star", "dim"],
                 "properties": {"type": {"const": "laser"}, "c_coop": _NUM,
                                "n_sat": _NUM, "sigma0": _NUM, "f_ratio": _NUM,
                                "gamma_cav": _NUM, "t_star": _NUM, "dim": _INT,
                                "atom_init": {"enum": [a.value for a in AtomInit]},
                                "solver": {"enum": ["ode", "qjump", "both"]},
                                "n_traj": _INT}},
                {"type": "object", "additionalProperties": False,
                 "required": ["type", "path", "tau"],
                 "properties": {"type": {"const": "green_csv"},
                                "path": {"type": "string"}, "tau": _NUM}},
            ],
        },
        "twin_beam": {"type": "object", "additionalProperties": False,
                      "required": ["kappa2", "eta_d", "n_outcome_max"],
                      "properties": {"kappa2": _NUM, "eta_d": _NUM,
                                     "n_outcome_max": _INT}},
        "homodyne": {"type": "object", "additionalProperties": False,
                     "required": ["eta_h", "k_max", "samples_per_state", "blocks"],
                     "properties": {"eta_h": _NUM, "k_max": _INT,
                                    "samples_per_state": _INT, "blocks": _INT}},
        "reconstruction": {"type": "object", "additionalProperties": False,
                           "required": ["n_max"],
                           "properties": {"n_max": _INT, "tail_epsilon": _NUM,
                                          "guard": _INT,
                                          "log_method": {"enum": ["matrix_log",
                                                                  "finite_difference"]},
                                          "allow_fd_fallback": {"type": "boolean"},
                                          "outcome_p_floor": _NUM,
                                          "weighted_allocation": {"type": "boolean"}}},
        "seed": _INT,
        "workers": _INT,
        "output_dir": {"type": "string"},
    },
}


def load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: line {exc.lineno} "
                          f"column {exc.colno}: {exc.msg}") from exc
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        spots = "; ".join(
            f"{'/'.join(str(p) for p in e.absolute_path) or '<root>'}: {e.message}"
            for e in errors[:4])
        raise ConfigError(f"config {path} failed schema validation: {spots}")
    return doc


def _require_blocks(doc: dict, names) -> None:
    missing = [n for n in names if n not in doc]
    if missing:
        raise ConfigError(f"config is missing required block(s): {', '.join(missing)}")


def build_device(doc: dict, solver_override: str | None = None):
    dev = doc["device"]
    if dev["type"] == "pia":
        return PiaDeviceSpec(PiaParams(dev["a_gain"], dev["b_loss"], dev["tau"]),
                             dim=dev["dim"])
    if dev["type"] == "laser":
        params = LaserParams(dev["c_coop"], dev["n_sat"], dev["sigma0"],
                             dev["f_ratio"], dev["gamma_cav"], dev["t_star"])
        solver = solver_override or dev.get("solver", "ode")
        if solver == "both":
            solver = "ode"
        return LaserDeviceSpec(params, dim=dev["dim"],
                               atom_init=AtomInit(dev.get("atom_init",
                                                          "inversion_steady_state")),
                               solver=solver, n_traj=dev.get("n_traj", 10_000))
    return GreenCsvDeviceSpec(dev["path"], dev["tau"])


def build_experiment_config(doc: dict, args) -> ExperimentConfig:
    _require_blocks(doc, ["device", "twin_beam", "homodyne", "reconstruction"])
    tb = doc["twin_beam"]
    hd = doc["homodyne"]
    rc = doc["reconstruction"]
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    workers = _resolve_workers(doc, args)
    try:
        return ExperimentConfig(
            device=build_device(doc),
            twin_beam=TwinBeamConfig(tb["kappa2"], tb["eta_d"], tb["n_outcome_max"]),
            homodyne=HomodyneConfig(hd["eta_h"], hd["k_max"],
                                    hd["samples_per_state"], hd["blocks"]),
            recon=ReconstructionParams(
                n_max=rc["n_max"],
                tail_epsilon=rc.get("tail_epsilon", 1e-9),
                guard=rc.get("guard", 4),
                log_method=rc.get("log_method", "matrix_log"),
                allow_fd_fallback=rc.get("allow_fd_fallback", True),
                outcome_p_floor=rc.get("outcome_p_floor", 1e-4),
                weighted_allocation=rc.get("weighted_allocation", False)),
            seed=seed,
            workers=workers)
    except (InvalidInputError, EfficiencyThresholdError) as exc:
        raise ConfigError(str(exc)) from exc


def _resolve_workers(doc: dict, args) -> int:
    if args.workers is not None:
        return args.workers
    if "workers" in doc:
        return doc["workers"]
    env = os.environ.get(WORKERS_ENV)
    return int(env) if env else 1


def _out_dir(doc: dict, args) -> str:
    out = args.out or doc.get("output_dir")
    if not out:
        raise ConfigError("no output directory: pass --out or set output_dir")
    os.makedirs(out, exist_ok=True)
    return out


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out: str, cfg_hash: str, command: str, names) -> None:
    manifest = {
        "command": command,
        "config_sha256": cfg_hash,
        "files": {name: _sha256_file(os.path.join(out, name)) for name in sorted(names)},
    }
    with open(os.path.join(out, "manifest.json"), "w", encoding="utf-8",
              newline="\n") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _write_meta(out: str, command: str, wall_clock: float) -> None:
    with open(os.path.join(out, "run_meta.json"), "w", encoding="utf-8",
              newline="\n") as fh:
        json.dump({"command": command, "wall_clock_s": wall_clock}, fh, sort_keys=True)
        fh.write("\n")


def _doc_hash(doc: dict) -> str:
    return hashlib.sha256(canonical_json(doc).encode()).hexdigest()


# ---------------------------------------------------------------------------
# Subcommands


def cmd_theory(args) -> int:
    doc = load_config(args.config)
    out = _out_dir(doc, args)
    t0 = time.perf_counter()
    dev = doc["device"]
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    workers = _resolve_workers(doc, args)
    written: list[str] = []

    if dev["type"] == "laser" and dev.get("solver", "ode") in ("qjump", "both"):
        spec_ode = build_device(doc, solver_override="ode")
        g_ode = spec_ode.green()
        params = spec_ode.params
        g_qj, sig = laser_green_qjump(params, spec_ode.dim, spec_ode.atom_init,
                                      n_traj=dev.get("n_traj", 10_000),
                                      seed=seed, workers=workers)
        if dev.get("solver") == "both":
            write_matrix_csv(os.path.join(out, "G_theory_ode.csv"), g_ode.mat)
            write_matrix_csv(os.path.join(out, "G_theory_qjump.csv"), g_qj.mat, sig)
            written += ["G_theory_ode.csv", "G_theory_qjump.csv"]
        else:
            write_matrix_csv(os.path.join(out, "G_theory.csv"), g_qj.mat, sig)
            written.append("G_theory.csv")
        l_theory = spec_ode.theory_liouvillian(spec_ode.dim)
    else:
        spec = build_device(doc)
        green = spec.green(seed=seed, workers=workers)
        write_matrix_csv(os.path.join(out, "G_theory.csv"), green.mat)
        written.append("G_theory.csv")
        if dev["type"] == "pia":
            l_theory = build_pia(spec.params, spec.dim).mat
        else:
            l_theory = spec.theory_liouvillian(spec.dim)

    write_matrix_csv(os.path.join(out, "L_theory.csv"), l_theory)
    written.append("L_theory.csv")
    _write_manifest(out, _doc_hash(doc), "theory", written)
    _write_meta(out, "theory", time.perf_counter() - t0)
    print(f"theory matrices written to {out}")
    return 0


def cmd_simulate(args) -> int:
    doc = load_config(args.config)
    cfg = build_experiment_config(doc, args)
    out = _out_dir(doc, args)
    n_outcomes_est = cfg.twin_beam.n_outcome_max + 1
    total = cfg.homodyne.samples_per_state * n_outcomes_est
    if (cfg.homodyne.samples_per_state > DESK_SAMPLES_PER_STATE
            or total > DESK_TOTAL_SAMPLES):
        if not args.paper_scale:
            raise ConfigError(
                f"data volume ({total:.2e} samples) exceeds the desk-scale cap; "
                "pass --paper-scale to lift it")
        warnings.warn("paper-scale data volume requested; this can take hours",
                      stacklevel=1)

    t0 = time.perf_counter()
    data = run_experiment(cfg)
    table = estimate_tables(data, cfg)
    written = []
    for n in table.outcomes():
        name = f"outcome_{n:02d}.json"
        table.save(os.path.join(out, name), n)
        written.append(name)
    if args.dump_raw:
        name = "quadratures.csv"
        with open(os.path.join(out, name), "w", encoding="utf-8", newline="\n") as fh:
            fh.write("outcome_n,block,x\n")
            for n in data.outcomes():
                for batch in data.batches[n]:
                    for x in batch.samples:
                        fh.write(f"{n},{batch.block_id},{x:.17g}\n")
        written.append(name)
    _write_manifest(out, data.config_hash, "simulate", written)
    _write_meta(out, "simulate", time.perf_counter() - t0)
    print(f"{len(table.outcomes())} outcome files written to {out}")
    return 0


def _load_outcome_dir(path: str) -> OutcomeTable:
    names = sorted(glob.glob(os.path.join(path, "outcome_*.json")))
    if not names:
        raise IncompleteDataError([], f"no outcome_*.json files found in {path}")
    docs = []
    for name in names:
        with open(name, "r", encoding="utf-8") as fh:
            docs.append(json.load(fh))
    return OutcomeTable.from_json_docs(docs)


def cmd_reconstruct(args) -> int:
    doc = load_config(args.config)
    cfg = build_experiment_config(doc, args)
    out = _out_dir(doc, args)
    t0 = time.perf_counter()
    if args.data is not None:
        table = _load_outcome_dir(args.data)
        report = reconstruct(table, cfg)
    else:
        data = run_experiment(cfg)
        report = reconstruct(data, cfg)
    report.save(os.path.join(out, "report.json"))
    write_matrix_csv(os.path.join(out, "G_hat.csv"), report.g_hat, report.g_sigma)
    write_matrix_csv(os.path.join(out, "L_hat.csv"), report.l_hat, report.l_sigma)
    write_matrix_csv(os.path.join(out, "L_theory.csv"), report.l_theory)
    write_matrix_csv(os.path.join(out, "z.csv"), report.z)
    written = ["report.json", "G_hat.csv", "L_hat.csv", "L_theory.csv", "z.csv"]
    _write_manifest(out, report.config_hash, "reconstruct", written)
    _write_meta(out, "reconstruct", time.perf_counter() - t0)
    s = report.summary
    print(f"L extraction: {report.l_method} (sigma via {report.l_sigma_method})")
    print(f"guarded-block RMSE: {s['rmse_guarded']:.6g}")
    print(f"fraction |z| <= 3:  {s['frac_abs_z_le_3']:.4f}")
    print(f"off-tridiagonal consistency p: {s['off_tridiagonal']['fisher_p']:.4g}")
    return 0


def cmd_compare(args) -> int:
    with open(args.report, "r", encoding="utf-8") as fh:
        report = json.load(fh)
    l_theory, _ = read_matrix_csv(args.theory)
    l_hat = np.asarray(report["l_hat"]["values"], dtype=float)
    sigma = np.asarray(report["l_hat"]["sigma"], dtype=float)
    rd = report["geometry"]["report_dim"]
    dof = None
    if report["l_hat"]["sigma_method"] == "blocks":
        dof = report["geometry"]["blocks"] - 1
    comparison = compare_block(l_hat[:rd, :rd], sigma[:rd, :rd],
                               l_theory[:rd, :rd], sigma_dof=dof)
    summary = {k: v for k, v in comparison.items() if k != "z"}
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8",
              newline="\n") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1, default=float)
        fh.write("\n")
    print(f"RMSE over {rd}x{rd} block: {summary['rmse']:.6g}")
    print(f"max |z|: {summary['max_abs_z']:.4g}")
    print(f"fraction |z| <= 3: {summary['frac_abs_z_le_3']:.4f}")
    print(f"off-tridiagonal consistency p: "
          f"{summary['off_tridiagonal']['fisher_p']:.4g}")
    return 0


def cmd_patterns(args) -> int:
    if args.n_max < 0 or args.points < 2:
        raise ConfigError("need n_max >= 0 and points >= 2")
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    basis = pattern_basis(args.n_max)
    x_max = args.x_max if args.x_max is not None else np.sqrt(2 * args.n_max + 1) + 5
    xs = np.linspace(-x_max, x_max, args.points)
    table = np.stack([basis.evaluate(n, xs) for n in range(args.n_max + 1)])
    path = os.path.join(out, "patterns.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("x," + ",".join(f"f_{n}" for n in range(args.n_max + 1)) + "\n")
        for i, x in enumerate(xs):
            row = ",".join(format(table[n, i], ".17g") for n in range(args.n_max + 1))
            fh.write(f"{x:.17g},{row}\n")
    vac = wavefunctions_upto(0, xs)[0] ** 2
    check = np.trapezoid(table[0] * vac, xs)
    print(f"patterns written to {path}")
    print(f"spot check: integral of f_0 against the vacuum = {check:.8f} (expect 1)")
    return 0


# ---------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="liouvtomo",
        description="Simulate and reconstruct diagonal-sector Liouvillians of "
                    "phase-insensitive optical devices.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--workers", type=int,
                       help=f"worker threads (default: config, then ${WORKERS_ENV})")

    p = sub.add_parser("theory", help="write theoretical device matrices")
    common(p)
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("simulate", help="generate conditioned homodyne datasets")
    common(p)
    p.add_argument("--dump-raw", action="store_true",
                   help="also write raw quadratures (large)")
    p.add_argument("--paper-scale", action="store_true",
                   help="lift the desk-scale data-volume cap")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="run the estimator pipeline")
    common(p)
    p.add_argument("--data", help="dataset directory from `simulate`; when "
                                  "omitted, simulate in-process first")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("compare", help="score a report against a theory matrix")
    p.add_argument("--report", required=True, help="report.json from `reconstruct`")
    p.add_argument("--theory", required=True, help="theory Liouvillian CSV")
    p.add_argument("--out", help="output directory for summary.json")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("patterns", help="dump pattern functions for plotting")
    p.add_argument("--n-max", type=int, required=True)
    p.add_argument("--x-max", type=float)
    p.add_argument("--points", type=int, default=2001)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_patterns)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except IncompleteDataError as exc:
        print(f"incomplete data: {exc}", file=sys.stderr)
        return 3
    except (BranchFailureError, IntegrationError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
