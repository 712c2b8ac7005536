"""Command-line front end: ``ripzeno <command> [--preset NAME | --config PATH] ...``.

Every run writes its table (CSV or JSON) and then a manifest
``<out>.manifest.json`` holding the config echo, package version, wall-clock
duration, derived quantities and SHA-256 checksums of the outputs. Exit
codes: 0 success, 2 config error, 3 numerical-contract failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import tempfile
import time
import warnings
from pathlib import Path

import numpy as np
from scipy.integrate import trapezoid

from . import __version__
from . import config as cfgmod
from .config import RunConfig
from .dynamics import Variant, propagate, recombination_yields
from .errors import ConfigError, NumericalContractError
from .models import RipModel
from .spectra import min_nonzero_rate, zeno_scan
from .trajectories import (
    check_dt,
    correlation_analytic,
    correlation_mc,
    ensemble_average,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class Table:
    """Column-oriented result table; ``columns`` maps name -> sequence."""

    def __init__(self, columns: dict):
        lengths = {len(v) for v in columns.values()}
        if len(lengths) > 1:
            raise ValueError(f"ragged table columns: {lengths}")
        self.columns = columns

    @property
    def n_rows(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x) + 0.0, ".17g")  # + 0.0 folds -0 into 0


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    return x


def render(table: Table, fmt: str) -> bytes:
    if fmt == "csv":
        names = list(table.columns)
        lines = [",".join(names)]
        cols = [table.columns[n] for n in names]
        for i in range(table.n_rows):
            lines.append(",".join(_fmt(c[i]) for c in cols))
        return ("\n".join(lines) + "\n").encode("utf-8")
    payload = {"columns": list(table.columns), "data": _jsonable(table.columns)}
    return (json.dumps(payload, indent=1, allow_nan=False) + "\n").encode("utf-8")


def write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def manifest_path(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def _initial_rho(model: RipModel, kind: str):
    if kind == "singlet":
        return model.singlet_state()
    if kind == "triplet":
        return model.q_t / np.trace(model.q_t).real
    return np.eye(model.dim, dtype=complex) / model.dim


def _initial_psi(model: RipModel, kind: str):
    _, v = np.linalg.eigh(model.q_s)
    n_s = int(round(np.trace(model.q_s).real))
    singlet = v[:, -1]
    triplet = v[:, model.dim - n_s - 1]
    if kind == "singlet":
        return singlet
    if kind == "triplet":
        return triplet
    return (singlet + triplet) / math.sqrt(2)


def cmd_spectrum(cfg: RunConfig):
    model = cfg.model.build()
    ks = cfg.spectrum.grid()
    scan = zeno_scan(model, cfg.variant, ks, threads=cfg.threads)
    cols = {"k": [], "mode": [], "lambda": [], "omega_e": [], "classification": []}
    for k, modes in zip(scan.k_values, scan.modes_per_k):
        for j, m in enumerate(modes):
            cols["k"].append(k)
            cols["mode"].append(j)
            cols["lambda"].append(m.lam)
            cols["omega_e"].append(m.omega_e)
            cols["classification"].append(m.classification)
    derived = {
        "k_max": float(ks[-1]),
        "lambda_qz_at_k_max": float(scan.lambda_qz_per_k[-1]),
        "lambda_qz": [float(x) for x in scan.lambda_qz_per_k],
        "n_ambiguous_k": int(sum(any(m.classification == "ambiguous" for m in ms) for ms in scan.modes_per_k)),
    }
    if cfg.model.kind == "toy" and ks[-1] > 0:
        big_omega = cfg.model.params.get("Omega", 1.0)
        if big_omega:
            derived["zeno_asymptote_ratio_at_k_max"] = float(scan.lambda_qz_per_k[-1] * ks[-1] / (4 * big_omega**2))
    return Table(cols), derived, {}


def cmd_propagate(cfg: RunConfig):
    base = cfg.model.build()
    p = cfg.propagate
    ks = p.k_values if p.k_values is not None else [base.k]
    cols = {"k": [], "t": [], "qs": [], "trace": [], "purity": []}
    derived = {"series": []}
    for k in ks:
        model = base.with_rate(float(k))
        res = propagate(model, cfg.variant, _initial_rho(model, p.initial), p.t_max, dt_hint=p.dt_hint, n_points=p.n_points)
        cols["k"].extend([float(k)] * len(res.times))
        cols["t"].extend(res.times)
        cols["qs"].extend(res.singlet_prob)
        cols["trace"].extend(res.trace)
        cols["purity"].extend(res.purity)
        info = {
            "k": float(k),
            "internal_step": res.step,
            "step_halving_error": res.error_estimate,
            "final_qs": float(res.singlet_prob[-1]),
            "max_trace_deviation": float(np.abs(res.trace - res.trace[0]).max()),
        }
        if res.variant is Variant.HABERKORN:
            y_s, y_t = recombination_yields(res)
            info["singlet_yield"] = y_s
            info["triplet_yield"] = y_t
        derived["series"].append(info)
    return Table(cols), derived, {}


def cmd_trajectories(cfg: RunConfig, out: Path):
    model = cfg.model.build()
    t = cfg.trajectories
    check_dt(model, t.dt)
    psi0 = _initial_psi(model, t.initial)
    ens = ensemble_average(
        model,
        psi0,
        t.t_max,
        t.dt,
        t.n_traj,
        cfg.seed,
        record_every=t.record_every,
        absorbing=t.absorbing,
        scheme=t.scheme,
        threads=cfg.threads,
        keep_records=t.dump_trajectories,
    )
    n = len(ens.times)
    rho0 = np.outer(psi0, psi0.conj())
    if t.absorbing:
        # survival of the absorbing unraveling equals the Haberkorn trace with k_S = k
        ref_model = RipModel(model.space, model.hamiltonian, model.q_s, model.q_t, model.k, 0.0, model.label, model.params)
        ref = propagate(ref_model, Variant.HABERKORN, rho0, t.t_max, n_points=n)
        reference = ref.trace
        estimate = ens.survival
        se = np.sqrt(np.maximum(ens.survival * (1 - ens.survival), 0.0) / max(t.n_traj - 1, 1))
        ref_label = "reference_survival"
    else:
        ref = propagate(model, Variant.MEASUREMENT, rho0, t.t_max, n_points=n)
        reference = ref.singlet_prob
        estimate = ens.mean_qs
        se = ens.qs_stderr
        ref_label = "reference_qs"
    dev = np.abs(estimate - reference)
    bound = 5 * se + 1e-12
    rate = np.append(ens.mean_jump_rate, np.nan)
    rate_se = np.append(ens.jump_rate_stderr, np.nan)
    cols = {
        "t": ens.times,
        "mean_qs": ens.mean_qs,
        "qs_stderr": ens.qs_stderr,
        ref_label: reference,
        "deviation": dev,
        "bound_5se": bound,
        "jump_rate": rate,
        "jump_rate_stderr": rate_se,
        "survival": ens.survival,
    }
    counts = ens.jump_counts.astype(float)
    expected = 2 * model.k * float(trapezoid(ref.singlet_prob, ref.times)) if not t.absorbing else math.nan
    derived = {
        "max_deviation": float(np.nanmax(dev)),
        "within_5se": bool(np.all(dev <= bound)) if t.n_traj > 1 else None,
        "mean_jump_count": float(counts.mean()),
        "jump_count_stderr": float(counts.std(ddof=1) / math.sqrt(len(counts))) if len(counts) > 1 else None,
        "expected_jump_count": expected,
    }
    extra = {}
    if t.dump_trajectories:
        folder = out.with_name(out.stem + "_traj")
        for i, rec in enumerate(ens.records):
            tr = Table({"t": rec.times, "qs_expect": rec.qs_expect, "rc": rec.rc_samples})
            jt = Table({"jump_time": rec.jump_times})
            extra[folder / f"traj_{i:05d}.{cfg.output.format}"] = render(tr, cfg.output.format)
            extra[folder / f"jumps_{i:05d}.{cfg.output.format}"] = render(jt, cfg.output.format)
    return Table(cols), derived, extra


def cmd_correlation(cfg: RunConfig):
    model = cfg.model.build()
    c = cfg.correlation
    tau = c.tau_grid()
    ana = correlation_analytic(model, tau)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        mc = correlation_mc(
            model, c.t_burn, c.t_window, c.dt, c.n_traj, tau, cfg.seed, scheme=c.scheme, threads=cfg.threads
        )
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    with np.errstate(invalid="ignore", divide="ignore"):
        z = np.where(mc.stderr > 0, (mc.g - ana.projected) / mc.stderr, 0.0)
    cols = {
        "tau": tau,
        "G_analytic_literal": ana.literal,
        "G_analytic_projected": ana.projected,
        "G_mc": mc.g,
        "G_mc_stderr": mc.stderr,
    }
    derived = {
        "fraction_within_5sigma": float(np.mean(np.abs(z) <= 5)),
        "max_abs_z": float(np.max(np.abs(z))),
        "literal_spread": float(np.ptp(ana.literal)),
        "projected_long_time_limit": ana.long_time_limit,
        "mean_recombination_current": mc.mean_rc,
        "mean_recombination_current_stderr": mc.mean_rc_stderr,
        "burn_in_drift_z": mc.drift_z,
        "burn_in_ok": mc.stationary,
    }
    return Table(cols), derived, {}


def cmd_compare(cfg: RunConfig):
    model = cfg.model.build()
    ks = np.array(cfg.compare.k_values, dtype=float)
    meas = zeno_scan(model, Variant.MEASUREMENT, ks, threads=cfg.threads)
    hab = zeno_scan(model, Variant.HABERKORN, ks, threads=cfg.threads)
    lm = np.array([min_nonzero_rate(m) for m in meas.modes_per_k])
    lh = np.array([min_nonzero_rate(m) for m in hab.modes_per_k])
    cols = {"k": ks, "min_nonzero_lambda_measurement": lm, "min_nonzero_lambda_haberkorn": lh}
    derived = {}
    sel = (ks >= 10) & (ks <= 100)
    if sel.sum() >= 2:
        x, y = ks[sel], lh[sel]
        c = float(x @ y / (x @ x))
        ss_res = float(((y - c * x) ** 2).sum())
        ss_tot = float(((y - y.mean()) ** 2).sum())
        derived["haberkorn_proportional_fit_slope"] = c
        derived["haberkorn_proportional_fit_r2"] = 1 - ss_res / ss_tot if ss_tot > 0 else math.nan
        derived["haberkorn_increasing"] = bool(np.all(np.diff(y) > 0))
        derived["measurement_decreasing"] = bool(np.all(np.diff(lm[sel]) < 0))
    return Table(cols), derived, {}


def run(cfg: RunConfig, out: Path) -> dict:
    """Execute ``cfg``, write outputs and the manifest; return the manifest."""
    start = time.perf_counter()
    if cfg.command == "trajectories":
        table, derived, extra = cmd_trajectories(cfg, out)
    else:
        fn = {"spectrum": cmd_spectrum, "propagate": cmd_propagate, "correlation": cmd_correlation, "compare": cmd_compare}
        table, derived, extra = fn[cfg.command](cfg)
    files = {out: render(table, cfg.output.format)}
    files.update(extra)
    checksums = {}
    for path, data in files.items():
        write_atomic(path, data)
        checksums[str(path)] = hashlib.sha256(data).hexdigest()
    manifest = {
        "artifact_version": __version__,
        "command": cfg.command,
        "config": cfg.to_dict(),
        "duration_seconds": time.perf_counter() - start,
        "derived": _jsonable(derived),
        "outputs": checksums,
    }
    write_atomic(manifest_path(out), (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode("utf-8"))
    return manifest


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ripzeno", description="Radical-ion-pair recombination as continuous measurement.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("command", choices=cfgmod.COMMANDS)
    src = ap.add_mutually_exclusive_group()
    src.add_argument("--config", metavar="PATH", help="YAML run configuration")
    src.add_argument("--preset", metavar="NAME", help=f"built-in configuration: {', '.join(cfgmod.PRESETS)}")
    ap.add_argument("--out", metavar="PATH", help="output table path (default <command>.<format>)")
    ap.add_argument("--format", choices=cfgmod.FORMATS)
    ap.add_argument("--seed", type=int, metavar="N")
    ap.add_argument("--threads", type=int, metavar="N")
    ap.add_argument("--print-config", action="store_true", help="print the resolved config as YAML and exit")
    return ap


def resolve_config(args) -> RunConfig:
    if args.preset:
        cfg = cfgmod.preset(args.preset)
        if cfg.command != args.command:
            raise ConfigError(f"preset {args.preset!r} runs the {cfg.command!r} command, not {args.command!r}", "preset")
    elif args.config:
        cfg = cfgmod.load(args.config)
        cfg.command = args.command
    else:
        cfg = RunConfig(command=args.command)
    if args.format:
        cfg.output.format = args.format
    if args.out:
        cfg.output.path = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    if cfg.output.path is None:
        cfg.output.path = f"{cfg.command}.{cfg.output.format}"
    return cfgmod.validate(cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.print_config:
            sys.stdout.write(cfg.dumps())
            return EXIT_OK
        manifest = run(cfg, Path(cfg.output.path))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        # parameter contracts checked by the library before any work starts
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalContractError as exc:
        print(f"numerical contract failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    for path in manifest["outputs"]:
        print(path)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
