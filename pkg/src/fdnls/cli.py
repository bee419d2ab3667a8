"""Command-line runner: ``fdnls {evolve,sde,stationary,sweep,growth,verify,replay}``.

Exit codes: 1 configuration error, 2 runtime failure, 3 I/O failure.
Every command writes its outputs atomically into the output directory and
finishes with ``manifest.json`` holding the resolved configuration and the
SHA-256 of each output, so a run can be replayed and compared bit for bit.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import config as config_mod
from .config import ConfigError, ExperimentConfig
from .flows import IntegrationError, PicardDivergence, evolve, mass_drift, trajectory_csv
from .inequalities import (
    RandomFieldLaw,
    check_cordoba,
    check_lemsob,
    cordoba_gap_gradient,
    lemsob_stable,
    phi_build,
    phi_convexity_defect,
    phi_eval,
    phi_star_eval,
)
from .measure import (
    bk_sample,
    check_stationary_energy,
    check_stationary_mass,
    growth_delays,
    growth_set_fraction,
    invariance_test,
    large_data_tail,
    log_linear_fit,
    stationary_dt_bias,
)
from .reports import config_hash, to_json
from .sde import ensemble_manifest, ensemble_terminals, terminal_checkpoints, terminal_csv
from .spectral import FieldRangeError, basis, field_to_bytes, random_field, zeros

EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 1, 2, 3


def _fmt(x) -> str:
    return format(float(x), ".17g")


class Outputs:
    """Collects files for one run and writes them atomically."""

    def __init__(self, root: Path):
        self.root = root
        self.hashes: dict[str, str] = {}

    def write(self, name: str, data: bytes | str) -> Path:
        if isinstance(data, str):
            data = data.encode("utf-8")
        target = self.root / name
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        self.hashes[name] = hashlib.sha256(data).hexdigest()
        return target

    def manifest(self, command: str, cfg: ExperimentConfig, extra: dict | None = None) -> None:
        doc = {
            "command": command,
            "version": __version__,
            "config": cfg.as_dict(),
            "config_hash": config_hash(cfg.content_dict()),
            "outputs": dict(sorted(self.hashes.items())),
            **(extra or {}),
        }
        self.write("manifest.json", to_json(doc) + "\n")


def _initial(cfg: ExperimentConfig):
    spec = cfg.torus_spec()
    ini = cfg.run.initial
    if ini.kind == "zero":
        return zeros(spec)
    if ini.kind == "mode":
        return basis(spec, ini.k, ini.amplitude)
    rng = np.random.default_rng(ini.seed)
    return random_field(spec, rng, decay=ini.decay, amplitude=ini.amplitude, cutoff=ini.cutoff)


# -- commands -----------------------------------------------------------------

def cmd_evolve(cfg: ExperimentConfig, out: Outputs) -> dict:
    flow = cfg.flow_config()
    u0 = _initial(cfg)
    traj = evolve(u0, cfg.run.horizon, flow, record_every=cfg.run.thinning,
                  provenance={"config_hash": config_hash(cfg.content_dict())})
    out.write("trajectory.csv", trajectory_csv(traj, flow.alpha, flow.beta, cfg.report.r_list))
    if cfg.report.checkpoints:
        for i in range(len(traj)):
            out.write(f"checkpoints/t{i:06d}.fdnl", field_to_bytes(traj.field(i)))
    drift = mass_drift(traj)
    summary = {"mass_drift": drift, "projected_mass_loss": traj.diagnostics["projected_mass_loss"],
               "steps": traj.diagnostics["steps"], "critical_regime": flow.critical_regime(cfg.torus.d)}
    print(f"mass drift (relative) {drift:.3e}; projected-out mass {summary['projected_mass_loss']:.3e}")
    return summary


def cmd_sde(cfg: ExperimentConfig, out: Outputs) -> dict:
    sc = cfg.sde_config()
    recs = ensemble_terminals(sc, cfg.run.ensemble, cfg.run.horizon, threads=cfg.run.threads)
    out.write("terminal.csv", terminal_csv(recs))
    ck = terminal_checkpoints(sc, recs)
    if cfg.report.checkpoints:
        for tid, data in sorted(ck.items()):
            out.write(f"checkpoints/path{tid:06d}.fdnl", data)
    man = ensemble_manifest(sc, cfg.run.ensemble, cfg.run.horizon, ck)
    out.write("ensemble.json", to_json(man) + "\n")
    print(f"{len(recs)} paths to t={cfg.run.horizon}; A0={sc.noise.A(0.0):.6g}")
    return {"A0": sc.noise.A(0.0)}


def _stationary_reports(cfg: ExperimentConfig, sc=None, horizon=None):
    sc = sc or cfg.sde_config()
    horizon = horizon or cfg.run.horizon
    ms = bk_sample(sc, horizon, stride=cfg.run.thinning, burn_in=cfg.run.burn_in, n_paths=cfg.run.ensemble,
                   threads=cfg.run.threads)
    bias = 0.0
    if cfg.run.dt_bias_horizon > 0:
        bias = stationary_dt_bias(sc, cfg.run.dt_bias_horizon, burn_in=cfg.run.burn_in)["allowance"]
    return ms, check_stationary_mass(ms, sc, bias), check_stationary_energy(ms, sc)


def cmd_stationary(cfg: ExperimentConfig, out: Outputs) -> dict:
    sc = cfg.sde_config()
    ms, rm, re_ = _stationary_reports(cfg, sc)
    reports = [rm, re_]
    if cfg.run.invariance_time > 0:
        obs = [o for o in cfg.report.observables if o in ("mass", "energy", "hr_sq", "mcal")]
        reports += invariance_test(ms, sc, cfg.run.invariance_time, obs, r=cfg.report.r_list[0],
                                   max_samples=cfg.run.invariance_samples)
    doc = {"config": cfg.content_dict(), "A0_target": rm.target, "reports": [r.as_dict() for r in reports]}
    out.write("report.json", to_json(doc) + "\n")
    for r in reports:
        flag = "n/a" if r.passed is None else ("pass" if r.passed else "FAIL")
        print(f"{r.name:28s} {r.estimate: .6e} +- {r.se:.2e}  {flag}")
    return {"passed": all(r.passed is not False for r in reports)}


def cmd_sweep(cfg: ExperimentConfig, out: Outputs) -> dict:
    axis = cfg.sweep.axis
    rows = []
    header = ["sigma", "N", "scale_n", "A0_target", "forcing", "mcal_estimate", "mcal_se", "mass_pass",
              "energy_ratio", "energy_ratio_se", "large_data_tail"]
    for value in cfg.sweep.values:
        cell = cfg
        horizon = cfg.run.horizon
        if axis == "sigma":
            cell = replace(cfg, noise=replace(cfg.noise, sigma=float(value)))
            if cfg.sweep.horizon_scaling and value > 0:
                horizon = cfg.run.horizon * (cfg.noise.sigma / float(value)) ** 2
        elif axis == "n_modes":
            cell = replace(cfg, torus=replace(cfg.torus, N=int(value)))
        else:
            cell = replace(cfg, noise=replace(cfg.noise, scale_n=float(value)))
        sc = cell.sde_config()
        ms, rm, re_ = _stationary_reports(cell, sc, horizon)
        tail, _ = large_data_tail(ms, 1.0, cell.flow.s)
        a0 = sc.noise.A(0.0)
        rows.append([sc.sigma, sc.spec.N, cell.noise.scale_n, 0.5 * a0, 0.5 * sc.sigma**2 * a0, rm.estimate, rm.se,
                     int(bool(rm.passed)), re_.details["ratio"], re_.details["ratio_se"], tail])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) if isinstance(x, float) else x for x in r])
    out.write("sweep.csv", buf.getvalue())
    ratios = [r[8] for r in rows if r[8] > 0]
    spread = max(ratios) / min(ratios) if ratios else 1.0
    print(f"{len(rows)} cells along {axis}; energy ratio spread {spread:.3f}")
    return {"energy_ratio_spread": spread}


def cmd_growth(cfg: ExperimentConfig, out: Outputs) -> dict:
    sc = cfg.sde_config()
    ms = bk_sample(sc, cfg.run.horizon, stride=cfg.run.thinning, burn_in=cfg.run.burn_in,
                   n_paths=cfg.run.ensemble, threads=cfg.run.threads)
    gcfg = replace(sc, flow=replace(sc.flow, dt=cfg.growth.dt))
    g = cfg.growth
    delays, margins = growth_delays(ms, gcfg, g.r, g.horizon, record_every=g.record_every, max_samples=g.samples,
                                    return_margins=True)
    frac = growth_set_fraction(delays, list(g.i_values))
    fit = log_linear_fit(g.i_values, frac)
    fit["margin_quantiles"] = {str(q): float(np.quantile(margins, q)) for q in (0.0, 0.5, 0.9, 0.99, 1.0)}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["i", "fraction", "n_samples"])
    for i, f in zip(g.i_values, frac):
        w.writerow([i, _fmt(f), len(delays)])
    out.write("growth.csv", buf.getvalue())
    out.write("growth_fit.json", to_json({"config": cfg.content_dict(), "fit": fit}) + "\n")
    print("fractions " + " ".join(f"{f:.4f}" for f in frac) + f"; log-slope {fit['slope']:.3f}")
    return {"fit": fit}


def cmd_verify(cfg: ExperimentConfig, out: Outputs) -> dict:
    v = cfg.verify
    law = RandomFieldLaw(N_f=v.N_f, decay=v.decay, amplitude=v.amplitude, seed=v.seed, d=cfg.torus.d)
    lem = check_lemsob(law, v.s, v.beta, v.trials)
    stab = lemsob_stable(lem)
    cordoba = []
    rlaw = RandomFieldLaw(N_f=v.N_f, decay=v.decay, amplitude=v.amplitude, real=True, seed=v.seed + 1,
                          d=cfg.torus.d)
    rng = rlaw.rng()
    for gamma in v.gammas:
        explore = gamma > 1
        gaps = [check_cordoba(rlaw.sample(rng), gamma, explore=explore) for _ in range(v.cordoba_trials)]
        worst = min(gaps, key=lambda r: r["gap"])
        entry = {"gamma": gamma, "normative": not explore, "min_gap": worst["gap"],
                 "tol_disc_at_min": worst["tol_disc"], "all_pass": all(r["passed"] for r in gaps),
                 "trials": len(gaps)}
        if gamma == 1.0:
            f = rlaw.sample(rng)
            entry["two_route_difference"] = abs(check_cordoba(f, 1.0)["gap"] - cordoba_gap_gradient(f))
        cordoba.append(entry)
    phi = phi_build(v.phi_b, v.phi_c)
    us = np.array([0.1, 0.5, 1.0, 2.0])
    fe = [abs(phi_eval(phi, float(phi.f(u))) / (v.phi_c * u * float(phi.f(u))) - 1.0) for u in us]
    xs = np.linspace(0.0, 10.0, 50)
    ys = np.linspace(0.0, 10.0, 50)
    stars = np.array([phi_star_eval(phi, y) for y in ys])
    young = float(np.max(xs[:, None] * ys[None, :] - phi_eval(phi, xs)[:, None] - stars[None, :]))
    lem_ok = all(stab["stable"].values())
    normative_ok = all(c["all_pass"] for c in cordoba if c["normative"])
    doc = {
        "config": cfg.content_dict(),
        "lemsob": {"maxima": stab["full"], "half_maxima": stab["half"], "stable": stab["stable"]},
        "cordoba": cordoba,
        "phi": {"functional_equation_max_rel_err": max(fe), "young_max_violation": young,
                "convexity_min_second_difference": phi_convexity_defect(phi)},
        "passed": bool(lem_ok and normative_ok and max(fe) <= 1e-10 and young <= 1e-10),
        "exploration": any(not c["normative"] for c in cordoba),
    }
    out.write("verify.json", to_json(doc) + "\n")
    print(f"verify: {'pass' if doc['passed'] else 'FAIL'}" + (" (exploration results non-normative)"
                                                              if doc["exploration"] else ""))
    return {"passed": doc["passed"]}


COMMANDS = {
    "evolve": cmd_evolve,
    "sde": cmd_sde,
    "stationary": cmd_stationary,
    "sweep": cmd_sweep,
    "growth": cmd_growth,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fdnls", description="Fractional NLS fluctuation-dissipation laboratory")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="YAML configuration file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path, help="output directory")
        sp.add_argument("--threads", type=int)
        sp.add_argument("--scale-n", dest="scale_n", type=float)
        if name == "sweep":
            sp.add_argument("--axis", choices=("sigma", "n_modes", "scale_n"))
        if name == "verify":
            sp.add_argument("--gamma", type=float, action="append", help="Cordoba exponent (repeatable)")
    rp = sub.add_parser("replay", help="rerun a manifest and compare output hashes")
    rp.add_argument("manifest", type=Path)
    rp.add_argument("--out", type=Path, required=True)
    rp.add_argument("--threads", type=int)
    return p


def run(command: str, cfg: ExperimentConfig) -> tuple[dict, Outputs]:
    out = Outputs(Path(cfg.report.output_dir))
    summary = COMMANDS[command](cfg, out)
    out.manifest(command, cfg, {"summary": summary})
    return summary, out


def _replay(args) -> int:
    try:
        doc = json.loads(args.manifest.read_text(encoding="utf-8"))
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if doc.get("command") not in COMMANDS:
        print("config error: manifest has no runnable command", file=sys.stderr)
        return EXIT_CONFIG
    cfg = config_mod.from_dict(doc["config"])
    cfg = config_mod.override(cfg, out=args.out, threads=args.threads)
    _, out = run(doc["command"], cfg)
    expected = doc.get("outputs", {})
    mismatched = sorted(k for k, h in expected.items() if k != "manifest.json" and out.hashes.get(k) != h)
    if mismatched:
        print(f"replay differs in {len(mismatched)} file(s): {', '.join(mismatched[:5])}")
        return EXIT_RUNTIME
    print(f"replay identical: {len(expected)} file(s)")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "replay":
            return _replay(args)
        cfg = config_mod.load(args.config) if args.config else ExperimentConfig()
        if args.command == "sweep" and args.axis:
                    cfg = replace(cfg, sweep=replace(cfg.sweep, axis=args.axis))
        cfg = config_mod.override(cfg, seed=args.seed, threads=args.threads, scale_n=args.scale_n, out=args.out,
                                  gamma=getattr(args, "gamma", None))
        run(args.command, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (IntegrationError, PicardDivergence, FieldRangeError, FloatingPointError, ArithmeticError,
            ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
