"""Batch runner: ``poissonmfg <subcommand> config.json [--seed S] [--out DIR] [--threads T]``.

One JSON config per run. Outputs land in ``<out>/<run_id>/`` with a
manifest.json listing every file's sha256. The run id is a digest of the
subcommand, config and seed, so reruns overwrite the same directory with
identical bytes. Exit codes: 0 ok, 2 invalid config, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from pathlib import Path

SUBCOMMANDS = ("simulate-pp", "simulate-mkv", "solve-mfg", "audit", "check-monotone", "nplayer")
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
DEFAULTS = {"N": 2000, "K_steps": 200, "iterations": 20, "damping": 1.0, "tolerance": 0.05}


class ConfigError(Exception):
    def __init__(self, errors):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def load_config(path, seed=None, out=None) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
    if not isinstance(cfg, dict):
        raise ConfigError(["config must be a JSON object"])
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["output"] = out
    errors = []
    s = cfg.get("seed")
    if s is None:
        errors.append("seed missing: give it in the config or with --seed")
    elif isinstance(s, bool) or not isinstance(s, int) or not 0 <= s < 2**64:
        errors.append(f"seed must be a 64-bit unsigned integer, got {s!r}")
    for key, default in DEFAULTS.items():
        cfg.setdefault(key, default)
    if not isinstance(cfg["N"], int) or cfg["N"] < 2:
        errors.append(f"N must be an integer >= 2, got {cfg['N']!r}")
    if not isinstance(cfg["K_steps"], int) or cfg["K_steps"] < 1:
        errors.append(f"K_steps must be a positive integer, got {cfg['K_steps']!r}")
    if not isinstance(cfg["iterations"], int) or cfg["iterations"] < 1:
        errors.append(f"iterations must be a positive integer, got {cfg['iterations']!r}")
    if not isinstance(cfg["tolerance"], (int, float)) or not cfg["tolerance"] > 0:
        errors.append(f"tolerance must be positive, got {cfg['tolerance']!r}")
    if not isinstance(cfg["damping"], (int, float)) or not 0 < cfg["damping"] <= 1:
        errors.append(f"damping must lie in (0, 1], got {cfg['damping']!r}")
    if errors:
        raise ConfigError(errors)
    return cfg


def run_id(subcommand: str, cfg: dict) -> str:
    payload = {k: v for k, v in cfg.items() if k != "output"}
    return f"{subcommand}-{_sha256(_dump_json(payload).encode())[:12]}"


# ---------------------------------------------------------------------------
# model construction


def build_model(cfg: dict):
    from .models import LqModel, LqParams, PortfolioModel, PortfolioParams

    section = cfg.get("model", {"lq": {}})
    if not isinstance(section, dict) or len(section) != 1:
        raise ConfigError(["model section must hold exactly one of 'lq' or 'portfolio'"])
    (name, params), = section.items()
    if name == "lq":
        model = LqModel(LqParams.from_config(params))
    elif name == "portfolio":
        p = PortfolioParams.from_config(params)
        env = None
        if p.env_source == "lq":
            from .mfg_solver import solve_mfg

            lq = LqModel(LqParams.from_config(cfg.get("lq_environment", {})))
            env = solve_mfg(lq, cfg["N"], cfg["iterations"], cfg["damping"], cfg["tolerance"], cfg["seed"],
                            steps=cfg["K_steps"], monotonicity_samples=1000).flow
        model = PortfolioModel(p, env, steps=cfg["K_steps"])
    else:
        raise ConfigError([f"unknown model {name!r}; expected 'lq' or 'portfolio'"])
    problems = model.validate()
    if problems:
        raise ConfigError(problems)
    return model


def _policy(model, cfg):
    """Equilibrium policy for the simulation subcommands: solved unless a constant is configured."""
    from .mfg_solver import solve_mfg
    from .policies import ConstantPolicy

    if "constant_action" in cfg:
        return ConstantPolicy(cfg["constant_action"])
    report = solve_mfg(model, cfg["N"], cfg["iterations"], cfg["damping"], cfg["tolerance"], cfg["seed"],
                       steps=cfg["K_steps"], monotonicity_samples=1000)
    return report.policy


# ---------------------------------------------------------------------------
# subcommands; each returns {file name: bytes or writer(path)}


def _csv_writer(obj, method="to_csv", **kw):
    return lambda path: getattr(obj, method)(path, **kw)


def cmd_simulate_pp(cfg: dict) -> dict:
    import numpy as np
    from scipy import stats

    from .measures import EmpiricalMeasure, MeasureFlow, write_csv
    from .point_process import (ConstantIntensity, HawkesIntensity, HawkesParams, make_kernel,
                                pooled_residuals, simulate_marked_process)
    from .rng import child_seed

    pp = dict(cfg.get("point_process", {}))
    kind = pp.get("kind", "constant")
    T = float(pp.get("horizon", 5.0))
    paths = int(pp.get("paths", 1000))
    if not T > 0 or paths < 1:
        raise ConfigError(["point_process needs horizon > 0 and paths >= 1"])
    env = None
    if kind == "constant":
        intensity = ConstantIntensity(pp.get("rate", 2.0))
    elif kind == "hawkes":
        hp = HawkesParams(float(pp.get("lambda0", 1.0)), float(pp.get("psi1", 0.0)), float(pp.get("r", 1.0)),
                          make_kernel(pp.get("psi2", {"kind": "zero"})))
        intensity = HawkesIntensity(hp, T)
        env = MeasureFlow.constant(np.array([0.0, T]), EmpiricalMeasure(np.atleast_1d(pp.get("env_atoms", [0.0]))))
    else:
        raise ConfigError([f"unknown point_process kind {kind!r}"])
    logs = [simulate_marked_process(intensity, env, T, child_seed(cfg["seed"], "pp", i)) for i in range(paths)]
    counts = np.array([len(log.times) for log in logs])
    first = logs[0]
    resid = np.concatenate(pooled_residuals(logs, intensity, env))
    ks = stats.kstest(resid, "expon") if resid.size else None
    report = {"kind": kind, "horizon": T, "paths": paths, "mean_count": float(counts.mean()),
              "count_std": float(counts.std(ddof=1)) if paths > 1 else 0.0, "n_residuals": len(resid),
              "ks_statistic": None if ks is None else float(ks.statistic),
              "ks_pvalue": None if ks is None else float(ks.pvalue)}
    return {"report.json": _dump_json(report).encode(),
            "events.csv": _csv_writer(first),
            "counts.csv": lambda p: write_csv(p, ["path", "count"], np.column_stack([np.arange(paths), counts]))}


def cmd_simulate_mkv(cfg: dict) -> dict:
    import numpy as np

    from .jump_sde import evaluate_costs
    from .particles import simulate_conditional_mkv

    model = build_model(cfg)
    policy = _policy(model, cfg)
    ens = simulate_conditional_mkv(model, policy, cfg["N"], seed=cfg["seed"], steps=cfg["K_steps"])
    costs = evaluate_costs(model, ens)
    report = {"N": ens.N, "K_steps": ens.K, "common_events": len(ens.log.times),
              "cost_mean": float(costs.mean()), "cost_std": float(costs.std(ddof=1) / np.sqrt(ens.N)),
              "policy": policy.describe()["kind"]}
    files = {"report.json": _dump_json(report).encode(), "flow.csv": _csv_writer(ens.flow),
             "summary.csv": _csv_writer(ens, "summary_csv"), "events.csv": _csv_writer(ens.log)}
    if cfg.get("trajectories", False):
        files["trajectories.csv"] = _csv_writer(ens, "trajectories_csv")
    return files


def cmd_solve_mfg(cfg: dict) -> dict:
    from .mfg_solver import solve_mfg

    model = build_model(cfg)
    report = solve_mfg(model, cfg["N"], cfg["iterations"], cfg["damping"], cfg["tolerance"], cfg["seed"],
                       steps=cfg["K_steps"], inner_sweeps=int(cfg.get("inner_sweeps", 1)))
    return {"report.json": _dump_json(report.to_dict()).encode(), "flow.csv": _csv_writer(report.flow),
            "events.csv": _csv_writer(report.log)}


def cmd_audit(cfg: dict) -> dict:
    from .measures import MeasureFlow
    from .mfg_solver import MfgEquilibriumReport, optimality_audit, solve_mfg

    model = build_model(cfg)
    section = cfg.get("audit", {})
    source = section.get("report_dir")
    if source:
        src = Path(source)
        try:
            data = json.loads((src / "report.json").read_text())
            flow = MeasureFlow.from_csv(src / "flow.csv")
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError([f"cannot load saved report from {src}: {exc}"]) from exc
        report = MfgEquilibriumReport.from_dict(model, data, flow)
    else:
        report = solve_mfg(model, cfg["N"], cfg["iterations"], cfg["damping"], cfg["tolerance"], cfg["seed"],
                           steps=cfg["K_steps"], monotonicity_samples=1000)
    table = optimality_audit(model, report, int(section.get("n_spikes", 50)), int(section.get("n_paths", cfg["N"])),
                             cfg["seed"], float(section.get("eps", 0.05)))
    out = table.to_dict()
    out["converged"] = report.converged
    return {"report.json": _dump_json(out).encode()}


def cmd_check_monotone(cfg: dict) -> dict:
    from .adjoint import check_g_monotonicity

    model = build_model(cfg)
    samples = int(cfg.get("monotone", {}).get("samples", 100_000))
    rep = check_g_monotonicity(model, samples, cfg["seed"])
    return {"report.json": _dump_json(rep.to_dict()).encode()}


def cmd_nplayer(cfg: dict) -> dict:
    import numpy as np

    from .measures import write_csv
    from .particles import chaos_gap, simulate_conditional_mkv, simulate_nplayer
    from .rng import child_seed

    model = build_model(cfg)
    section = cfg.get("nplayer", {})
    n_values = [int(n) for n in section.get("n_values", [10, 100, 1000])]
    seeds = int(section.get("seeds", 5))
    ref_n = int(section.get("reference_N", 10_000))
    if any(n < 2 for n in n_values) or seeds < 1 or ref_n < 2:
        raise ConfigError(["nplayer needs n_values >= 2, seeds >= 1 and reference_N >= 2"])
    policy = _policy(model, cfg)
    common = child_seed(cfg["seed"], "nplayer-common")
    ref = simulate_conditional_mkv(model, policy, ref_n, seed=child_seed(cfg["seed"], "reference"),
                                   common_seed=common, steps=cfg["K_steps"]).flow
    rows = []
    for s in range(seeds):
        for n in n_values:
            ens = simulate_nplayer(model, policy, n, child_seed(cfg["seed"], "players", s), common, cfg["K_steps"])
            rows.append([n, s, chaos_gap(ens, ref)])
    rows = np.array(rows, dtype=float)
    means = {str(n): float(rows[rows[:, 0] == n, 2].mean()) for n in n_values}
    return {"chaos.csv": lambda p: write_csv(p, ["n", "seed", "chaos_gap"], rows),
            "report.json": _dump_json({"reference_N": ref_n, "seeds": seeds, "mean_gap": means}).encode()}


COMMANDS = {"simulate-pp": cmd_simulate_pp, "simulate-mkv": cmd_simulate_mkv, "solve-mfg": cmd_solve_mfg,
            "audit": cmd_audit, "check-monotone": cmd_check_monotone, "nplayer": cmd_nplayer}


def _versions() -> dict:
    from importlib import metadata

    import numpy
    import scipy

    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": numpy.__version__, "scipy": scipy.__version__,
            "poissonmfg": pkg}


def run(subcommand: str, cfg: dict, threads: int | None = None) -> Path:
    """Execute one subcommand and write its outputs plus the manifest; returns the run directory."""
    rid = run_id(subcommand, cfg)
    outdir = Path(cfg.get("output", "out")) / rid
    files = COMMANDS[subcommand](cfg)
    outdir.mkdir(parents=True, exist_ok=True)
    digests = {}
    for name in sorted(files):
        path = outdir / name
        content = files[name]
        if isinstance(content, bytes):
            path.write_bytes(content)
        else:
            content(path)
        digests[name] = _sha256(path.read_bytes())
    config_payload = {k: v for k, v in cfg.items() if k != "output"}
    manifest = {"run_id": rid, "subcommand": subcommand, "seed": cfg["seed"],
                "config_sha256": _sha256(_dump_json(config_payload).encode()), "threads": threads,
                "versions": _versions(), "files": digests}
    (outdir / "manifest.json").write_text(_dump_json(manifest))
    return outdir


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poissonmfg", description=__doc__.splitlines()[0])
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("config", help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("--threads", type=int, default=None, help="cap on BLAS/worker threads")
    return parser


def _fail(code: int, errors) -> int:
    sys.stderr.write(json.dumps({"exit_code": code, "errors": list(errors)}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            return _fail(2, ["--threads must be positive"])
        for var in THREAD_VARS:
            os.environ[var] = str(args.threads)
    from .errors import DegenerateBasis, InvalidInput, InvalidParameter, NumericalBlowup, SimulationFault

    try:
        cfg = load_config(args.config, args.seed, args.out)
        outdir = run(args.subcommand, cfg, args.threads)
    except ConfigError as exc:
        return _fail(2, exc.errors)
    except (InvalidParameter, InvalidInput, KeyError, TypeError, ValueError) as exc:
        return _fail(2, [f"{type(exc).__name__}: {exc}"])
    except (NumericalBlowup, SimulationFault, DegenerateBasis, FloatingPointError, OverflowError) as exc:
        return _fail(3, [f"{type(exc).__name__}: {exc}"])
    print(outdir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
