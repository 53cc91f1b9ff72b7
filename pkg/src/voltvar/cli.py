"""Command-line front end: file-mediated pipeline stages.

Typical run::

    voltvar synth --case 1 --out run
    voltvar build --feeder run/lines.csv --buses run/buses.csv --out run
    voltvar label --feeder run/lines.csv --buses run/buses.csv --profiles run/profiles.csv --out run
    voltvar train --feeder run/lines.csv --buses run/buses.csv --regime rpsc --out run
    voltvar train ... --phi-only
    voltvar certify --surrogate run/surrogate_rpsc.json --sensitivity run/sensitivity.json --out run
    voltvar simulate --feeder ... --buses ... --surrogate run/surrogate_rpsc.json --out run
    voltvar report --out run

Exit codes: 0 success, 1 numerical failure, 2 input error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import serialize
from .errors import InputError, NumericalError
from .gridmodel import SensitivityModel, build_sensitivity, pd_margins, read_feeder, write_feeder
from .surrogate import SurrogateSet, certify, normalize_regime
from .train import (FitConfig, NodeDataset, datasets_from_labels, fit, generate_scenarios, label_scenarios,
                    node_losses, training_loss)

logger = logging.getLogger("voltvar")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


# --------------------------------------------------------------------------- config

def read_config(path: str | Path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    out = {}
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _fit_config(args, cfg: dict[str, str]) -> FitConfig:
    kw = {}
    for f in fields(FitConfig):
        if f.name in cfg:
            raw = cfg[f.name]
            try:
                if f.name == "phi_only":
                    kw[f.name] = raw.lower() in ("1", "true", "yes")
                elif f.name in ("hidden_size", "epochs", "seed", "log_every", "threads"):
                    kw[f.name] = int(raw)
                else:
                    kw[f.name] = float(raw)
            except ValueError:
                raise InputError(f"config key {f.name!r}: cannot parse {raw!r}") from None
    for name in ("seed", "threads", "epochs"):
        val = getattr(args, name, None)
        if val is not None:
            kw[name] = val
    if args.phi_only:
        kw["phi_only"] = True
    hc = FitConfig(**kw)
    if hc.lr <= 0 or hc.epochs < 0 or hc.hidden_size < 1:
        raise InputError("lr must be > 0, epochs >= 0 and hidden_size >= 1")
    return hc


def _setting(args, cfg, name, cast, default):
    val = getattr(args, name, None)
    if val is not None:
        return val
    if name in cfg:
        try:
            return cast(cfg[name])
        except ValueError:
            raise InputError(f"config key {name!r}: cannot parse {cfg[name]!r}") from None
    return default


# --------------------------------------------------------------------------- helpers

def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need(args, *names):
    for n in names:
        if getattr(args, n, None) is None:
            raise InputError(f"--{n.replace('_', '-')} is required for '{args.command}'")


def _feeder(args):
    _need(args, "feeder", "buses")
    return read_feeder(args.feeder, args.buses)


def _load_json(path, what):
    try:
        return serialize.load(path)
    except OSError as exc:
        raise InputError(f"{path}: cannot read {what}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}: malformed JSON") from None


def _load_surrogate(path) -> SurrogateSet:
    try:
        return SurrogateSet.from_dict(_load_json(path, "surrogate"))
    except (KeyError, TypeError) as exc:
        raise InputError(f"{path}: malformed surrogate file ({exc})") from None


def _load_sensitivity(path) -> SensitivityModel:
    try:
        return SensitivityModel.from_dict(_load_json(path, "sensitivity model"))
    except (KeyError, TypeError) as exc:
        raise InputError(f"{path}: malformed sensitivity file ({exc})") from None


def _read_csv(path: Path, header: list[str]):
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        head = [h.strip() for h in next(reader, [])]
        for col in header:
            if col not in head:
                raise InputError(f"{path}:1: missing column {col!r}")
        pos = [head.index(c) for c in header]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(row[i]) for i in pos])
            except (ValueError, IndexError):
                raise InputError(f"{path}:{lineno}: malformed row") from None
    return rows


def _profiles(args, model):
    from .synthetic import read_profiles

    _need(args, "profiles")
    return read_profiles(args.profiles, model)


DATASET_HEADER = ["v_pu", "q_pu", "qstar_pu"]


def _read_datasets(out: Path, model) -> list[NodeDataset]:
    ds = []
    for bus in model.generators:
        rows = np.array(_read_csv(out / f"dataset_{bus}.csv", DATASET_HEADER)).reshape(-1, 3)
        ds.append(NodeDataset(bus, rows[:, 0].copy(), rows[:, 1].copy(), rows[:, 2].copy()))
    return ds


def _tag(regime: str, phi_only: bool) -> str:
    return normalize_regime(regime).replace("-", "").lower() + ("_phi_only" if phi_only else "")


# --------------------------------------------------------------------------- commands

def cmd_synth(args, cfg) -> int:
    """Write a synthetic 37-bus feeder and daily profiles."""
    from .synthetic import synthetic_feeder, synthetic_profiles, write_profiles

    out = _out_dir(args)
    seed = _setting(args, cfg, "seed", int, 0)
    model = synthetic_feeder(args.case, seed=seed)
    steps = _setting(args, cfg, "steps", int, 1440)
    profiles = synthetic_profiles(model, steps=steps, seed=seed, sens=build_sensitivity(model))
    write_feeder(model, out / "lines.csv", out / "buses.csv")
    write_profiles(out / "profiles.csv", model, profiles)
    print(f"wrote {out / 'lines.csv'}, {out / 'buses.csv'}, {out / 'profiles.csv'} ({steps} steps)")
    return 0


def cmd_build(args, cfg) -> int:
    model = _feeder(args)
    sens = build_sensitivity(model)
    out = _out_dir(args)
    serialize.dump(sens.to_dict(), out / "sensitivity.json")
    m = pd_margins(sens)
    print(f"||X|| = {serialize.fmt_float(sens.X_norm)}")
    print(f"min eig R = {serialize.fmt_float(m['R_min_eig'])}, min eig X = {serialize.fmt_float(m['X_min_eig'])}")
    return 0


SCENARIO_HEADER = ["id", "step", "bus", "p_pu", "q_pu", "qinit_pu"]
LABEL_HEADER = ["id", "step", "bus", "qstar_pu", "objective", "status", "kkt_residual"]


def cmd_label(args, cfg) -> int:
    model = _feeder(args)
    sens = build_sensitivity(model)
    profiles = _profiles(args, model)
    seed = _setting(args, cfg, "seed", int, 0)
    per_step = _setting(args, cfg, "samples_per_step", int, 5)
    scenarios = generate_scenarios(model, profiles, per_step, seed)
    V, labels = label_scenarios(model, sens, scenarios)
    out = _out_dir(args)

    qpos = {b: i for i, b in enumerate(model.loads)}
    gpos = {b: i for i, b in enumerate(model.generators)}

    def scen_rows():
        for s in scenarios:
            for b in range(1, model.n + 1):
                qi = float(s.q_C_init[gpos[b]]) if b in gpos else 0.0
                q = float(s.q_L[qpos[b]]) if b in qpos else 0.0
                yield s.id, s.step, b, float(s.p[b - 1]), q, qi

    def label_rows():
        for s, sol in zip(scenarios, labels):
            for j, b in enumerate(model.generators):
                yield s.id, s.step, b, float(sol.q_star[j]), float(sol.objective), sol.status, float(sol.kkt_residual)

    serialize.write_csv(out / "scenarios.csv", SCENARIO_HEADER, scen_rows())
    serialize.write_csv(out / "orpf_labels.csv", LABEL_HEADER, label_rows())
    if scenarios:
        for ds in datasets_from_labels(model, scenarios, V, labels):
            serialize.write_csv(out / f"dataset_{ds.node}.csv", DATASET_HEADER,
                                zip(ds.v.tolist(), ds.q.tolist(), ds.q_star.tolist()))
    else:
        for b in model.generators:
            serialize.write_csv(out / f"dataset_{b}.csv", DATASET_HEADER, [])
    print(f"labelled {len(scenarios)} scenarios over {len(profiles)} profile steps")
    return 0


def cmd_train(args, cfg) -> int:
    model = _feeder(args)
    out = _out_dir(args)
    regime = normalize_regime(_setting(args, cfg, "regime", str, None) or "rpsc")
    hyper = _fit_config(args, cfg)
    sens_path = out / "sensitivity.json"
    X_norm = _load_sensitivity(sens_path).X_norm if sens_path.exists() else build_sensitivity(model).X_norm
    datasets = _read_datasets(out, model)
    log: list = []
    s = fit(datasets, regime, hyper, X_norm=X_norm, q_min=model.q_min, q_max=model.q_max, log=log)
    tag = _tag(regime, hyper.phi_only)
    s.meta["training_loss"] = training_loss(s, datasets)
    s.meta["node_losses"] = node_losses(s, datasets)
    serialize.dump(s.to_dict(), out / f"surrogate_{tag}.json")
    with open(out / f"train_log_{tag}.jsonl", "w", encoding="utf-8") as fh:
        for rec in log:
            fh.write(serialize.dumps_line(rec) + "\n")
    print(f"training loss ({tag}) = {serialize.fmt_float(s.meta['training_loss'])}")
    print(f"L_psi = {serialize.fmt_float(s.L_psi_max)}, L_phi = {serialize.fmt_float(s.L_phi_max)}")
    return 0


def cmd_certify(args, cfg) -> int:
    _need(args, "surrogate", "sensitivity")
    s = _load_surrogate(args.surrogate)
    sens = _load_sensitivity(args.sensitivity)
    regime = _setting(args, cfg, "regime", str, None)
    if regime is not None:
        s = s.with_regime(normalize_regime(regime))
    cert = certify(s, sens)
    out = _out_dir(args)
    serialize.dump(cert.to_dict(), out / f"certificate_{_tag(s.regime, bool(s.meta.get('phi_only')))}.json")
    state = "certified" if cert.certified else "NOT certified"
    print(f"{s.regime}: {state}, eps_max = {serialize.fmt_float(cert.eps_max)}, "
          f"L_psi + L_phi ||X|| = {serialize.fmt_float(cert.c1_value)}")
    return 0


TRACE_HEADER = ["t", "bus", "q_pu", "v_pu"]


def cmd_simulate(args, cfg) -> int:
    from .sim import LINEAR, orpf_setpoint, run_closed_loop, time_varying_run

    model = _feeder(args)
    _need(args, "surrogate")
    s = _load_surrogate(args.surrogate)
    if tuple(s.nodes) != model.generators:
        raise InputError(f"surrogate nodes {list(s.nodes)} do not match feeder generators {list(model.generators)}")
    sens = build_sensitivity(model)
    cert = certify(s, sens)
    eps = _setting(args, cfg, "eps", float, None)
    if eps is None:
        if not cert.certified:
            raise NumericalError(f"{s.regime} condition fails for this surrogate; pass --eps explicitly")
        eps = cert.eps_max if s.regime == "CVP-SC" else 0.99 * cert.eps_max
    plant = _setting(args, cfg, "plant", str, LINEAR)
    max_steps = _setting(args, cfg, "max_steps", int, 1000)
    tol = _setting(args, cfg, "tol", float, 1e-9)
    seed = _setting(args, cfg, "seed", int, 0)
    rng = np.random.default_rng(seed)
    q0 = rng.uniform(model.q_min, model.q_max)
    if args.profiles:
        from .synthetic import read_profiles

        profiles = read_profiles(args.profiles, model)
        stride = _setting(args, cfg, "profile_stride", int, 1)
        per = _setting(args, cfg, "steps_per_change", int, 120)
        trace = time_varying_run(s, model, sens, eps, profiles[::stride], per, q0, plant)
    else:
        trace = run_closed_loop(s, model, sens, eps, q0, plant, max_steps, tol,
                                q_star=orpf_setpoint(model, sens))
    out = _out_dir(args)
    serialize.write_csv(out / "trace.csv", TRACE_HEADER, trace.rows())
    summary = trace.summary(s.regime)
    serialize.dump(summary, out / "summary.json")
    print(f"{'converged' if trace.converged else 'did not converge'} after {trace.steps} steps, "
          f"final residual {serialize.fmt_float(trace.final_residual)}")
    if not trace.converged and not args.profiles:
        return 1
    return 0


def _final_losses(path: Path) -> tuple[float | None, dict]:
    if not path.exists():
        return None, {}
    d = serialize.load(path)
    return d.get("meta", {}).get("training_loss"), d


def cmd_report(args, cfg) -> int:
    out = Path(args.out)
    if not out.is_dir() or not any(out.iterdir()):
        raise InputError(f"{out}: output directory is empty or missing")
    rows = []
    for regime in ("cvpsc", "rpsc"):
        full, _ = _final_losses(out / f"surrogate_{regime}.json")
        base, _ = _final_losses(out / f"surrogate_{regime}_phi_only.json")
        if full is None and base is None:
            continue
        imp = (base - full) / base if full is not None and base else None
        cert_path = out / f"certificate_{regime}.json"
        cert = serialize.load(cert_path) if cert_path.exists() else {}
        rows.append((regime, base, full, imp, cert.get("eps_max"), cert.get("c1_value")))
    summary = serialize.load(out / "summary.json") if (out / "summary.json").exists() else None
    if not rows and summary is None:
        raise InputError(f"{out}: no surrogate or simulation results to report")

    def f(x):
        return "n/a" if x is None else f"{x:.6g}"

    serialize.write_csv(out / "report_table.csv",
                        ["regime", "baseline_loss", "loss", "improvement", "eps_max", "c1_value"],
                        [tuple("" if v is None else v for v in r) for r in rows])
    lines = ["# Volt/Var surrogate report", "",
             "| regime | phi-only loss | (psi, phi) loss | improvement | eps_max | L_psi + L_phi ||X|| |",
             "|---|---|---|---|---|---|"]
    for r in rows:
        lines.append("| " + " | ".join([r[0]] + [f(v) for v in r[1:]]) + " |")
    if summary is not None:
        lines += ["", "## Closed-loop run", ""]
        for k in ("regime", "plant", "eps", "converged", "steps", "final_residual", "distance_to_orpf",
                  "mean_window_distance"):
            if k in summary:
                lines.append(f"- {k}: {summary[k]}")
    (out / "report.md").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {out / 'report.md'}")
    return 0


# --------------------------------------------------------------------------- entry point

COMMANDS = {
    "synth": cmd_synth,
    "build": cmd_build,
    "label": cmd_label,
    "train": cmd_train,
    "certify": cmd_certify,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--feeder", help="line CSV (from,to,r_pu,x_pu)")
    common.add_argument("--buses", help="bus CSV (id,kind,p_pu,q_pu,...)")
    common.add_argument("--profiles", help="profile CSV (step,bus,p_pu,q_pu)")
    common.add_argument("--regime", choices=["cvpsc", "rpsc"])
    common.add_argument("--eps", type=float)
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--plant", choices=["linear", "ac"])
    common.add_argument("--threads", type=int)
    common.add_argument("--config", help="key = value settings file")

    p = argparse.ArgumentParser(prog="voltvar", description="Stable learned Volt/Var control pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    sp = sub.add_parser("synth", parents=[common], help="write a synthetic feeder and profiles")
    sp.add_argument("--case", type=int, choices=[1, 2], default=1)
    sub.add_parser("build", parents=[common], help="feeder CSVs -> sensitivity.json")
    sub.add_parser("label", parents=[common], help="scenarios and ORPF labels")
    sp = sub.add_parser("train", parents=[common], help="fit surrogates")
    sp.add_argument("--phi-only", action="store_true", help="baseline with psi fixed to 0")
    sp.add_argument("--epochs", type=int)
    sp = sub.add_parser("certify", parents=[common], help="stability certificate")
    sp.add_argument("--surrogate", required=False)
    sp.add_argument("--sensitivity", required=False)
    sp = sub.add_parser("simulate", parents=[common], help="closed-loop run")
    sp.add_argument("--surrogate")
    sub.add_parser("report", parents=[common], help="markdown summary of an output directory")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = os.environ.get("VOLTVAR_LOG", "error").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    if not hasattr(args, "phi_only"):
        args.phi_only = False
    try:
        cfg = read_config(args.config) if args.config else {}
        return COMMANDS[args.command](args, cfg)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
