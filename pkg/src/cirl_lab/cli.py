"""Command-line front end: ``cirl-lab <command> ...``.

Every command resolves a JSON config (file plus flags), echoes it into the
run directory and finishes with a ``manifest.json`` that records the config
hash and every output path. Files are never overwritten.

Exit codes: 0 success, 2 usage/config error, 3 bad input data, 4 numerical
divergence.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .control import GAIN_NAMES, REFERENCE_STATIC_GAINS, PidGainSet, pairing, rga, \
    steady_state_gain_matrix
from .errors import CirlError, DivergenceError, NonConvergenceError, SingularityError
from .optimize import (
    DeConfig, SwarmConfig, as_controller, de_tune_static_pid, evaluate, simulate,
    train_policy, write_learning_curve,
)
from .plotting import render
from .policy import CIRL, PURE_RL, load_policy, policy_from_dict, save_policy
from .scenarios import dump_scenarios, load_scenarios, scenario_sets
from .sim import write_trajectory_csv

OUT_ENV = "CIRL_LAB_OUT"
DEFAULT_OUT = "runs"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4

AGENTS = {"cirl": CIRL, "rl": PURE_RL}
CONFIG_KEYS = {"agent", "scenario", "seeds", "swarm", "de", "noise", "weights", "n_e",
               "seed_base", "rga", "policy", "gains"}
RGA_KEYS = {"repeats", "noise", "seed", "horizon", "window"}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def parse_seeds(text):
    """``"0..9"`` (inclusive), ``"1,4,7"`` or a single integer."""
    text = str(text).strip()
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            a, b = int(a), int(b)
            if b < a:
                raise UsageError(f"empty seed range '{text}'")
            return list(range(a, b + 1))
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"cannot parse seeds '{text}' (use a..b or a,b,c)") from None
    if not seeds:
        raise UsageError("seed list is empty")
    return seeds


def _dataclass_overrides(cls, values, section):
    if values is None:
        return {}
    if not isinstance(values, dict):
        raise UsageError(f"config field '{section}' must be an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise UsageError(f"config field '{section}' has unknown keys {unknown}; "
                         f"allowed: {sorted(names)}")
    return dict(values)


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file '{path}' not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file '{path}' is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    unknown = sorted(set(cfg) - CONFIG_KEYS)
    if unknown:
        raise UsageError(f"unknown config fields {unknown}; allowed: {sorted(CONFIG_KEYS)}")
    return cfg


def resolve(args, defaults):
    """Merge defaults < config file < command-line flags."""
    cfg = dict(defaults)
    cfg.update(load_config(getattr(args, "config", None)))
    for key in ("agent", "scenario", "seeds", "policy", "gains"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if "seeds" in cfg:
        cfg["seeds"] = parse_seeds(cfg["seeds"]) if isinstance(cfg["seeds"], (str, int)) \
            else [int(s) for s in cfg["seeds"]]
        if not cfg["seeds"]:
            raise UsageError("seed list is empty")
    if "agent" in cfg and cfg["agent"] not in AGENTS:
        raise UsageError(f"agent must be one of {sorted(AGENTS)}, got '{cfg['agent']}'")
    return cfg


def scenario_overrides(cfg):
    out = {}
    if "noise" in cfg:
        noise = cfg["noise"]
        if not (isinstance(noise, list) and len(noise) == 3):
            raise UsageError("config field 'noise' must be a list of three std devs")
        out["noise"] = tuple(float(s) for s in noise)
    if "weights" in cfg:
        w = cfg["weights"]
        if not isinstance(w, dict) or set(w) - {"q", "r"}:
            raise UsageError("config field 'weights' must be an object with keys q and r")
        if "q" in w:
            out["q"] = tuple(float(v) for v in w["q"])
        if "r" in w:
            out["r"] = tuple(float(v) for v in w["r"])
    return out


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


class RunDir:
    """Write-once output directory with a manifest of everything written."""

    def __init__(self, root, command, cfg, explicit):
        self.cfg = cfg
        self.hash = config_hash({"command": command, **cfg})
        self.path = Path(explicit) if explicit else Path(root) / f"{command}-{self.hash[:12]}"
        if (self.path / "manifest.json").exists():
            raise DataError(f"run directory '{self.path}' already holds a completed run; "
                            "choose another --out")
        self.path.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.outputs = {}

    def file(self, rel):
        p = self.path / rel
        if p.exists():
            raise DataError(f"refusing to overwrite '{p}'")
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_json(self, rel, obj, key=None):
        p = self.file(rel)
        with open(p, "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
        self.record(key or rel, p)
        return p

    def record(self, key, p):
        self.outputs[key] = str(Path(p).relative_to(self.path))

    def finish(self, summary=None):
        manifest = {"command": self.command, "config_hash": self.hash, "version": __version__,
                    "config": self.cfg, "outputs": self.outputs, "summary": summary or {}}
        for rel in self.outputs.values():
            assert (self.path / rel).exists(), rel
        self.write_json("manifest.json", manifest, key="manifest")


def _out_root():
    return os.environ.get(OUT_ENV, DEFAULT_OUT)


def _scenarios(cfg):
    try:
        return load_scenarios(cfg["scenario"], **scenario_overrides(cfg))
    except CirlError:
        raise
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"bad scenario file: {exc}") from None


def write_gain_csv(path, gains):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step",) + GAIN_NAMES)
        for k, g in enumerate(gains):
            w.writerow([k] + [repr(float(v)) for v in g])


def cmd_train(args):
    cfg = resolve(args, {"agent": "cirl", "scenario": "training", "seeds": "0..9"})
    swarm = _dataclass_overrides(SwarmConfig, cfg.get("swarm"), "swarm")
    swarm.pop("seed", None)
    scs = _scenarios(cfg)
    kind = AGENTS[cfg["agent"]]
    run = RunDir(_out_root(), "train", cfg, args.out)
    run.write_json("config.json", cfg)
    rows = []
    for seed in cfg["seeds"]:
        sc = SwarmConfig(**swarm, seed=seed)
        # training episodes use noise seeds 1000*seed + j
        policy, history, ckpt = train_policy(
            kind, scs, sc, metadata={"training_scenario": str(cfg["scenario"])})
        p = run.file(f"seed-{seed}/policy.json")
        save_policy(policy, p)
        run.record(f"seed-{seed}/policy", p)
        p = run.file(f"seed-{seed}/learning_curve.csv")
        write_learning_curve(p, history)
        run.record(f"seed-{seed}/learning_curve", p)
        run.write_json(f"seed-{seed}/checkpoint.json", ckpt, key=f"seed-{seed}/checkpoint")
        rows.append((seed, history[0].best_fitness, history[-1].best_fitness))
    print(f"{'seed':>6} {'initial best':>14} {'final best':>14}")
    for seed, f0, f1 in rows:
        print(f"{seed:>6} {f0:>14.4f} {f1:>14.4f}")
    finals = np.array([r[2] for r in rows])
    summary = {"mean_final_fitness": float(finals.mean()), "std_final_fitness": float(finals.std()),
               "per_seed": {str(s): {"initial_best": f0, "final_best": f1} for s, f0, f1 in rows}}
    run.finish(summary)
    print(f"run directory: {run.path}")
    return EXIT_OK


def cmd_tune_pid(args):
    cfg = resolve(args, {"scenario": "training", "n_e": 3, "seed_base": 0})
    de = DeConfig(**_dataclass_overrides(DeConfig, cfg.get("de"), "de"))
    scs = _scenarios(cfg)
    run = RunDir(_out_root(), "tune-pid", cfg, args.out)
    run.write_json("config.json", cfg)
    gains, res = de_tune_static_pid(scs, de, n_e=cfg["n_e"], seed_base=cfg["seed_base"])
    ref_fit = evaluate(REFERENCE_STATIC_GAINS, scs, cfg["n_e"], cfg["seed_base"])
    run.write_json("gains.json", {**gains.to_dict(), "fitness": res.best_fitness})
    run.write_json("reference_gains.json", {**REFERENCE_STATIC_GAINS.to_dict(),
                                            "fitness": ref_fit})
    p = run.file("de_curve.csv")
    write_learning_curve(p, res.history)
    run.record("de_curve.csv", p)
    print(f"tuned     {gains.as_array().round(4).tolist()}  fitness {res.best_fitness:.4f}")
    print(f"reference {REFERENCE_STATIC_GAINS.as_array().tolist()}  fitness {ref_fit:.4f}")
    run.finish({"tuned_fitness": res.best_fitness, "reference_fitness": ref_fit})
    print(f"run directory: {run.path}")
    return EXIT_OK


def load_controller_file(path):
    """A policy JSON or a static gain JSON."""
    try:
        with open(path) as fh:
            d = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"file '{path}' not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"'{path}' is not valid JSON: {exc}") from None
    if isinstance(d, dict) and "cb_loop" in d:
        try:
            return PidGainSet.from_dict(d)
        except (KeyError, TypeError) as exc:
            raise DataError(f"gain file '{path}' is missing {exc}") from None
    return policy_from_dict(d)


def cmd_evaluate(args):
    cfg = resolve(args, {"scenario": "test", "seeds": "10000..10009"})
    target = cfg.get("policy") or cfg.get("gains")
    if not target:
        raise UsageError("evaluate needs --policy or --gains")
    policy = load_controller_file(target)
    scs = _scenarios(cfg)
    run = RunDir(_out_root(), "evaluate", cfg, args.out)
    run.write_json("config.json", cfg)
    ctrl = as_controller(policy)
    per_seed = {}
    for seed in cfg["seeds"]:
        rewards, rec = simulate(ctrl, scs, [seed] * len(scs), record=True)
        per_seed[str(seed)] = float(rewards[0].sum())
        for j, sc in enumerate(scs):
            tag = f"seed-{seed}/{sc.name}"
            p = run.file(f"{tag}/trajectory.csv")
            write_trajectory_csv(p, {k: v[0, j] for k, v in rec.items() if k != "gains"})
            run.record(f"{tag}/trajectory", p)
            if "gains" in rec:
                p = run.file(f"{tag}/gains.csv")
                write_gain_csv(p, rec["gains"][0, j])
                run.record(f"{tag}/gains", p)
    vals = np.array(list(per_seed.values()))
    summary = {"mean": float(vals.mean()), "std": float(vals.std()), "per_seed": per_seed}
    run.write_json("summary.json", summary)
    print(f"mean {summary['mean']:.4f}  std {summary['std']:.4f}  over {len(vals)} seeds")
    run.finish(summary)
    print(f"run directory: {run.path}")
    return EXIT_OK


def cmd_rga(args):
    cfg = resolve(args, {})
    opts = cfg.get("rga", {})
    if not isinstance(opts, dict) or set(opts) - RGA_KEYS:
        raise UsageError(f"config field 'rga' accepts only {sorted(RGA_KEYS)}")
    kw = {k: opts[k] for k in ("repeats", "seed", "horizon", "window") if k in opts}
    if "noise" in opts:
        kw["noise_std"] = tuple(float(s) for s in opts["noise"])
    k = steady_state_gain_matrix(**kw)
    lam = rga(k)
    pair = pairing(lam)
    run = RunDir(_out_root(), "rga", cfg, args.out)
    run.write_json("config.json", cfg)
    run.write_json("rga.json", {"inputs": ["f_in", "t_c"], "outputs": ["c_b", "vol"],
                                "gain_matrix": k.tolist(), "rga": lam.tolist(), "pairing": pair})
    print("           f_in        t_c")
    for name, row in zip(("c_b", "vol"), lam):
        print(f"{name:>5} {row[0] + 0.0:>10.6f} {row[1] + 0.0:>10.6f}")
    print("pairing: " + ", ".join(f"{o} <-> {i}" for o, i in pair.items()))
    run.finish({"rga": lam.tolist(), "pairing": pair})
    return EXIT_OK


def cmd_plot(args):
    inputs = []
    for path in args.csv:
        try:
            inputs.append((Path(path).stem, Path(path).read_bytes()))
        except FileNotFoundError:
            raise DataError(f"file '{path}' not found") from None
    if args.labels:
        if len(args.labels) != len(inputs):
            raise UsageError("--labels needs one label per CSV")
        inputs = [(lab, data) for lab, (_, data) in zip(args.labels, inputs)]
    svg = render(inputs, args.kind)
    out = Path(args.out) if args.out else Path(_out_root()) / "plot.svg"
    if out.suffix != ".svg":
        out = out / "plot.svg"
    if out.exists():
        raise DataError(f"refusing to overwrite '{out}'")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg)
    print(out)
    return EXIT_OK


def cmd_scenario_emit(args):
    if args.id not in scenario_sets():
        raise UsageError(f"unknown scenario set '{args.id}'; known: {', '.join(scenario_sets())}")
    scs = load_scenarios(args.id)
    if args.out is None:
        json.dump([sc.to_dict() for sc in scs], sys.stdout, indent=2)
        sys.stdout.write("\n")
        return EXIT_OK
    out = Path(args.out)
    if out.exists():
        raise DataError(f"refusing to overwrite '{out}'")
    out.parent.mkdir(parents=True, exist_ok=True)
    dump_scenarios(scs, out)
    print(out)
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="cirl-lab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seeds=True, scenario=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help=f"run directory (default: ${OUT_ENV} or ./{DEFAULT_OUT})")
        if scenario:
            p.add_argument("--scenario", help="scenario set id or scenario JSON file")
        if seeds:
            p.add_argument("--seeds", help="a..b inclusive or a,b,c")

    p = sub.add_parser("train", help="train CIRL or pure-RL policies with PSO")
    common(p)
    p.add_argument("--agent", choices=sorted(AGENTS))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tune-pid", help="tune static PID gains with differential evolution")
    common(p, seeds=False)
    p.set_defaults(func=cmd_tune_pid)

    p = sub.add_parser("evaluate", help="roll out a policy or gain file")
    common(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--policy", help="policy JSON")
    g.add_argument("--gains", help="static gain JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("rga", help="relative gain array at the nominal operating point")
    common(p, seeds=False, scenario=False)
    p.set_defaults(func=cmd_rga)

    p = sub.add_parser("plot", help="render CSV exports to SVG")
    p.add_argument("csv", nargs="+")
    p.add_argument("--labels", nargs="+")
    p.add_argument("--kind", choices=("trajectory", "gains", "learning"))
    p.add_argument("--out", help="output .svg path or directory")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("scenario", help="scenario utilities")
    ssub = p.add_subparsers(dest="action", required=True)
    e = ssub.add_parser("emit", help="write a built-in scenario set as JSON")
    e.add_argument("id")
    e.add_argument("--out", help="output file (default: stdout)")
    e.set_defaults(func=cmd_scenario_emit)
    return ap


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, NonConvergenceError, SingularityError) as exc:
        step = getattr(exc, "step", None)
        where = f" (step {step})" if step is not None else ""
        print(f"numerical failure{where}: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DataError, CirlError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
