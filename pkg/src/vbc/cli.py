"""Command line front end.

Subcommands: train, eval, verify-theorem1, sweep, gradcheck. Every numeric
field of the grid, training and gating configurations is exposed as a flag;
the same keys can come from a JSON config file or from environment
variables (VBC_GRID_WIDTH, VBC_TRAIN_LR, VBC_COMM_DELTA1, VBC_RUN_SEEDS,
...). Precedence, lowest to highest: built-in defaults, config file,
environment variables, explicit flags. Threshold values accept "inf" and
"-inf".
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields as dc_fields

from .envs import ENVS, GridConfig, make_env
from .harness import (CHECKPOINT_NAME, ExperimentSpec, MANIFEST_NAME,
                      gate_sweep, gradcheck_report, manifest_to_spec,
                      rerun_from_manifest, run_experiment, select_gates,
                      sweep)
from .protocol import CommConfig
from .tabular import (PERTURBATION_MODES, TabularMdp, Theorem1Config,
                      verify_theorem1)
from .trainer import METHODS, TrainConfig, Trainer

ENV_PREFIX = "VBC"

SECTIONS = {"grid": GridConfig, "train": TrainConfig, "comm": CommConfig}

# grid.seed is excluded: the per-run seed also seeds the environment
SKIPPED_FIELDS = {("grid", "seed")}

RUN_KEYS = {
    "env": str, "method": str, "seeds": "seed_list", "episodes": int,
    "eval_episodes": int, "checkpoint_period": int, "out": str,
    "parallelism": int, "figures": "bool",
}

RUN_DEFAULTS = {
    "env": "coopnav", "method": "vbc-vdn", "seeds": [0, 1, 2, 3, 4],
    "episodes": 2000, "eval_episodes": 20, "checkpoint_period": 200,
    "out": "runs", "parallelism": 1, "figures": True,
}


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def parse_seed_list(value) -> list[int]:
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    return [int(part) for part in str(value).split(",") if part.strip()]


def field_converter(default):
    if isinstance(default, bool):
        return parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str


def section_converters() -> dict:
    table = {}
    for section, cls in SECTIONS.items():
        for f in dc_fields(cls):
            if (section, f.name) in SKIPPED_FIELDS:
                continue
            table[(section, f.name)] = field_converter(f.default)
    return table


CONVERTERS = section_converters()


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    for (section, name), conv in CONVERTERS.items():
        flag = "--" + name.replace("_", "-")
        parser.add_argument(flag, dest=f"{section}__{name}", default=None,
                            type=conv, metavar=name.upper(),
                            help=f"{section} setting {name}")


def add_run_flags(parser: argparse.ArgumentParser,
                  with_method: bool = True) -> None:
    parser.add_argument("--config", default=None,
                        help="JSON config file (sections grid/train/comm "
                             "plus run keys at the top level)")
    parser.add_argument("--env", dest="run__env", default=None,
                        choices=sorted(ENVS))
    if with_method:
        parser.add_argument("--method", dest="run__method", default=None,
                            choices=METHODS)
    parser.add_argument("--seeds", dest="run__seeds", default=None,
                        nargs="+", type=int)
    parser.add_argument("--episodes", dest="run__episodes", default=None,
                        type=int)
    parser.add_argument("--eval-episodes", dest="run__eval_episodes",
                        default=None, type=int)
    parser.add_argument("--checkpoint-period", dest="run__checkpoint_period",
                        default=None, type=int)
    parser.add_argument("--out", dest="run__out", default=None)
    parser.add_argument("--parallelism", dest="run__parallelism",
                        default=None, type=int)
    parser.add_argument("--figures", dest="run__figures", default=None,
                        type=parse_bool, metavar="BOOL")


def read_config_file(path) -> dict:
    with open(path) as fh:
        raw = json.load(fh)
    settings = {"grid": {}, "train": {}, "comm": {}, "run": {}}
    for section in SECTIONS:
        for name, value in raw.get(section, {}).items():
            key = (section, name)
            if key in SKIPPED_FIELDS:
                continue
            if key not in CONVERTERS:
                raise ValueError(f"unknown {section} setting {name!r}")
            settings[section][name] = CONVERTERS[key](value)
    for name, value in raw.items():
        if name in SECTIONS:
            continue
        if name not in RUN_KEYS:
            raise ValueError(f"unknown config key {name!r}")
        settings["run"][name] = convert_run_value(name, value)
    return settings


def convert_run_value(name: str, value):
    kind = RUN_KEYS[name]
    if kind == "seed_list":
        return parse_seed_list(value)
    if kind == "bool":
        return parse_bool(value)
    return kind(value)


def env_overrides() -> dict:
    settings = {"grid": {}, "train": {}, "comm": {}, "run": {}}
    for key, value in os.environ.items():
        if not key.startswith(ENV_PREFIX + "_"):
            continue
        parts = key[len(ENV_PREFIX) + 1:].lower().split("_", 1)
        if len(parts) != 2:
            continue
        section, name = parts
        if section in SECTIONS and (section, name) in CONVERTERS:
            settings[section][name] = CONVERTERS[(section, name)](value)
        elif section == "run" and name in RUN_KEYS:
            settings["run"][name] = convert_run_value(name, value)
    return settings


def merge_settings(args) -> dict:
    """Defaults, then config file, then env vars, then explicit flags."""
    settings = {"grid": {}, "train": {}, "comm": {},
                "run": dict(RUN_DEFAULTS)}
    layers = []
    if getattr(args, "config", None):
        layers.append(read_config_file(args.config))
    layers.append(env_overrides())
    flag_layer = {"grid": {}, "train": {}, "comm": {}, "run": {}}
    for dest, value in vars(args).items():
        if "__" not in dest or value is None:
            continue
        section, name = dest.split("__", 1)
        if name == "seeds":
            value = parse_seed_list(value)
        flag_layer[section][name] = value
    layers.append(flag_layer)
    for layer in layers:
        for section in settings:
            settings[section].update(layer.get(section, {}))
    return settings


def build_spec(settings: dict) -> ExperimentSpec:
    run = settings["run"]
    return ExperimentSpec(
        env_name=run["env"],
        grid=GridConfig(**settings["grid"]),
        method=run["method"],
        train=TrainConfig(**settings["train"]),
        comm=CommConfig(**settings["comm"]),
        seeds=tuple(run["seeds"]),
        episodes=run["episodes"],
        eval_episodes=run["eval_episodes"],
        checkpoint_period=run["checkpoint_period"],
    )


def cmd_train(args) -> int:
    settings = merge_settings(args)
    run = settings["run"]
    spec = build_spec(settings)
    summary = run_experiment(spec, run["out"], parallelism=run["parallelism"],
                             figures=run["figures"])
    print(f"method {spec.method} on {spec.env_name}: "
          f"{len(summary.seeds_ok)} seeds ok, "
          f"{len(summary.seeds_failed)} failed")
    for column in summary.mean:
        ci = summary.final_ci(column)
        tail = f" +/- {ci:.4f}" if ci is not None else ""
        print(f"  final {column}: {summary.final(column):.4f}{tail}")
    print(f"artifacts in {run['out']}")
    return 0


def cmd_rerun(args) -> int:
    row = rerun_from_manifest(args.manifest, args.out)
    print(json.dumps(row))
    return 0


def load_run(run_dir, settings) -> Trainer:
    with open(os.path.join(run_dir, MANIFEST_NAME)) as fh:
        manifest = json.load(fh)
    spec, seed = manifest_to_spec(manifest)
    comm = CommConfig(**{**{"delta1": spec.comm.delta1,
                            "delta2": spec.comm.delta2},
                         **settings["comm"]})
    env = make_env(spec.env_name, spec.grid)
    trainer = Trainer(env, spec.method, spec.train, seed, comm=comm,
                      eval_episodes=spec.eval_episodes,
                      checkpoint_period=spec.checkpoint_period)
    trainer.model.load(os.path.join(run_dir, CHECKPOINT_NAME))
    trainer.target.block.copy_from(trainer.model.block)
    return trainer


def cmd_eval(args) -> int:
    settings = merge_settings(args)
    trainer = load_run(args.run, settings)
    episodes = settings["run"].get("eval_episodes", 20)
    if args.sweep_delta1 is not None or args.sweep_delta2 is not None:
        d1s = args.sweep_delta1 or [trainer.comm_cfg.delta1]
        d2s = args.sweep_delta2 or [trainer.comm_cfg.delta2]
        rows = gate_sweep(trainer, d1s, d2s, episodes=episodes,
                          eval_seed=args.eval_seed)
        for row in rows:
            print(json.dumps(row))
        chosen = select_gates(rows, args.beta_budget)
        print("selected: " + json.dumps(chosen))
        return 0
    stats, _ = trainer.evaluate(episodes)
    print(json.dumps(stats))
    return 0


def cmd_verify(args) -> int:
    mdp = TabularMdp.random(args.states, args.actions, args.mdp_gamma,
                            seed=args.mdp_seed)
    reports = []
    for mode in args.modes:
        for seed in args.run_seeds:
            config = Theorem1Config(
                lam=args.lam, n_agents=args.agents, bound=args.bound,
                mode=mode, updates=args.updates, seed=seed,
                slack=args.slack, omega=args.omega)
            report = verify_theorem1(mdp, config)
            reports.append(report)
            print(json.dumps(report))
    if args.report_out:
        with open(args.report_out, "w") as fh:
            json.dump(reports, fh, indent=2)
    if args.strict:
        for report in reports:
            mode = report["config"]["mode"]
            if report["inconclusive"] or not report["corrected_bound_holds"]:
                return 1
            if mode in ("zero", "uniform") and not report["pass"]:
                return 1
    return 0


def cmd_sweep(args) -> int:
    settings = merge_settings(args)
    run = settings["run"]
    methods = args.methods if args.methods is not None else []
    specs = []
    for method in methods:
        section = dict(settings)
        section["run"] = dict(run, method=method)
        specs.append(build_spec(section))
    rows = sweep(specs, run["out"], parallelism=run["parallelism"],
                 figures=run["figures"])
    if not rows:
        print("no methods requested; empty table")
        return 0
    header = list(rows[0])
    print("\t".join(header))
    for row in rows:
        print("\t".join(str(row[k]) for k in header))
    print(f"artifacts in {run['out']}")
    return 0


def cmd_gradcheck(args) -> int:
    rows = gradcheck_report(n_seeds=args.check_seeds, tol=args.tolerance)
    worst: dict[str, float] = {}
    for row in rows:
        worst[row["component"]] = max(worst.get(row["component"], 0.0),
                                      row["max_rel_error"])
    ok = all(row["ok"] for row in rows)
    for component, err in worst.items():
        print(f"{component}: max relative error {err:.3e}")
    print("gradients ok" if ok else "GRADIENT CHECK FAILED")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vbc",
        description="Variance-gated multi-agent Q-learning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one method over seeds")
    add_run_flags(p_train)
    add_config_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_rerun = sub.add_parser("rerun", help="reproduce a run from its manifest")
    p_rerun.add_argument("manifest")
    p_rerun.add_argument("--out", required=True)
    p_rerun.set_defaults(func=cmd_rerun)

    p_eval = sub.add_parser("eval", help="evaluate a saved run, optionally "
                                         "sweeping the gate thresholds")
    p_eval.add_argument("run", help="run directory with manifest and checkpoint")
    add_run_flags(p_eval, with_method=False)
    add_config_flags(p_eval)
    p_eval.add_argument("--sweep-delta1", nargs="+", type=float, default=None)
    p_eval.add_argument("--sweep-delta2", nargs="+", type=float, default=None)
    p_eval.add_argument("--beta-budget", type=float, default=0.5)
    p_eval.add_argument("--eval-seed", type=int, default=0)
    p_eval.set_defaults(func=cmd_eval)

    p_verify = sub.add_parser("verify-theorem1",
                              help="empirical tabular convergence check")
    p_verify.add_argument("--states", type=int, default=5)
    p_verify.add_argument("--actions", type=int, default=4)
    p_verify.add_argument("--mdp-gamma", type=float, default=0.9)
    p_verify.add_argument("--mdp-seed", type=int, default=0)
    p_verify.add_argument("--lam", type=float, default=0.1)
    p_verify.add_argument("--agents", type=int, default=3)
    p_verify.add_argument("--bound", type=float, default=1.0)
    p_verify.add_argument("--updates", type=int, default=500_000)
    p_verify.add_argument("--omega", type=float, default=0.65)
    p_verify.add_argument("--slack", type=float, default=0.05)
    p_verify.add_argument("--modes", nargs="+", default=list(PERTURBATION_MODES),
                          choices=PERTURBATION_MODES)
    p_verify.add_argument("--run-seeds", nargs="+", type=int, default=[0])
    p_verify.add_argument("--report-out", default=None)
    p_verify.add_argument("--strict", action="store_true",
                          help="exit nonzero unless every run satisfies the "
                               "discounted offset bound (and zero-mean modes "
                               "the undiscounted one)")
    p_verify.set_defaults(func=cmd_verify)

    p_sweep = sub.add_parser("sweep", help="compare methods on one environment")
    p_sweep.add_argument("--methods", nargs="*", choices=METHODS, default=None)
    add_run_flags(p_sweep, with_method=False)
    add_config_flags(p_sweep)
    p_sweep.set_defaults(func=cmd_sweep)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p_grad.add_argument("--check-seeds", type=int, default=10)
    p_grad.add_argument("--tolerance", type=float, default=1e-4)
    p_grad.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
