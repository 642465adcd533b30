"""Pipeline front door.

One subcommand per stage, all writing into a shared run directory:

    vop gen-data      random-policy batch -> dataset.jsonl
    vop train-models  dataset -> ensemble/
    vop train-policy  dataset + ensemble -> policy_seed<N>/
    vop evaluate      ensemble + policies -> report.json / report.csv
    vop scenario      one policy -> objective-switch trajectory + flags
    vop serve         one policy -> live steering service

Precedence is defaults < --config file < flags.  Exit codes: 0 success,
1 runtime failure, 2 usage error or missing upstream artifact (printed
with the missing path).  Heavy imports happen inside the handlers so
--threads can cap the math libraries' worker pools before they load.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import re
import sys
from glob import glob

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class MissingArtifact(Exception):
    def __init__(self, path):
        super().__init__(str(path))
        self.path = str(path)


def _require(path: str) -> str:
    if not os.path.exists(path):
        raise MissingArtifact(path)
    return path


def _cap_threads(n):
    if not n:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _resolve_config(args):
    from .config import default_config, load_config
    return load_config(args.config) if args.config else default_config()


def _override(section, args, names):
    updates = {n: getattr(args, n) for n in names
               if getattr(args, n, None) is not None}
    return dataclasses.replace(section, **updates) if updates else section


def _ensure_out(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _write_manifest(out: str, cfg, stage: str, artifacts):
    from . import __version__
    from .config import config_hash, config_to_dict
    path = os.path.join(out, "manifest.json")
    stages = {}
    if os.path.exists(path):
        try:
            with open(path) as f:
                stages = json.load(f).get("stages", {})
        except (json.JSONDecodeError, OSError):
            stages = {}
    stages[stage] = {"artifacts": sorted(artifacts),
                     "config_hash": config_hash(cfg)}
    doc = {"package": "vop", "version": __version__,
           "config": config_to_dict(cfg), "stages": stages}
    with open(path, "w") as f:
        f.write(json.dumps(doc, indent=2, sort_keys=True))
        f.write("\n")


def _policy_dirs(out: str, prefix: str):
    def key(d):
        m = re.fullmatch(re.escape(prefix) + r"(\d+)", os.path.basename(d))
        if m:
            return (0, int(m.group(1)), "")
        return (1, 0, os.path.basename(d))
    return sorted((d for d in glob(os.path.join(out, prefix + "*"))
                   if os.path.isdir(d)), key=key)


# ---------------------------------------------------------------------------
# Handlers
# ---------------------------------------------------------------------------

def _cmd_gen_data(args) -> int:
    from .dataset import generate_batch, save_batch
    cfg = _resolve_config(args)
    cfg.dataset = _override(cfg.dataset, args, ("episodes", "steps", "seed"))
    out = _ensure_out(args)
    batch = generate_batch(cfg.dataset.episodes, cfg.dataset.steps,
                           cfg.dataset.seed, cfg.physics)
    path = os.path.join(out, cfg.paths.dataset)
    save_batch(batch, path)
    _write_manifest(out, cfg, "gen-data", [cfg.paths.dataset])
    print(f"wrote {len(batch)} transitions "
          f"({cfg.dataset.episodes} episodes x {cfg.dataset.steps} steps) to {path}")
    return EXIT_OK


def _cmd_train_models(args) -> int:
    from .dataset import load_batch
    from .ensemble import save_ensemble, train_ensemble
    cfg = _resolve_config(args)
    cfg.ensemble = _override(cfg.ensemble, args,
                             ("k", "epochs", "learning_rate", "seed"))
    out = _ensure_out(args)
    batch = load_batch(_require(os.path.join(out, cfg.paths.dataset)))
    model, holdout_mses = train_ensemble(
        batch, k=cfg.ensemble.k, epochs=cfg.ensemble.epochs,
        seed=cfg.ensemble.seed, learning_rate=cfg.ensemble.learning_rate,
        minibatch=cfg.ensemble.minibatch, patience=cfg.ensemble.patience,
        holdout_fraction=cfg.ensemble.holdout_fraction)
    save_ensemble(model, os.path.join(out, cfg.paths.ensemble),
                  holdout_mses=holdout_mses, seed=cfg.ensemble.seed)
    _write_manifest(out, cfg, "train-models", [cfg.paths.ensemble])
    mses = ", ".join(f"{m:.5f}" for m in holdout_mses)
    print(f"trained {model.k} dynamics models; holdout MSE per member: {mses}")
    return EXIT_OK


def _cmd_train_policy(args) -> int:
    from .dataset import load_batch
    from .ensemble import load_ensemble
    from .trainer import save_policy, train_policy
    cfg = _resolve_config(args)
    cfg.train = _override(cfg.train, args,
                          ("horizon", "gamma", "epochs", "learning_rate",
                           "seed", "population", "minibatch"))
    out = _ensure_out(args)
    batch = load_batch(_require(os.path.join(out, cfg.paths.dataset)))
    model, _ = load_ensemble(_require(os.path.join(out, cfg.paths.ensemble)))
    policy, curve = train_policy(model, batch, cfg.train)
    rel_dir = f"{cfg.paths.policy_prefix}{cfg.train.seed}"
    save_policy(policy, os.path.join(out, rel_dir), cfg=cfg.train, curve=curve)
    _write_manifest(out, cfg, f"train-policy-{cfg.train.seed}", [rel_dir])
    last = curve[-1]
    print(f"policy seed {cfg.train.seed}: mean virtual return "
          f"{last.mean_virtual_return:.1f} after {last.epoch} epochs -> {rel_dir}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    from .ensemble import load_ensemble
    from .evaluate import evaluate_grid, save_report
    from .trainer import load_policy
    cfg = _resolve_config(args)
    cfg.eval = _override(cfg.eval, args, ("n_starts", "steps", "seed"))
    out = _ensure_out(args)
    model, _ = load_ensemble(_require(os.path.join(out, cfg.paths.ensemble)))
    dirs = _policy_dirs(out, cfg.paths.policy_prefix)
    if not dirs:
        raise MissingArtifact(os.path.join(out, cfg.paths.policy_prefix + "*"))
    policies = [load_policy(d)[0] for d in dirs]
    report = evaluate_grid(policies, model,
                           objectives=cfg.eval.objective_list(),
                           n_starts=cfg.eval.n_starts, steps=cfg.eval.steps,
                           train_horizon=cfg.train.horizon, seed=cfg.eval.seed)
    json_path = os.path.join(out, cfg.paths.report + ".json")
    csv_path = os.path.join(out, cfg.paths.report + ".csv")
    save_report(report, json_path, csv_path)
    _write_manifest(out, cfg, "evaluate",
                    [cfg.paths.report + ".json", cfg.paths.report + ".csv"])
    print(f"evaluated {len(policies)} policies on {cfg.eval.n_starts} starts")
    for row in report.rows:
        print(f"  {row.label}: real {row.real_mean:.1f} +/- {row.real_stderr:.1f}, "
              f"virtual {row.virtual_mean:.1f}")
    return EXIT_OK


def _pick_policy_dir(args, cfg, out: str) -> str:
    if args.policy:
        return _require(args.policy)
    seed = args.seed if args.seed is not None else cfg.train.seed
    return _require(os.path.join(out, f"{cfg.paths.policy_prefix}{seed}"))


def _cmd_scenario(args) -> int:
    from .evaluate import objective_switch_scenario, save_trajectory_csv
    from .trainer import load_policy
    cfg = _resolve_config(args)
    out = _ensure_out(args)
    policy, _ = load_policy(_pick_policy_dir(args, cfg, out))
    result = objective_switch_scenario(policy, args.omega_theta,
                                       omega_x_after=args.omega_x)
    stem = f"scenario_ot{args.omega_theta:g}"
    csv_path = os.path.join(out, stem + ".csv")
    save_trajectory_csv(csv_path, result.states, result.actions,
                        result.rewards, result.omegas)
    flags = {"omega_theta": result.omega_theta,
             "switch_step": result.switch_step,
             "reached_target": result.reached_target,
             "held_pole": result.held_pole,
             "swung_through": result.swung_through,
             "first_reach_step": result.first_reach_step}
    with open(os.path.join(out, stem + ".json"), "w") as f:
        f.write(json.dumps(flags, indent=2, sort_keys=True))
        f.write("\n")
    _write_manifest(out, cfg, f"scenario-ot{args.omega_theta:g}",
                    [stem + ".csv", stem + ".json"])
    print(f"omega_theta={args.omega_theta:g}: reached_target={result.reached_target} "
          f"held_pole={result.held_pole} swung_through={result.swung_through} "
          f"first_reach_step={result.first_reach_step}")
    return EXIT_OK


def _cmd_serve(args) -> int:
    from .cartpole import Objective
    from .service import run_service
    cfg = _resolve_config(args)
    cfg.service = _override(cfg.service, args,
                            ("host", "port", "tick_hz", "omega_x", "omega_theta"))
    out = _ensure_out(args)
    policy_dir = _pick_policy_dir(args, cfg, out)
    run_service(policy_dir, host=cfg.service.host, port=cfg.service.port,
                tick_hz=cfg.service.tick_hz,
                objective=Objective(cfg.service.omega_x, cfg.service.omega_theta),
                params=cfg.physics)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(sp):
    sp.add_argument("--config", metavar="PATH", default=None,
                    help="JSON config file; flags override it")
    sp.add_argument("--out", metavar="DIR", default="run",
                    help="run directory for all artifacts")
    sp.add_argument("--threads", type=int, default=None, metavar="N",
                    help="cap math-library worker threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vop",
        description="Offline training and live steering of an "
                    "objective-conditioned cart-pole policy.")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("gen-data", formatter_class=fmt,
                       help="generate the random-policy transition batch")
    _add_common(p)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train-models", formatter_class=fmt,
                       help="train the dynamics-model ensemble on the batch")
    _add_common(p)
    p.add_argument("--k", type=int, default=None, help="ensemble size")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", dest="learning_rate", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_train_models)

    p = sub.add_parser("train-policy", formatter_class=fmt,
                       help="train the objective-conditioned policy by "
                            "backprop through model rollouts")
    _add_common(p)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", dest="learning_rate", type=float, default=None)
    p.add_argument("--population", type=int, default=None)
    p.add_argument("--minibatch", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_train_policy)

    p = sub.add_parser("evaluate", formatter_class=fmt,
                       help="run the objective grid on every trained policy")
    _add_common(p)
    p.add_argument("--n-starts", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None,
                   help="start-state set seed")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("scenario", formatter_class=fmt,
                       help="run the mid-episode objective-switch scenario")
    _add_common(p)
    p.add_argument("--omega-theta", type=float, default=3.0,
                   help="pole-weight objective during the whole scenario")
    p.add_argument("--omega-x", type=float, default=1.0,
                   help="cart target after the switch")
    p.add_argument("--seed", type=int, default=None,
                   help="which trained policy seed to load")
    p.add_argument("--policy", metavar="DIR", default=None,
                   help="explicit policy directory (overrides --seed)")
    p.set_defaults(func=_cmd_scenario)

    p = sub.add_parser("serve", formatter_class=fmt,
                       help="serve the live steering interface")
    _add_common(p)
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--tick-hz", dest="tick_hz", type=float, default=None)
    p.add_argument("--omega-x", dest="omega_x", type=float, default=None,
                   help="initial cart target")
    p.add_argument("--omega-theta", dest="omega_theta", type=float, default=None,
                   help="initial pole weight")
    p.add_argument("--seed", type=int, default=None,
                   help="which trained policy seed to load")
    p.add_argument("--policy", metavar="DIR", default=None,
                   help="explicit policy directory (overrides --seed)")
    p.set_defaults(func=_cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    _cap_threads(args.threads)
    try:
        return args.func(args)
    except MissingArtifact as e:
        print(f"error: missing required artifact: {e.path}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
