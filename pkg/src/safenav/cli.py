"""Command-line entry point.

Subcommands: train, evaluate, verify, select (full pipeline), render-obs.
Settings layer as: built-in defaults < --config file < explicit flags.
Exit codes: 0 success, 1 domain error (bad input file, failed jobs),
2 usage error.  A verification that completes and reports SAT still exits
0 -- the tool succeeded; the policy failed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .geometry import BUILTIN_TUBE_IDS, resolve_tube
from .ioutil import read_json, write_json
from .network import load_network, save_network, validate_policy_shape
from .pipeline import RunManifest, run_select
from .simulator import EnvConfig, make_pose, observe, render_observation
from .training import (LagrangianPPOTrainer, PPOTrainer, TrainConfig,
                       evaluate_policy, train_policy)
from .verification import (VerifierConfig, builtin_properties, check_property,
                           load_properties, save_properties)

OUTPUT_ROOT_ENV = "SAFENAV_OUT"


class CliError(Exception):
    """Domain error: message printed to stderr, exit code 1."""


def _load_config_file(path, section):
    if path is None:
        return {}
    try:
        doc = read_json(path)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise CliError(f"{path}: not valid JSON: {e}")
    if section is not None:
        doc = doc.get(section, {})
    if not isinstance(doc, dict):
        raise CliError(f"{path}: expected a JSON object")
    return doc


def _out_root(explicit):
    if explicit:
        return explicit
    return os.environ.get(OUTPUT_ROOT_ENV, ".")


def cmd_train(args) -> int:
    doc = _load_config_file(args.config, "train")
    doc["method"] = args.method
    if args.episodes is not None:
        doc["total_episodes"] = args.episodes
    try:
        config = TrainConfig.from_dict(doc)
        env_cfg = EnvConfig.from_dict(_load_config_file(args.config, "env"))
        tube = resolve_tube(args.tube)
    except (ValueError, FileNotFoundError) as e:
        raise CliError(str(e))
    policy, record = train_policy(tube, config, args.seed, env_config=env_cfg)
    out = os.path.join(_out_root(args.out), "")
    net_path = os.path.join(out, f"{args.method}_seed{args.seed}.json")
    rec_path = os.path.join(out, f"{args.method}_seed{args.seed}.csv")
    save_network(policy, net_path)
    record.to_csv(rec_path)
    if record.failure is not None:
        raise CliError(f"training aborted: {record.failure} "
                       f"(partial record at {rec_path})")
    print(f"trained {args.method} seed {args.seed} on {tube.tube_id}: "
          f"episodes={record.n_episodes} "
          f"trailing_success={record.trailing_success_rate():.3f} "
          f"trailing_cost={record.trailing_mean_cost():.1f}")
    print(f"network: {net_path}")
    print(f"record:  {rec_path}")
    return 0


def cmd_evaluate(args) -> int:
    try:
        net = load_network(args.net)
        validate_policy_shape(net)
        tube = resolve_tube(args.tube)
        env_cfg = EnvConfig.from_dict(_load_config_file(args.config, "env"))
    except (ValueError, FileNotFoundError) as e:
        raise CliError(str(e))
    res = evaluate_policy(net, tube, args.episodes, env_config=env_cfg,
                          seed_base=args.seed_base)
    print(json.dumps(res, indent=1, sort_keys=True))
    return 0


def cmd_verify(args) -> int:
    try:
        net = load_network(args.net)
        validate_policy_shape(net)
        if args.props is None:
            props = builtin_properties()
        else:
            props = load_properties(args.props)
        doc = _load_config_file(args.config, "verifier")
        if args.max_depth is not None:
            doc["max_depth"] = args.max_depth
        config = VerifierConfig.from_dict(doc)
    except (ValueError, FileNotFoundError) as e:
        raise CliError(str(e))
    results = {}
    for prop in props:
        res = check_property(net, prop, config)
        results[prop.name] = res
        line = (f"{prop.name}: {res.verdict}  "
                f"(subproblems={res.stats['subproblems']}, "
                f"depth={res.stats['max_depth']}, "
                f"seconds={res.stats['seconds']:.2f})")
        print(line)
        if res.witness is not None:
            print(f"  witness: {np.array2string(res.witness, precision=4)}")
    safe = all(r.verdict == "UNSAT" for r in results.values())
    print(f"safe: {safe}")
    if args.out:
        write_json(args.out, {name: r.to_dict() for name, r in results.items()})
        print(f"results written to {args.out}")
    return 0


def cmd_select(args) -> int:
    try:
        manifest = RunManifest.load(args.manifest)
    except (ValueError, FileNotFoundError) as e:
        raise CliError(str(e))
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    report, n_failed = run_select(manifest, jobs=args.jobs, log=log)
    print(open(os.path.join(manifest.report_dir, "report.txt")).read(), end="")
    if n_failed:
        raise CliError(f"{n_failed} job(s) failed; see report")
    return 0


def cmd_render_obs(args) -> int:
    try:
        tube = resolve_tube(args.tube)
        env_cfg = EnvConfig.from_dict(_load_config_file(args.config, "env"))
    except (ValueError, FileNotFoundError) as e:
        raise CliError(str(e))
    x, y, z, yaw, pitch, roll = args.pose
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    forward = np.array([cp * cy, cp * sy, sp])
    ref = np.array([0.0, 0.0, 1.0])
    if abs(forward @ ref) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    up = ref - (ref @ forward) * forward
    up /= np.linalg.norm(up)
    if roll != 0.0:
        right = np.cross(forward, up)
        up = np.cos(roll) * up + np.sin(roll) * right
    state = make_pose(tube, (x, y, z), forward, up)
    print(render_observation(observe(tube, state, env_cfg)))
    return 0


def cmd_make_props(args) -> int:
    save_properties(args.out, builtin_properties())
    print(f"built-in safety properties written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="safenav",
        description="Train, evaluate, formally verify, and select tube-navigation policies.")
    parser.add_argument("--version", action="version",
                        version=f"safenav {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one policy on a tube")
    p.add_argument("--method", choices=("ppo", "lppo"), required=True,
                   help="plain PPO or Lagrangian-constrained PPO")
    p.add_argument("--tube", required=True,
                   help=f"builtin id {BUILTIN_TUBE_IDS} or a tube spec file")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default=None,
                   help=f"output directory (default ${OUTPUT_ROOT_ENV} or .)")
    p.add_argument("--episodes", type=int, default=None,
                   help="override total training episodes")
    p.add_argument("--config", default=None,
                   help="JSON config file with 'train'/'env' sections")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="greedy evaluation of a saved policy")
    p.add_argument("--net", required=True, help="network file")
    p.add_argument("--tube", required=True)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed-base", type=int, default=0)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("verify", help="check safety properties of a policy")
    p.add_argument("--net", required=True, help="network file")
    p.add_argument("--props", default=None,
                   help="property file (default: the four built-ins)")
    p.add_argument("--max-depth", type=int, default=None)
    p.add_argument("--out", default=None, help="write results JSON here")
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("select", help="run the full train/screen/verify pipeline")
    p.add_argument("--manifest", required=True, help="manifest JSON file")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                   help="worker processes (default: logical cores)")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_select)

    p = sub.add_parser("render-obs", help="print the 4x4 observation of a pose")
    p.add_argument("--tube", required=True)
    p.add_argument("--pose", type=float, nargs=6, required=True,
                   metavar=("X", "Y", "Z", "YAW", "PITCH", "ROLL"),
                   help="position (mm) and orientation (rad)")
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_render_obs)

    p = sub.add_parser("make-props", help="write the builtin property file")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_make_props)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
