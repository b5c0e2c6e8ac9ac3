"""Command-line front end: plan, validate, export, inspect-tree.

Scenes come from a file path or a shipped scenario name.  Verbosity is the
only setting taken from the environment (PUSHPLAN_LOG, a logging level name);
everything else is an explicit flag.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .planner import load_plan, load_tree, save_plan
from .scenes import (
    SceneFormatError,
    available_scenarios,
    export_trace,
    parse_scene,
    run_plan,
    scenario_path,
    serialize_scene,
    validate_plan,
)
from .se3 import MetricWeights, Pose, rotation_from_rpy_degrees, rpy_degrees


def _configure_logging():
    level_name = os.environ.get("PUSHPLAN_LOG", "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(name)s %(levelname)s %(message)s")


def _load_scene(arg: str):
    return parse_scene(scenario_path(arg))


def _apply_overrides(parsed, args):
    """Fold --goal and --metric-rot-weight into the parsed scene."""
    import dataclasses

    q_goal = parsed.q_goal
    if args.goal is not None:
        values = [float(x) for x in args.goal.split(",")]
        if len(values) not in (3, 6):
            raise SystemExit("--goal expects x,y,z or x,y,z,rx,ry,rz (mm, deg)")
        rotation = rotation_from_rpy_degrees(values[3:6] if len(values) == 6 else [0, 0, 0])
        q_goal = Pose(rotation, values[:3])
    params = parsed.params
    if getattr(args, "metric_rot_weight", None) is not None:
        params = dataclasses.replace(
            params, metric_weights=MetricWeights(rotation=args.metric_rot_weight))
    return dataclasses.replace(parsed, q_goal=q_goal, params=params)


def _cmd_plan(args) -> int:
    parsed = _load_scene(args.scene)
    parsed = _apply_overrides(parsed, args)
    result = run_plan(parsed, seed=args.seed, out_dir=args.out,
                      max_iterations=args.max_iter)
    if result.status == 0:
        plan = result.plan
        print(f"plan found: {len(plan.steps)} steps, "
              f"{plan.switch_count} switch-overs, "
              f"final error {plan.final_error:.6f}")
        print(f"plan:  {result.plan_path}")
        print(f"trace: {result.trace_path}")
    else:
        print(f"no plan within {result.iterations} iterations "
              f"({result.tree_nodes} nodes); partial tree saved")
    print(f"tree:  {result.tree_path}")
    print(f"summary: {result.summary_path}")
    return result.status


def _cmd_validate(args) -> int:
    parsed = _load_scene(args.scene)
    report = validate_plan(parsed, args.plan)
    verdict = "VALID" if report.ok else "INVALID"
    print(f"{verdict}: {report.steps} steps, "
          f"max deviation {report.max_deviation:.3e} "
          f"(tolerance {report.tolerance:.1e})")
    if report.divergence_step is not None:
        print(f"divergence at step {report.divergence_step}")
    for key in sorted(report.residual_maxima):
        print(f"max {key}: {report.residual_maxima[key]:.3e}")
    return 0 if report.ok else 1


def _cmd_export(args) -> int:
    plan = load_plan(args.plan)
    out = Path(args.out) if args.out else None
    text = export_trace(plan, out, delimiter=args.delimiter)
    if out is None:
        sys.stdout.write(text)
    else:
        print(f"trace written: {out}")
    return 0


def _cmd_inspect_tree(args) -> int:
    tree = load_tree(args.tree)
    n = len(tree)
    depths = np.zeros(n, dtype=int)
    for i, node in enumerate(tree.nodes):
        if node.parent is not None:
            depths[i] = depths[node.parent] + 1
    by_pusher: dict = {}
    for node in tree.nodes[1:]:
        by_pusher[node.pusher_id] = by_pusher.get(node.pusher_id, 0) + 1
    print(f"nodes: {n}")
    print(f"max depth: {int(depths.max())}")
    print(f"leaf count: {sum(1 for c in tree.children if not c)}")
    costs = [node.node_cost for node in tree.nodes]
    print(f"node cost range: {min(costs):.6f} .. {max(costs):.6f}")
    for pid in sorted(by_pusher):
        print(f"edges via {pid}: {by_pusher[pid]}")
    if args.show_nodes:
        for i, node in enumerate(tree.nodes):
            t = node.config.translation
            rpy = rpy_degrees(node.config.rotation)
            print(f"node {i}: parent={node.parent if node.parent is not None else '-'} "
                  f"pusher={node.pusher_id or '-'} "
                  f"t=({t[0]:.3f}, {t[1]:.3f}, {t[2]:.3f}) "
                  f"rpy_deg=({rpy[0]:.3f}, {rpy[1]:.3f}, {rpy[2]:.3f}) "
                  f"cost={node.node_cost:.6f}")
    return 0


def _cmd_scene(args) -> int:
    if args.list:
        for name in available_scenarios():
            print(name)
        return 0
    parsed = _load_scene(args.scene)
    sys.stdout.write(serialize_scene(parsed))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pushplan",
        description="plan, validate and export in-grasp pushing sequences",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_plan = sub.add_parser("plan", help="plan a push sequence for a scene")
    p_plan.add_argument("--scene", required=True,
                        help="scene file path or shipped scenario name")
    p_plan.add_argument("--seed", type=int, default=None,
                        help="override the scene's planner seed")
    p_plan.add_argument("--goal", default=None,
                        help="override goal: x,y,z or x,y,z,rx,ry,rz (mm, deg)")
    p_plan.add_argument("--out", default=".", help="artifact output directory")
    p_plan.add_argument("--max-iter", type=int, default=None,
                        help="override the planner iteration budget")
    p_plan.add_argument("--metric-rot-weight", type=float, default=None,
                        help="override the distance-metric rotation weight")
    p_plan.set_defaults(func=_cmd_plan)

    p_val = sub.add_parser("validate", help="replay a stored plan step by step")
    p_val.add_argument("--scene", required=True)
    p_val.add_argument("--plan", required=True, help="plan file to validate")
    p_val.set_defaults(func=_cmd_validate)

    p_exp = sub.add_parser("export", help="export a plan as a trace table")
    p_exp.add_argument("--plan", required=True)
    p_exp.add_argument("--out", default=None, help="output path (default stdout)")
    p_exp.add_argument("--delimiter", default=",")
    p_exp.set_defaults(func=_cmd_export)

    p_tree = sub.add_parser("inspect-tree", help="summarize a tree snapshot")
    p_tree.add_argument("--tree", required=True)
    p_tree.add_argument("--show-nodes", action="store_true",
                        help="print one line per node")
    p_tree.set_defaults(func=_cmd_inspect_tree)

    p_scene = sub.add_parser("scene", help="print the canonical form of a scene")
    p_scene.add_argument("--scene", default=None)
    p_scene.add_argument("--list", action="store_true",
                         help="list shipped scenario names")
    p_scene.set_defaults(func=_cmd_scene)

    return parser


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "scene" and not args.list and args.scene is None:
        parser.error("scene requires --scene or --list")
    try:
        return args.func(args)
    except SceneFormatError as exc:
        print(f"scene error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
