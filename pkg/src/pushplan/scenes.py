"""Scene-file ingestion, shipped scenarios, plan validation and trace export.

Scenes are human-editable YAML with a mandatory units block (mm, deg, N, kg).
Parsing yields the grasp scene plus planner and solver settings; the canonical
serialized form is a fixed point of parse -> serialize -> parse.  run_plan
orchestrates one planning run and writes its artifacts, validate_plan replays
a stored plan through the forward oracle, and export_trace renders a plan as
a delimiter-separated table, one row per push step.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .contacts import FingerSpec, GraspScene, PatchShape, PusherSpec, basis_from_normal, discretize_patch
from .dynamics import SolverFailure, SolverOptions, forward_solve
from .geometry import Sphere, box_geometry, box_inertia, generalized_inertia, sphere_inertia
from .planner import (
    NotFoundError,
    Plan,
    PlannerParams,
    SamplingBounds,
    load_plan,
    plan_with_tree,
    save_plan,
    save_tree,
)
from .se3 import (
    MetricWeights,
    Pose,
    identity_pose,
    pose_distance,
    rotation_from_rpy_degrees,
    rpy_degrees,
    step_pose,
)

logger = logging.getLogger("pushplan.scenes")

SCENE_FORMAT_VERSION = 1
REQUIRED_UNITS = {"length": "mm", "angle": "deg", "force": "N", "mass": "kg"}
REPLAY_TOLERANCE = 1e-3  # scaled-mm per step, the plan replay invariant
TRACE_COLUMNS = (
    "step",
    "pusher",
    "x_mm",
    "y_mm",
    "z_mm",
    "rx_deg",
    "ry_deg",
    "rz_deg",
    "modes",
    "complementarity",
    "unilateral",
    "cone",
)


class SceneFormatError(ValueError):
    """Scene file rejected; the message carries source:line and the key path."""

    def __init__(self, source, line, path, message):
        location = f"{source}:{line}" if line is not None else str(source)
        full = f"{location}: {path}: {message}" if path else f"{location}: {message}"
        super().__init__(full)
        self.source = source
        self.line = line
        self.path = path


def _collect_lines(node, path, out):
    out.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            child = f"{path}.{key_node.value}" if path else str(key_node.value)
            out.setdefault(child, key_node.start_mark.line + 1)
            _collect_lines(value_node, child, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, value_node in enumerate(node.value):
            _collect_lines(value_node, f"{path}[{i}]", out)


class _Validator:
    """Typed accessors over the raw mapping, reporting source:line on errors."""

    def __init__(self, source: str, lines: dict):
        self.source = source
        self.lines = lines

    def fail(self, path: str, message: str):
        probe = path
        line = self.lines.get(probe)
        while line is None and probe:
            cut = max(probe.rfind("."), probe.rfind("["))
            probe = probe[:cut] if cut > 0 else ""
            line = self.lines.get(probe)
        raise SceneFormatError(self.source, line, path, message)

    def section(self, parent, key, path, required=True):
        if key not in parent:
            if required:
                self.fail(path, "missing required section")
            return {}
        value = parent[key]
        if not isinstance(value, dict):
            self.fail(path, "expected a mapping")
        return value

    def sequence(self, parent, key, path, required=True):
        if key not in parent:
            if required:
                self.fail(path, "missing required list")
            return []
        value = parent[key]
        if not isinstance(value, list):
            self.fail(path, "expected a list")
        return value

    def string(self, parent, key, path, choices=None, default=None, required=True):
        if key not in parent:
            if required and default is None:
                self.fail(path, "missing required key")
            return default
        value = parent[key]
        if not isinstance(value, str):
            self.fail(path, f"expected a string, got {type(value).__name__}")
        if choices is not None and value not in choices:
            self.fail(path, f"expected one of {sorted(choices)}, got {value!r}")
        return value

    def number(self, parent, key, path, default=None, minimum=None, maximum=None,
               required=True, integer=False):
        if key not in parent:
            if required and default is None:
                self.fail(path, "missing required key")
            return default
        value = parent[key]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(path, f"expected a number, got {type(value).__name__}")
        if integer:
            if float(value) != int(value):
                self.fail(path, "expected an integer")
            value = int(value)
        else:
            value = float(value)
        if minimum is not None and value < minimum:
            self.fail(path, f"must be >= {minimum}, got {value}")
        if maximum is not None and value > maximum:
            self.fail(path, f"must be <= {maximum}, got {value}")
        return value

    def vector(self, parent, key, path, length, default=None, required=True):
        if key not in parent:
            if required and default is None:
                self.fail(path, "missing required key")
            return None if default is None else [float(v) for v in default]
        value = parent[key]
        if not isinstance(value, list) or len(value) != length:
            self.fail(path, f"expected a list of {length} numbers")
        out = []
        for i, v in enumerate(value):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                self.fail(f"{path}[{i}]", "expected a number")
            out.append(float(v))
        return out

    def check_keys(self, parent, path, allowed):
        for key in parent:
            if key not in allowed:
                self.fail(f"{path}.{key}" if path else str(key), "unknown key")


@dataclass(frozen=True)
class ParsedScene:
    """A validated scene: built objects plus the canonical mapping."""

    scene: GraspScene
    params: PlannerParams
    options: SolverOptions
    q_goal: Pose
    name: str
    mapping: dict


def _validate_units(v: _Validator, data: dict):
    units = v.section(data, "units", "units")
    v.check_keys(units, "units", set(REQUIRED_UNITS))
    for key, expected in REQUIRED_UNITS.items():
        got = v.string(units, key, f"units.{key}")
        if got != expected:
            v.fail(f"units.{key}", f"unit mismatch: expected {expected!r}, got {got!r}")
    return dict(REQUIRED_UNITS)


def _build_patch_shape(v: _Validator, parent: dict, path: str) -> PatchShape:
    block = v.section(parent, "patch", path)
    v.check_keys(block, path, {"kind", "size"})
    kind = v.string(block, "kind", f"{path}.kind", choices=("point", "line", "circle"))
    if kind == "point":
        size = v.number(block, "size", f"{path}.size", default=0.0, required=False)
        if size not in (0, 0.0):
            v.fail(f"{path}.size", "point patches have no size")
        return PatchShape("point", 0.0)
    size = v.number(block, "size", f"{path}.size", minimum=1e-12)
    return PatchShape(kind, size)


def _patch_shape_mapping(shape: PatchShape) -> dict:
    return {"kind": shape.kind, "size": float(shape.dimension)}


def _build_object(v: _Validator, data: dict):
    obj = v.section(data, "object", "object")
    v.check_keys(obj, "object", {"shape", "size", "radius", "mass", "inertia"})
    shape = v.string(obj, "shape", "object.shape", choices=("box", "sphere"))
    mass = v.number(obj, "mass", "object.mass", minimum=0.0)
    canon = {"shape": shape, "mass": mass}
    if shape == "box":
        size = v.vector(obj, "size", "object.size", 3)
        if "radius" in obj:
            v.fail("object.radius", "a box has size, not radius")
        if min(size) <= 0:
            v.fail("object.size", "extents must be positive")
        geometry = box_geometry(size)
        auto_rotational = box_inertia(mass, size)
        canon["size"] = size
    else:
        radius = v.number(obj, "radius", "object.radius", minimum=1e-12)
        if "size" in obj:
            v.fail("object.size", "a sphere has radius, not size")
        geometry = Sphere(radius)
        auto_rotational = sphere_inertia(mass, radius)
        canon["radius"] = radius
    inertia_spec = obj.get("inertia", "auto")
    if isinstance(inertia_spec, str):
        if inertia_spec != "auto":
            v.fail("object.inertia", "expected 'auto' or a 3x3 matrix (kg*mm^2)")
        rotational = auto_rotational
        logger.info("object.inertia: auto -> computed from geometry and mass")
        canon["inertia"] = "auto"
    else:
        if not isinstance(inertia_spec, list) or len(inertia_spec) != 3:
            v.fail("object.inertia", "expected 'auto' or a 3x3 matrix (kg*mm^2)")
        rows = [v.vector({"row": row}, "row", f"object.inertia[{i}]", 3)
                for i, row in enumerate(inertia_spec)]
        rotational = np.array(rows)
        canon["inertia"] = [[float(x) for x in row] for row in rows]
    inertia = generalized_inertia(mass, rotational)
    return geometry, mass, inertia, canon


def _default_tangent_hint(approach) -> list:
    a = np.asarray(approach, dtype=float)
    hint = np.array([1.0, 0.0, 0.0])
    if abs(a @ hint) > 0.9 * np.linalg.norm(a):
        hint = np.array([0.0, 0.0, 1.0])
    return [float(x) for x in hint]


def _build_grasp(v: _Validator, data: dict):
    grasp = v.section(data, "grasp", "grasp")
    v.check_keys(grasp, "grasp", {"grip_force", "fingers"})
    grip_force = v.number(grasp, "grip_force", "grasp.grip_force", minimum=1e-12)
    raw_fingers = v.sequence(grasp, "fingers", "grasp.fingers")
    if len(raw_fingers) != 2:
        v.fail("grasp.fingers", f"exactly two fingers required, got {len(raw_fingers)}")
    fingers = []
    canon_fingers = []
    for i, raw in enumerate(raw_fingers):
        path = f"grasp.fingers[{i}]"
        if not isinstance(raw, dict):
            v.fail(path, "expected a mapping")
        v.check_keys(raw, path, {"id", "center", "approach", "patch", "friction", "tangent_hint"})
        name = v.string(raw, "id", f"{path}.id")
        center = v.vector(raw, "center", f"{path}.center", 3)
        approach = v.vector(raw, "approach", f"{path}.approach", 3)
        if float(np.linalg.norm(approach)) < 1e-12:
            v.fail(f"{path}.approach", "approach direction must be nonzero")
        shape = _build_patch_shape(v, raw, f"{path}.patch")
        mu = v.number(raw, "friction", f"{path}.friction", minimum=0.0)
        hint = v.vector(raw, "tangent_hint", f"{path}.tangent_hint",
                        3, default=None, required=False)
        if hint is None:
            hint = _default_tangent_hint(approach)
            logger.info("%s.tangent_hint: default %s", path, hint)
        fingers.append(FingerSpec(name, center, approach, shape, mu, hint))
        canon_fingers.append({
            "id": name,
            "center": center,
            "approach": approach,
            "patch": _patch_shape_mapping(shape),
            "friction": mu,
            "tangent_hint": hint,
        })
    names = [f.name for f in fingers]
    if len(set(names)) != 2:
        v.fail("grasp.fingers", "finger ids must be unique")
    canon = {"grip_force": grip_force, "fingers": canon_fingers}
    return tuple(fingers), grip_force, canon


def _build_pushers(v: _Validator, data: dict, geometry):
    raw_pushers = v.sequence(data, "pushers", "pushers")
    if not raw_pushers:
        v.fail("pushers", "at least one pusher required")
    faces = set(geometry.face_ids())
    pushers = []
    canon_pushers = []
    seen_ids = set()
    for i, raw in enumerate(raw_pushers):
        path = f"pushers[{i}]"
        if not isinstance(raw, dict):
            v.fail(path, "expected a mapping")
        v.check_keys(raw, path, {"id", "face", "center", "normal", "patch", "friction",
                                 "gravity_dir", "tangent_hint", "max_linear", "max_angular"})
        pid = v.string(raw, "id", f"{path}.id")
        if pid in seen_ids:
            v.fail(f"{path}.id", f"duplicate pusher id {pid!r}")
        seen_ids.add(pid)
        face = v.string(raw, "face", f"{path}.face")
        if face not in faces:
            v.fail(f"{path}.face", f"unknown face {face!r}; object has {sorted(faces)}")
        center = v.vector(raw, "center", f"{path}.center", 3)
        normal = v.vector(raw, "normal", f"{path}.normal", 3)
        if float(np.linalg.norm(normal)) < 1e-12:
            v.fail(f"{path}.normal", "normal must be nonzero")
        shape = _build_patch_shape(v, raw, f"{path}.patch")
        mu = v.number(raw, "friction", f"{path}.friction", minimum=0.0)
        gravity = v.vector(raw, "gravity_dir", f"{path}.gravity_dir", 3)
        hint = v.vector(raw, "tangent_hint", f"{path}.tangent_hint",
                        3, default=None, required=False)
        if hint is None:
            hint = [0.0, 1.0, 0.0]
            n = np.asarray(normal) / np.linalg.norm(normal)
            if abs(n @ np.array(hint)) > 0.9:
                hint = [1.0, 0.0, 0.0]
            logger.info("%s.tangent_hint: default %s", path, hint)
        max_linear = v.vector(raw, "max_linear", f"{path}.max_linear",
                              3, default=[10.0, 10.0, 10.0], required=False)
        max_angular = v.vector(raw, "max_angular", f"{path}.max_angular",
                               3, default=[0.5, 0.5, 0.5], required=False)
        try:
            basis = basis_from_normal(normal, hint)
            patch = discretize_patch(shape, center, basis, mu, owner=pid, face=face)
        except ValueError as exc:
            v.fail(path, str(exc))
        pushers.append(PusherSpec(pid, patch, gravity, max_linear, max_angular))
        canon_pushers.append({
            "id": pid,
            "face": face,
            "center": center,
            "normal": normal,
            "patch": _patch_shape_mapping(shape),
            "friction": mu,
            "gravity_dir": gravity,
            "tangent_hint": hint,
            "max_linear": max_linear,
            "max_angular": max_angular,
        })
    return tuple(pushers), canon_pushers


_PLANNER_KEYS = {
    "step_size", "goal_tolerance", "c_max", "T_init", "T_rate", "n_fail_max",
    "R_ball", "goal_bias", "rng_seed", "max_iterations",
    "metric_rotation_weight", "sampling_bounds",
}


def _build_planner(v: _Validator, data: dict):
    block = v.section(data, "planner", "planner")
    v.check_keys(block, "planner", _PLANNER_KEYS)
    defaults_logged = []

    def grab(key, kind="number", **kw):
        path = f"planner.{key}"
        if key not in block:
            defaults_logged.append(key)
        if kind == "int":
            return v.number(block, key, path, integer=True, required=False, **kw)
        return v.number(block, key, path, required=False, **kw)

    step_size = grab("step_size", default=1.0, minimum=1e-9)
    goal_tolerance = grab("goal_tolerance", default=1.0, minimum=1e-9)
    c_max = grab("c_max", default=math.inf)
    t_init = grab("T_init", default=1e-3, minimum=0.0)
    t_rate = grab("T_rate", default=2.0)
    n_fail_max = grab("n_fail_max", kind="int", default=20, minimum=1)
    r_ball = grab("R_ball", default=3.0 * step_size, minimum=1e-9)
    goal_bias = grab("goal_bias", default=0.1, minimum=0.0, maximum=0.999)
    rng_seed = grab("rng_seed", kind="int", default=0, minimum=0)
    max_iterations = grab("max_iterations", kind="int", default=300, minimum=1)
    rot_weight = grab("metric_rotation_weight",
                      default=MetricWeights().rotation, minimum=1e-12)

    sb = v.section(block, "sampling_bounds", "planner.sampling_bounds")
    v.check_keys(sb, "planner.sampling_bounds",
                 {"translation_low", "translation_high", "rotation_low", "rotation_high"})
    t_low = v.vector(sb, "translation_low", "planner.sampling_bounds.translation_low", 3)
    t_high = v.vector(sb, "translation_high", "planner.sampling_bounds.translation_high", 3)
    r_low_deg = v.vector(sb, "rotation_low", "planner.sampling_bounds.rotation_low", 3)
    r_high_deg = v.vector(sb, "rotation_high", "planner.sampling_bounds.rotation_high", 3)
    for axis in range(3):
        if t_low[axis] > t_high[axis]:
            v.fail("planner.sampling_bounds.translation_low",
                   f"axis {axis}: low bound exceeds high bound")
        if r_low_deg[axis] > r_high_deg[axis]:
            v.fail("planner.sampling_bounds.rotation_low",
                   f"axis {axis}: low bound exceeds high bound")
    bounds = SamplingBounds(
        t_low, t_high,
        [math.radians(a) for a in r_low_deg],
        [math.radians(a) for a in r_high_deg],
    )
    metric = MetricWeights(rotation=rot_weight)
    try:
        params = PlannerParams(
            sampling_bounds=bounds,
            step_size=step_size,
            goal_tolerance=goal_tolerance,
            c_max=c_max,
            T_init=t_init,
            T_rate=t_rate,
            n_fail_max=n_fail_max,
            R_ball=r_ball,
            metric_weights=metric,
            goal_bias=goal_bias,
            rng_seed=rng_seed,
            max_iterations=max_iterations,
        )
    except ValueError as exc:
        v.fail("planner", str(exc))
    if defaults_logged:
        logger.info("planner defaults applied: %s", ", ".join(sorted(defaults_logged)))
    canon = {
        "step_size": step_size,
        "goal_tolerance": goal_tolerance,
        "c_max": c_max,
        "T_init": t_init,
        "T_rate": t_rate,
        "n_fail_max": n_fail_max,
        "R_ball": params.R_ball,
        "goal_bias": goal_bias,
        "rng_seed": rng_seed,
        "max_iterations": max_iterations,
        "metric_rotation_weight": rot_weight,
        "sampling_bounds": {
            "translation_low": t_low,
            "translation_high": t_high,
            "rotation_low": r_low_deg,
            "rotation_high": r_high_deg,
        },
    }
    return params, canon


_SOLVER_FIELDS = {
    "complementarity_weight": ("number", {"minimum": 1e-12}),
    "tracking_weight": ("number", {"minimum": 0.0}),
    "smoothing_eps": ("number", {"minimum": 0.0}),
    "tol_feas": ("number", {"minimum": 0.0}),
    "tol_objective": ("number", {"minimum": 0.0}),
    "tol_complementarity": ("number", {"minimum": 0.0}),
    "max_iterations": ("int", {"minimum": 1}),
    "multi_start": ("int", {"minimum": 1}),
    "weight_boosts": ("int", {"minimum": 0}),
    "weight_boost_factor": ("number", {"minimum": 1.0 + 1e-9}),
    "progress_min": ("number", {"minimum": 0.0}),
    "mode_tol": ("number", {"minimum": 0.0}),
    "seed": ("int", {"minimum": 0}),
}


def _build_solver(v: _Validator, data: dict):
    block = v.section(data, "solver", "solver", required=False)
    v.check_keys(block, "solver", set(_SOLVER_FIELDS))
    defaults = SolverOptions()
    values = {}
    for key, (kind, kw) in _SOLVER_FIELDS.items():
        default = getattr(defaults, key)
        got = v.number(block, key, f"solver.{key}", required=False,
                       integer=(kind == "int"), **kw)
        values[key] = default if got is None else got
    missing = sorted(set(_SOLVER_FIELDS) - set(block))
    if missing:
        logger.info("solver defaults applied: %s", ", ".join(missing))
    options = SolverOptions(**values)
    return options, dict(sorted(values.items()))


def _build_goal(v: _Validator, data: dict):
    block = v.section(data, "goal", "goal")
    v.check_keys(block, "goal", {"translation", "rotation"})
    translation = v.vector(block, "translation", "goal.translation", 3)
    rotation_deg = v.vector(block, "rotation", "goal.rotation",
                            3, default=[0.0, 0.0, 0.0], required=False)
    q_goal = Pose(rotation_from_rpy_degrees(rotation_deg), translation)
    canon = {"translation": translation, "rotation": rotation_deg}
    return q_goal, canon


_TOP_KEYS = {"version", "name", "units", "object", "grasp", "pushers",
             "planner", "solver", "goal"}


def parse_scene_text(text: str, source: str = "<scene>") -> ParsedScene:
    """Validate scene YAML and build the scene plus planner/solver settings."""
    try:
        data = yaml.safe_load(text)
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise SceneFormatError(source, line, "", f"invalid YAML: {exc}") from exc
    lines: dict = {}
    if node is not None:
        _collect_lines(node, "", lines)
    if not isinstance(data, dict):
        raise SceneFormatError(source, 1, "", "scene file must be a mapping")
    v = _Validator(source, lines)
    v.check_keys(data, "", _TOP_KEYS)
    version = v.number(data, "version", "version", integer=True)
    if version != SCENE_FORMAT_VERSION:
        v.fail("version", f"unsupported scene format version {version}")
    name = v.string(data, "name", "name", default=Path(source).stem, required=False)
    units = _validate_units(v, data)
    geometry, mass, inertia, canon_object = _build_object(v, data)
    fingers, grip_force, canon_grasp = _build_grasp(v, data)
    pushers, canon_pushers = _build_pushers(v, data, geometry)
    params, canon_planner = _build_planner(v, data)
    options, canon_solver = _build_solver(v, data)
    q_goal, canon_goal = _build_goal(v, data)
    scene = GraspScene(
        mass=mass,
        inertia=inertia,
        fingers=fingers,
        grip_force=grip_force,
        pushers=pushers,
        geometry=geometry,
    )
    mapping = {
        "version": SCENE_FORMAT_VERSION,
        "name": name,
        "units": units,
        "object": canon_object,
        "grasp": canon_grasp,
        "pushers": canon_pushers,
        "planner": canon_planner,
        "solver": canon_solver,
        "goal": canon_goal,
    }
    return ParsedScene(scene, params, options, q_goal, name, mapping)


def parse_scene(path) -> ParsedScene:
    """Parse and validate a scene file."""
    p = Path(path)
    return parse_scene_text(p.read_text(encoding="utf-8"), source=str(p))


def _yaml_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, float):
        if math.isinf(value):
            return ".inf" if value > 0 else "-.inf"
        text = repr(float(value))
        if "e" in text and "." not in text:
            # YAML floats need a dot before the exponent; bare 1e-06 reads as a string
            text = text.replace("e", ".0e")
        return text
    return str(value)


def _yaml_flow_list(values) -> str:
    return "[" + ", ".join(_yaml_scalar(x) for x in values) + "]"


def _emit_mapping(out, mapping, indent):
    pad = "  " * indent
    for key, value in mapping.items():
        if isinstance(value, dict):
            out.append(f"{pad}{key}:")
            _emit_mapping(out, value, indent + 1)
        elif isinstance(value, list) and value and isinstance(value[0], dict):
            out.append(f"{pad}{key}:")
            for item in value:
                sub: list = []
                _emit_mapping(sub, item, indent + 1)
                sub[0] = sub[0][: indent * 2] + "- " + sub[0][indent * 2 + 2:]
                out.extend(sub)
        elif isinstance(value, list) and value and isinstance(value[0], list):
            out.append(f"{pad}{key}:")
            for item in value:
                out.append(f"{pad}  - {_yaml_flow_list(item)}")
        elif isinstance(value, list):
            out.append(f"{pad}{key}: {_yaml_flow_list(value)}")
        else:
            out.append(f"{pad}{key}: {_yaml_scalar(value)}")


def serialize_scene(parsed: ParsedScene) -> str:
    """Render the canonical scene text; parse(serialize(parse(x))) is stable."""
    out: list = []
    _emit_mapping(out, parsed.mapping, 0)
    return "\n".join(out) + "\n"


def scenario_dir() -> Path:
    return Path(str(resources.files("pushplan").joinpath("scenario_files")))


def available_scenarios() -> list:
    """Names of the shipped scenario files."""
    return sorted(p.stem for p in scenario_dir().glob("*.yaml"))


def scenario_path(name: str) -> Path:
    """Path of a shipped scenario; accepts a name or an existing file path."""
    direct = Path(name)
    if direct.exists():
        return direct
    candidate = scenario_dir() / f"{name}.yaml"
    if candidate.exists():
        return candidate
    raise FileNotFoundError(
        f"no scenario {name!r}; shipped: {', '.join(available_scenarios())}")


@dataclass(frozen=True)
class TraceRecord:
    """One exported step: pose in mm/deg plus contact and residual summary."""

    step: int
    pusher_id: str
    x_mm: float
    y_mm: float
    z_mm: float
    rx_deg: float
    ry_deg: float
    rz_deg: float
    modes: tuple
    complementarity: float | None
    unilateral: float | None
    cone: float | None


def trace_records(plan: Plan) -> tuple:
    records = []
    for step in plan.steps:
        rpy = rpy_degrees(step.pose_after.rotation)
        t = step.pose_after.translation
        records.append(TraceRecord(
            step=step.index,
            pusher_id=step.pusher_id,
            x_mm=float(t[0]),
            y_mm=float(t[1]),
            z_mm=float(t[2]),
            rx_deg=float(rpy[0]),
            ry_deg=float(rpy[1]),
            rz_deg=float(rpy[2]),
            modes=step.modes,
            complementarity=step.residuals.get("complementarity"),
            unilateral=step.residuals.get("unilateral"),
            cone=step.residuals.get("cone"),
        ))
    return tuple(records)


def export_trace(plan: Plan, path=None, delimiter: str = ",") -> str:
    """Render the plan as a delimiter-separated table (UTF-8, LF endings).

    Fixed column order per TRACE_COLUMNS; poses in mm and degrees; a plan
    with no steps yields the header row only.
    """
    rows = [delimiter.join(TRACE_COLUMNS)]
    for r in trace_records(plan):
        rows.append(delimiter.join([
            str(r.step),
            r.pusher_id,
            repr(r.x_mm),
            repr(r.y_mm),
            repr(r.z_mm),
            repr(r.rx_deg),
            repr(r.ry_deg),
            repr(r.rz_deg),
            "|".join(r.modes),
            "" if r.complementarity is None else repr(r.complementarity),
            "" if r.unilateral is None else repr(r.unilateral),
            "" if r.cone is None else repr(r.cone),
        ]))
    text = "\n".join(rows) + "\n"
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    return text


@dataclass(frozen=True)
class ValidationReport:
    """Forward-replay outcome for a stored plan."""

    ok: bool
    steps: int
    max_deviation: float  # scaled-mm, worst per-step pose error
    divergence_step: int | None
    residual_maxima: dict
    tolerance: float = REPLAY_TOLERANCE


def validate_plan(parsed: ParsedScene, plan_or_path, options: SolverOptions | None = None) -> ValidationReport:
    """Replay every stored pusher twist through the forward oracle.

    Each step starts from the plan's stored previous pose, so deviations are
    per step and do not compound.  A solver failure or a deviation above the
    replay tolerance marks divergence at that step index.
    """
    plan = plan_or_path if isinstance(plan_or_path, Plan) else load_plan(plan_or_path)
    options = options or parsed.options
    metric = parsed.params.metric_weights
    pose = plan.start_pose
    max_dev = 0.0
    divergence = None
    maxima: dict = {}
    warm = None
    prev_pusher = None
    for step in plan.steps:
        try:
            fwd = forward_solve(
                parsed.scene, pose, step.patch, step.pusher_twist,
                options=options,
                warm_start=warm if step.pusher_id == prev_pusher else None,
            )
        except SolverFailure:
            divergence = step.index
            break
        replayed = step_pose(pose, fwd.achieved_twist)
        deviation = pose_distance(replayed, step.pose_after, metric)
        max_dev = max(max_dev, deviation)
        for key, value in fwd.residuals.items():
            if isinstance(value, (int, float)):
                maxima[key] = max(maxima.get(key, 0.0), float(value))
        if deviation > REPLAY_TOLERANCE and divergence is None:
            divergence = step.index
            break
        pose = step.pose_after
        warm = fwd.raw_state
        prev_pusher = step.pusher_id
    ok = divergence is None and max_dev <= REPLAY_TOLERANCE
    return ValidationReport(
        ok=ok,
        steps=len(plan.steps),
        max_deviation=max_dev,
        divergence_step=divergence,
        residual_maxima=maxima,
    )


@dataclass(frozen=True)
class RunResult:
    """Artifacts and status of one planning run."""

    status: int  # 0 = plan found, 1 = not found (partial tree saved)
    plan: Plan | None
    iterations: int
    tree_nodes: int
    wall_time: float
    plan_path: Path | None
    tree_path: Path
    trace_path: Path | None
    summary_path: Path


def run_plan(parsed: ParsedScene, seed: int | None = None, out_dir=".",
             q_init: Pose | None = None, max_iterations: int | None = None) -> RunResult:
    """Plan once and write the artifact set into `out_dir`.

    Artifacts: plan file and trace table (when found), tree snapshot (always,
    partial on failure), and a run summary.  The exit status propagates a
    NotFound as 1 with the partial tree saved.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = parsed.params
    if seed is not None:
        params = dataclasses.replace(params, rng_seed=int(seed))
    if max_iterations is not None:
        params = dataclasses.replace(params, max_iterations=int(max_iterations))
    q_init = q_init or identity_pose()
    started = time.perf_counter()
    plan_obj: Plan | None = None
    try:
        plan_obj, tree = plan_with_tree(parsed.scene, q_init, parsed.q_goal,
                                        params, options=parsed.options)
        status = 0
    except NotFoundError as exc:
        tree = exc.tree
        status = 1
    wall = time.perf_counter() - started

    tree_path = out / f"{parsed.name}-seed{params.rng_seed}-tree.txt"
    save_tree(tree, tree_path)
    plan_path = None
    trace_path = None
    if plan_obj is not None:
        plan_path = out / f"{parsed.name}-seed{params.rng_seed}-plan.txt"
        save_plan(plan_obj, plan_path)
        trace_path = out / f"{parsed.name}-seed{params.rng_seed}-trace.csv"
        export_trace(plan_obj, trace_path)

    summary_path = out / f"{parsed.name}-seed{params.rng_seed}-summary.txt"
    summary = [
        "pushplan run-summary 1",
        f"scenario {parsed.name}",
        f"seed {params.rng_seed}",
        f"status {'found' if status == 0 else 'not-found'}",
        f"iterations {tree.iterations}",
        f"tree_nodes {len(tree)}",
        f"switch_count {plan_obj.switch_count if plan_obj else '-'}",
        f"final_error {repr(plan_obj.final_error) if plan_obj else '-'}",
        f"wall_time_s {wall:.3f}",
    ]
    with open(summary_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(summary) + "\n")
    logger.info("run_plan: %s", "; ".join(summary[3:]))
    return RunResult(
        status=status,
        plan=plan_obj,
        iterations=tree.iterations,
        tree_nodes=len(tree),
        wall_time=wall,
        plan_path=plan_path,
        tree_path=tree_path,
        trace_path=trace_path,
        summary_path=summary_path,
    )
