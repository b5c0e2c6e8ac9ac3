"""Transition-based optimal tree search over grasp configurations.

Grows a tree of object poses rooted at the start grasp.  Each edge is one
unit push computed by the inverse-dynamics solver; node costs accumulate
distance-to-goal plus a per-push cost that charges pusher switch-overs ten
times more than continuations, so cheap plans keep the same pusher engaged.
Sampling is filtered through a stochastic transition test with an adaptive
temperature (the T-RRT rule): downhill moves always pass, uphill moves pass
with probability exp(-dC/(K*T)), and the temperature rises when the search
stalls.  New nodes pick the cheapest parent among near neighbors and rewire
the neighborhood afterwards, in the usual RRT* fashion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .contacts import ContactPatch, GraspScene, basis_from_normal, discretize_patch, finger_within_face
from .dynamics import (
    SolverFailure,
    SolverOptions,
    assemble_problem,
    evolve_pusher_patch,
    solve_inverse_dynamics,
)
from .se3 import (
    MetricWeights,
    Pose,
    Twist,
    interpolate_pose,
    pose_distance,
    relative_twist,
    rotation_from_rotvec,
    rotvec_from_rotation,
    step_pose,
)

# cost of the instantaneous push: low when the previous pusher keeps contact,
# high when the plan switches to a different pusher
PUSH_CONTINUE = 0.1
PUSH_SWITCH = 1.0

TREE_FORMAT_VERSION = 1
PLAN_FORMAT_VERSION = 1


class NotFoundError(RuntimeError):
    """No tree node reached the goal tolerance within the iteration budget."""

    def __init__(self, message: str, tree: "Tree | None" = None):
        super().__init__(message)
        self.tree = tree


@dataclass(frozen=True)
class SamplingBounds:
    """Axis-aligned configuration ranges: translation in mm, rotation as
    per-axis rotation-vector components in radians."""

    translation_low: np.ndarray
    translation_high: np.ndarray
    rotation_low: np.ndarray
    rotation_high: np.ndarray

    def __post_init__(self):
        for name in ("translation_low", "translation_high", "rotation_low", "rotation_high"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(3).copy()
            v.flags.writeable = False
            object.__setattr__(self, name, v)
        if np.any(self.translation_low > self.translation_high) or np.any(
            self.rotation_low > self.rotation_high
        ):
            raise ValueError("sampling bounds must have low <= high")

    def contains(self, pose: Pose, tol: float = 1e-9) -> bool:
        t = pose.translation
        r = rotvec_from_rotation(pose.rotation)
        return bool(
            np.all(t >= self.translation_low - tol)
            and np.all(t <= self.translation_high + tol)
            and np.all(r >= self.rotation_low - tol)
            and np.all(r <= self.rotation_high + tol)
        )

    def sample_pose(self, rng: np.random.Generator) -> Pose:
        t = self.translation_low + rng.random(3) * (self.translation_high - self.translation_low)
        r = self.rotation_low + rng.random(3) * (self.rotation_high - self.rotation_low)
        return Pose(rotation_from_rotvec(r), t)


@dataclass(frozen=True)
class PlannerParams:
    sampling_bounds: SamplingBounds
    step_size: float = 1.0  # scaled-mm
    goal_tolerance: float = 1.0  # scaled-mm
    c_max: float = math.inf  # max admissible configuration cost
    T_init: float = 1e-3
    T_rate: float = 2.0
    n_fail_max: int = 20
    R_ball: float | None = None  # defaults to 3 * step_size
    metric_weights: MetricWeights = field(default_factory=MetricWeights)
    goal_bias: float = 0.1
    rng_seed: int = 0
    max_iterations: int = 300

    def __post_init__(self):
        if self.R_ball is None:
            object.__setattr__(self, "R_ball", 3.0 * self.step_size)
        positives = {
            "step_size": self.step_size,
            "goal_tolerance": self.goal_tolerance,
            "c_max": self.c_max,
            "T_init": self.T_init,
            "n_fail_max": self.n_fail_max,
            "R_ball": self.R_ball,
            "max_iterations": self.max_iterations,
        }
        for name, value in positives.items():
            if not value > 0:
                raise ValueError(f"{name} must be positive")
        if self.T_rate <= 1.0:
            raise ValueError("T_rate must exceed 1")
        if not 0.0 <= self.goal_bias < 1.0:
            raise ValueError("goal_bias must lie in [0, 1)")
        if self.step_size > self.R_ball:
            raise ValueError("step_size must not exceed R_ball")


@dataclass
class TemperatureState:
    temperature: float
    n_fail: int = 0


@dataclass
class Node:
    """One tree vertex: the object pose reached and the push that got there."""

    config: Pose
    parent: int | None
    pusher_id: str | None  # pusher of the incoming push; None at the root
    pusher_patch: ContactPatch | None  # evolved patch after the incoming push
    incoming_twist: Twist | None  # pusher twist of the incoming push
    node_cost: float
    push_cost: float
    edge_patch: ContactPatch | None = None  # patch the incoming solve started from
    edge_twist: Twist | None = None  # achieved object twist of the incoming push
    edge_residuals: dict | None = None
    raw_state: np.ndarray | None = None  # solver state, reused as warm start


class Tree:
    """Append-only search tree with a vectorized exact-metric index."""

    def __init__(self, root: Node, metric: MetricWeights):
        if root.parent is not None:
            raise ValueError("root must have no parent")
        self.metric = metric
        self.nodes: list[Node] = [root]
        self.children: list[list[int]] = [[]]
        self._translations = [root.config.translation]
        self._rotations = [root.config.rotation]
        self.iterations = 0  # extension attempts consumed while growing this tree

    def __len__(self) -> int:
        return len(self.nodes)

    def add(self, node: Node) -> int:
        if node.parent is None or not 0 <= node.parent < len(self.nodes):
            raise ValueError("new node needs an existing parent")
        self.nodes.append(node)
        self.children.append([])
        self.children[node.parent].append(len(self.nodes) - 1)
        self._translations.append(node.config.translation)
        self._rotations.append(node.config.rotation)
        return len(self.nodes) - 1

    def distances(self, q: Pose) -> np.ndarray:
        """Scaled metric distance from every node to `q`, in insertion order."""
        T = np.stack(self._translations)
        R = np.stack(self._rotations)
        dt = np.linalg.norm(T - q.translation, axis=1)
        tr = np.einsum("nij,ij->n", R, q.rotation)  # trace of R_n^T @ R_q
        ang = np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))
        return np.hypot(self.metric.translation * dt, self.metric.rotation * ang)

    def nearest(self, q: Pose) -> int:
        return int(np.argmin(self.distances(q)))

    def ball(self, q: Pose, radius: float) -> list[int]:
        d = self.distances(q)
        return [int(i) for i in np.flatnonzero(d <= radius)]

    def ancestors(self, i: int) -> set[int]:
        out = set()
        p = self.nodes[i].parent
        while p is not None:
            out.add(p)
            p = self.nodes[p].parent
        return out

    def path_to_root(self, i: int) -> list[int]:
        path = [i]
        while self.nodes[path[-1]].parent is not None:
            path.append(self.nodes[path[-1]].parent)
        return path[::-1]

    def reparent(self, i: int, new_parent: int, pusher_id: str, push_cost: float,
                 node_cost: float, prop: "PropagationResult", edge_patch: ContactPatch):
        node = self.nodes[i]
        self.children[node.parent].remove(i)
        self.children[new_parent].append(i)
        node.parent = new_parent
        node.pusher_id = pusher_id
        node.push_cost = push_cost
        node.node_cost = node_cost
        node.pusher_patch = prop.evolved_patch
        node.incoming_twist = prop.pusher_twist
        node.edge_patch = edge_patch
        node.edge_twist = prop.achieved_twist
        node.edge_residuals = prop.residuals
        node.raw_state = prop.raw_state

    def propagate_costs(self, i: int, q_goal: Pose):
        """Recompute costs below node `i` after its cost or pusher changed."""
        stack = [i]
        while stack:
            k = stack.pop()
            parent = self.nodes[k]
            for c in self.children[k]:
                child = self.nodes[c]
                pc = PUSH_CONTINUE if child.pusher_id == parent.pusher_id else PUSH_SWITCH
                child.push_cost = pc
                child.node_cost = (
                    parent.node_cost + pose_distance(child.config, q_goal, self.metric) + pc
                )
                stack.append(c)

    def recomputed_cost(self, i: int, q_goal: Pose) -> float:
        """Path cost of node `i` recomputed from the root, for invariant checks."""
        total = 0.0
        for k in self.path_to_root(i):
            total += pose_distance(self.nodes[k].config, q_goal, self.metric)
            total += self.nodes[k].push_cost
        return total


@dataclass(frozen=True)
class PropagationResult:
    """Outcome of propagating one candidate push from a known pose."""

    achieved_twist: Twist
    pusher_twist: Twist
    evolved_patch: ContactPatch
    modes: tuple[str, ...]
    residuals: dict
    raw_state: np.ndarray | None = None


class DynamicsPropagator:
    """Default propagation: assemble and solve the contact problem, then
    evolve the pusher patch by the observed contact slip."""

    def __init__(self, scene: GraspScene, options: SolverOptions, metric: MetricWeights):
        self.scene = scene
        self.options = options
        self.metric = metric

    def __call__(self, pose: Pose, patch: ContactPatch, desired: Twist,
                 warm_start: np.ndarray | None = None) -> PropagationResult:
        system = assemble_problem(
            self.scene, pose, patch, desired, metric=self.metric, options=self.options
        )
        if warm_start is not None and warm_start.size != system.dim:
            warm_start = None
        result = solve_inverse_dynamics(system, self.options, warm_start=warm_start)
        evolved = evolve_pusher_patch(patch, result, self.scene.geometry)
        summary = {
            k: float(v)
            for k, v in result.residuals.items()
            if isinstance(v, (int, float)) and k != "impulse_scale"
        }
        return PropagationResult(
            achieved_twist=result.achieved_twist,
            pusher_twist=result.pusher_twist,
            evolved_patch=evolved,
            modes=result.modes,
            residuals=summary,
            raw_state=result.raw_state,
        )


@dataclass
class PlanContext:
    """Shared state of one planning run."""

    scene: GraspScene
    params: PlannerParams
    q_goal: Pose
    rng: np.random.Generator
    temp: TemperatureState
    propagate: DynamicsPropagator


@dataclass(frozen=True)
class ExtendResult:
    node_index: int | None
    reason: str | None  # transition-rejected | dynamics-infeasible | grasp-lost


@dataclass(frozen=True)
class PushStep:
    index: int
    pusher_id: str
    patch: ContactPatch  # pusher patch at the start of the step
    pusher_twist: Twist
    object_twist: Twist
    pose_after: Pose
    modes: tuple[str, ...]
    residuals: dict


@dataclass(frozen=True)
class Segment:
    pusher_id: str
    patches: tuple[ContactPatch, ...]
    pusher_twists: tuple[Twist, ...]
    poses: tuple[Pose, ...]


@dataclass(frozen=True)
class Plan:
    start_pose: Pose
    goal_pose: Pose
    steps: tuple[PushStep, ...]
    segments: tuple[Segment, ...]
    switch_count: int
    final_error: float  # scaled-mm


def sample_random_configuration(params: PlannerParams, rng: np.random.Generator,
                                q_goal: Pose | None = None) -> Pose:
    """Uniform sample over the bounds, biased toward the goal."""
    if q_goal is not None and params.goal_bias > 0.0 and rng.random() < params.goal_bias:
        return q_goal
    return params.sampling_bounds.sample_pose(rng)


def transition_test(q_a: Pose, q_b: Pose, state: TemperatureState, params: PlannerParams,
                    rng: np.random.Generator, q_goal: Pose) -> bool:
    """Stochastic filter on configuration-cost increases.

    Downhill moves always pass.  Uphill moves pass with probability
    exp(-dC/(K*T)) where dC is the cost slope along the move and K the mean
    cost; acceptances cool the temperature, repeated rejections heat it.
    """
    m = params.metric_weights
    c_a = pose_distance(q_a, q_goal, m)
    c_b = pose_distance(q_b, q_goal, m)
    if c_b < c_a:
        return True
    if c_b > params.c_max:
        _register_rejection(state, params)
        return False
    d = pose_distance(q_a, q_b, m)
    slope = (c_b - c_a) / d if d > 1e-12 else 0.0
    k = (c_a + c_b) / 2.0
    if slope <= 0.0 or k <= 0.0:
        prob = 1.0
    else:
        prob = math.exp(-slope / (k * state.temperature))
    if rng.random() < prob:
        state.temperature /= params.T_rate
        state.n_fail = 0
        return True
    _register_rejection(state, params)
    return False


def _register_rejection(state: TemperatureState, params: PlannerParams):
    state.n_fail += 1
    if state.n_fail >= params.n_fail_max:
        state.temperature *= params.T_rate
        state.n_fail = 0


def nearest_neighbor(tree: Tree, q: Pose) -> int:
    """Index of the node nearest to `q`; ties go to the lowest index."""
    return tree.nearest(q)


def node_cost(parent: Node, q: Pose, same_pusher: bool, q_goal: Pose,
              metric: MetricWeights) -> float:
    push = PUSH_CONTINUE if same_pusher else PUSH_SWITCH
    return parent.node_cost + pose_distance(q, q_goal, metric) + push


def grasp_maintained(scene: GraspScene, q: Pose, params: PlannerParams) -> bool:
    """Fingers keep their full footprint on the grasped faces and the pose
    stays inside the sampling bounds."""
    if not params.sampling_bounds.contains(q):
        return False
    return all(finger_within_face(scene, f, q) for f in scene.fingers)


def _pusher_can_drive(scene: GraspScene, pose: Pose, patch: ContactPatch,
                      desired: Twist) -> bool:
    """Cheap necessary condition for a push to produce the desired twist.

    Pusher normals only push, and tangential drag needs normal motion into
    the pusher to recruit friction.  When every patch point moves along the
    desired twist with less than 5% of its speed into the pusher normal, and
    gravity has no component that direction either, the solve is skipped.
    """
    n = patch.basis.normal
    w = desired.angular
    v = desired.linear
    for p in patch.points:
        vp = v + np.cross(w, p.position)
        if vp @ n >= 0.05 * float(np.linalg.norm(vp)) - 1e-12:
            return True
    gravity_obj = pose.rotation.T @ scene.pusher(patch.owner).gravity_dir
    return bool(gravity_obj @ n < -1e-9)


def _patch_key(pusher_id: str, patch: ContactPatch) -> tuple:
    return (pusher_id, patch.center.tobytes(), patch.basis.as_matrix().tobytes())


def _connection_candidates(ctx: PlanContext, node: Node):
    """Pushers to try from `node`: its evolved patch first, then the catalog
    at initial locations, skipping exact duplicates of the evolved patch."""
    out = []
    seen = set()
    if node.pusher_id is not None and node.pusher_patch is not None:
        out.append((node.pusher_id, node.pusher_patch, node.raw_state))
        seen.add(_patch_key(node.pusher_id, node.pusher_patch))
    for spec in ctx.scene.pushers:
        key = _patch_key(spec.pusher_id, spec.patch)
        if key in seen:
            continue
        out.append((spec.pusher_id, spec.patch, None))
    return out


def extend(tree: Tree, q_rand: Pose, ctx: PlanContext) -> ExtendResult:
    """One growth attempt: step from the nearest node toward the sample."""
    params = ctx.params
    metric = params.metric_weights
    parent_idx = nearest_neighbor(tree, q_rand)
    parent = tree.nodes[parent_idx]
    d_rand = pose_distance(parent.config, q_rand, metric)
    if d_rand < 1e-12:
        return ExtendResult(None, "transition-rejected")
    q_ideal = interpolate_pose(parent.config, q_rand, min(1.0, params.step_size / d_rand))
    if not transition_test(parent.config, q_ideal, ctx.temp, params, ctx.rng, ctx.q_goal):
        return ExtendResult(None, "transition-rejected")
    if not grasp_maintained(ctx.scene, q_ideal, params):
        return ExtendResult(None, "grasp-lost")

    desired = relative_twist(parent.config, q_ideal)
    best = None  # (sort key, pusher_id, propagation, achieved pose, edge patch)
    solved_any = False
    for order, (pid, patch, warm) in enumerate(_connection_candidates(ctx, parent)):
        if not _pusher_can_drive(ctx.scene, parent.config, patch, desired):
            continue
        try:
            prop = ctx.propagate(parent.config, patch, desired, warm)
        except SolverFailure:
            continue
        solved_any = True
        q_c = step_pose(parent.config, prop.achieved_twist)
        # a solve whose landing pose leaves the admissible box could only be
        # rejected later, discarding the whole sweep; rank valid landings only
        if not grasp_maintained(ctx.scene, q_c, params):
            continue
        d_c = pose_distance(q_c, q_ideal, metric)
        same = parent.pusher_id is None or pid == parent.pusher_id
        key = (d_c, 0 if same else 1, order)
        if best is None or key < best[0]:
            best = (key, pid, prop, q_c, patch)
        if d_c <= 0.25 * params.step_size:
            break
    if best is None:
        return ExtendResult(None, "grasp-lost" if solved_any else "dynamics-infeasible")
    _, pid, prop, q_new, edge_patch = best

    if not transition_test(parent.config, q_new, ctx.temp, params, ctx.rng, ctx.q_goal):
        return ExtendResult(None, "transition-rejected")

    choice = optimal_connection(tree, q_new, parent_idx, (pid, prop, edge_patch), ctx)
    best_parent, pid, prop, edge_patch, push, cost, config = choice
    idx = tree.add(
        Node(
            config=config,
            parent=best_parent,
            pusher_id=pid,
            pusher_patch=prop.evolved_patch,
            incoming_twist=prop.pusher_twist,
            node_cost=cost,
            push_cost=push,
            edge_patch=edge_patch,
            edge_twist=prop.achieved_twist,
            edge_residuals=prop.residuals,
            raw_state=prop.raw_state,
        )
    )
    rewire_tree(tree, idx, ctx)
    return ExtendResult(idx, None)


def optimal_connection(tree: Tree, q_new: Pose, parent_idx: int, default_edge, ctx: PlanContext):
    """Pick the cheapest parent for `q_new` among near neighbors.

    A neighbor qualifies when one unit push from it lands within
    goal_tolerance of `q_new`; the adopted node keeps the achieved pose of
    whichever edge wins.  Returns (parent index, pusher id, propagation,
    edge patch, push cost, node cost, config).
    """
    params = ctx.params
    metric = params.metric_weights
    d_goal = pose_distance(q_new, ctx.q_goal, metric)
    parent = tree.nodes[parent_idx]
    pid0, prop0, patch0 = default_edge
    same0 = parent.pusher_id is None or pid0 == parent.pusher_id
    push0 = PUSH_CONTINUE if same0 else PUSH_SWITCH
    best = (parent_idx, pid0, prop0, patch0, push0, parent.node_cost + d_goal + push0, q_new)

    # a connection may land anywhere within goal_tolerance of q_new, so its
    # goal distance is at least d_goal - goal_tolerance
    slack = max(0.0, d_goal - params.goal_tolerance)
    neighbors = sorted(tree.ball(q_new, params.R_ball),
                       key=lambda i: (tree.nodes[i].node_cost, i))
    for i in neighbors:
        if i == parent_idx:
            continue
        r = tree.nodes[i]
        if r.node_cost + slack + PUSH_CONTINUE >= best[5] - 1e-12:
            break  # neighbors are cost-sorted: no later one can win
        desired = relative_twist(r.config, q_new)
        for pid, patch, warm in _connection_candidates(ctx, r):
            same = r.pusher_id is None or pid == r.pusher_id
            push = PUSH_CONTINUE if same else PUSH_SWITCH
            if r.node_cost + slack + push >= best[5] - 1e-12:
                continue
            if not _pusher_can_drive(ctx.scene, r.config, patch, desired):
                continue
            try:
                prop = ctx.propagate(r.config, patch, desired, warm)
            except SolverFailure:
                continue
            q_c = step_pose(r.config, prop.achieved_twist)
            if pose_distance(q_c, q_new, metric) > params.goal_tolerance:
                continue
            if not grasp_maintained(ctx.scene, q_c, params):
                continue
            cost = r.node_cost + pose_distance(q_c, ctx.q_goal, metric) + push
            if cost < best[5] - 1e-12:
                best = (i, pid, prop, patch, push, cost, q_c)
            break  # cheaper pushers were tried first; good enough for budget
    return best


def rewire_tree(tree: Tree, new_idx: int, ctx: PlanContext):
    """Reroute near neighbors through the new node when that lowers their cost."""
    params = ctx.params
    metric = params.metric_weights
    new = tree.nodes[new_idx]
    blocked = tree.ancestors(new_idx) | {new_idx, 0}
    for i in sorted(tree.ball(new.config, params.R_ball)):
        if i in blocked:
            continue
        r = tree.nodes[i]
        d_r_goal = pose_distance(r.config, ctx.q_goal, metric)
        if new.node_cost + d_r_goal + PUSH_CONTINUE >= r.node_cost - 1e-12:
            continue
        desired = relative_twist(new.config, r.config)
        for pid, patch, warm in _connection_candidates(ctx, new):
            push = PUSH_CONTINUE if pid == new.pusher_id else PUSH_SWITCH
            cost = new.node_cost + d_r_goal + push
            if cost >= r.node_cost - 1e-12:
                continue
            # a reparent changes r's incoming pusher: a child sharing the old
            # pusher would see its push cost jump, so require that no
            # descendant cost increases
            worst = 0.0
            for c in tree.children[i]:
                child = tree.nodes[c]
                new_pc = PUSH_CONTINUE if child.pusher_id == pid else PUSH_SWITCH
                worst = max(worst, new_pc - child.push_cost)
            if cost - r.node_cost + worst > -1e-12:
                continue
            if not _pusher_can_drive(ctx.scene, new.config, patch, desired):
                continue
            try:
                prop = ctx.propagate(new.config, patch, desired, warm)
            except SolverFailure:
                continue
            q_c = step_pose(new.config, prop.achieved_twist)
            if pose_distance(q_c, r.config, metric) > params.goal_tolerance:
                continue
            tree.reparent(i, new_idx, pid, push, cost, prop, patch)
            tree.propagate_costs(i, ctx.q_goal)
            break


def _merge_segments(steps: tuple[PushStep, ...]) -> tuple[Segment, ...]:
    segments = []
    run = []
    for step in steps:
        if run and step.pusher_id != run[-1].pusher_id:
            segments.append(run)
            run = []
        run.append(step)
    if run:
        segments.append(run)
    return tuple(
        Segment(
            pusher_id=run[0].pusher_id,
            patches=tuple(s.patch for s in run),
            pusher_twists=tuple(s.pusher_twist for s in run),
            poses=tuple(s.pose_after for s in run),
        )
        for run in segments
    )


def extract_plan(tree: Tree, goal_idx: int, ctx: PlanContext) -> Plan:
    """Re-solve the root-to-goal path into an exactly replayable plan.

    Rewired edges only guarantee landing within goal_tolerance of the stored
    configs, so the stored twists cannot be chained verbatim.  Each step is
    re-solved from the exact running pose with the desired twist aimed at the
    stored next config; the feedback keeps the chain on the planned path.
    """
    metric = ctx.params.metric_weights
    path = tree.path_to_root(goal_idx)
    pose = tree.nodes[path[0]].config
    steps = []
    prev_pid = None
    prev_evolved = None
    for idx in path[1:]:
        node = tree.nodes[idx]
        patch = node.edge_patch
        if node.pusher_id == prev_pid and prev_evolved is not None:
            patch = prev_evolved
        desired = relative_twist(pose, node.config)
        try:
            prop = ctx.propagate(pose, patch, desired, node.raw_state)
        except SolverFailure:
            if patch is node.edge_patch:
                raise NotFoundError(f"plan extraction failed at step {len(steps)}", tree)
            prop = ctx.propagate(pose, node.edge_patch, desired, node.raw_state)
            patch = node.edge_patch
        pose = step_pose(pose, prop.achieved_twist)
        steps.append(
            PushStep(
                index=len(steps),
                pusher_id=node.pusher_id,
                patch=patch,
                pusher_twist=prop.pusher_twist,
                object_twist=prop.achieved_twist,
                pose_after=pose,
                modes=prop.modes,
                residuals=prop.residuals,
            )
        )
        prev_pid = node.pusher_id
        prev_evolved = prop.evolved_patch
    segments = _merge_segments(tuple(steps))
    return Plan(
        start_pose=tree.nodes[path[0]].config,
        goal_pose=ctx.q_goal,
        steps=tuple(steps),
        segments=segments,
        switch_count=max(0, len(segments) - 1),
        final_error=pose_distance(pose, ctx.q_goal, metric),
    )


def plan_with_tree(scene: GraspScene, q_init: Pose, q_goal: Pose, params: PlannerParams,
                   options: SolverOptions | None = None,
                   propagate=None) -> tuple[Plan, Tree]:
    """Run the search and return both the plan and the final tree."""
    options = options or SolverOptions()
    metric = params.metric_weights
    if not grasp_maintained(scene, q_init, params):
        raise ValueError("initial pose does not hold the grasp")
    rng = np.random.default_rng(params.rng_seed)
    root = Node(
        config=q_init,
        parent=None,
        pusher_id=None,
        pusher_patch=None,
        incoming_twist=None,
        node_cost=pose_distance(q_init, q_goal, metric),
        push_cost=0.0,
    )
    tree = Tree(root, metric)
    ctx = PlanContext(
        scene=scene,
        params=params,
        q_goal=q_goal,
        rng=rng,
        temp=TemperatureState(temperature=params.T_init),
        propagate=propagate or DynamicsPropagator(scene, options, metric),
    )
    if pose_distance(q_init, q_goal, metric) <= params.goal_tolerance:
        empty = Plan(
            start_pose=q_init,
            goal_pose=q_goal,
            steps=(),
            segments=(),
            switch_count=0,
            final_error=pose_distance(q_init, q_goal, metric),
        )
        return empty, tree

    goal_idx = None
    for _ in range(params.max_iterations):
        tree.iterations += 1
        q_rand = sample_random_configuration(params, rng, q_goal)
        outcome = extend(tree, q_rand, ctx)
        if outcome.node_index is None:
            continue
        reached = tree.nodes[outcome.node_index].config
        if pose_distance(reached, q_goal, metric) <= params.goal_tolerance:
            goal_idx = outcome.node_index
            break
    if goal_idx is None:
        raise NotFoundError(
            f"goal not reached after {params.max_iterations} iterations", tree
        )
    return extract_plan(tree, goal_idx, ctx), tree


def plan(scene: GraspScene, q_init: Pose, q_goal: Pose, params: PlannerParams,
         options: SolverOptions | None = None, propagate=None) -> Plan:
    """Plan a push sequence from q_init to q_goal; raises NotFoundError."""
    result, _ = plan_with_tree(scene, q_init, q_goal, params, options, propagate)
    return result


# ---------------------------------------------------------------------------
# tree snapshots


def _fmt_floats(values) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(values, dtype=float).ravel())


def _fmt_patch(patch: ContactPatch | None) -> str:
    if patch is None:
        return "-"
    B = patch.basis
    fields = [
        patch.shape.kind,
        repr(float(patch.shape.dimension)),
        str(len(patch.points)),
        _fmt_floats(patch.center),
        _fmt_floats(B.normal),
        _fmt_floats(B.tangent1),
        _fmt_floats(B.tangent2),
        repr(float(patch.mu)),
        patch.owner,
        patch.face if patch.face is not None else "-",
    ]
    return " | ".join(fields)


def _parse_patch(text: str) -> ContactPatch | None:
    if text == "-":
        return None
    kind, dim, npts, center, n, t1, _t2, mu, owner, face = [s.strip() for s in text.split("|")]
    from .contacts import PatchShape

    shape = PatchShape(kind, float(dim))
    basis = basis_from_normal(
        np.array([float(x) for x in n.split()]),
        np.array([float(x) for x in t1.split()]),
    )
    count = int(npts)
    line_points = count if kind == "line" else 3
    rim = count - 1 if kind == "circle" else 8
    return discretize_patch(
        shape,
        np.array([float(x) for x in center.split()]),
        basis,
        float(mu),
        owner=owner,
        face=None if face == "-" else face,
        line_points=line_points,
        circle_rim_points=rim,
    )


def _fmt_twist(t: Twist | None) -> str:
    if t is None:
        return "-"
    return _fmt_floats(np.concatenate([t.linear, t.angular]))


def _parse_twist(text: str) -> Twist | None:
    if text == "-":
        return None
    vals = [float(x) for x in text.split()]
    return Twist(vals[:3], vals[3:])


def save_tree(tree: Tree, path):
    """Write a resumable structured-text snapshot of the tree."""
    lines = [f"pushplan tree-snapshot {TREE_FORMAT_VERSION}", f"nodes {len(tree)}"]
    for i, node in enumerate(tree.nodes):
        lines.append(f"node {i}")
        lines.append(f"  parent {'-' if node.parent is None else node.parent}")
        lines.append(f"  pusher {'-' if node.pusher_id is None else node.pusher_id}")
        lines.append(f"  push_cost {node.push_cost!r}")
        lines.append(f"  node_cost {node.node_cost!r}")
        lines.append(f"  translation {_fmt_floats(node.config.translation)}")
        # the 3x3 matrix round-trips exactly; a rotation-vector encoding would
        # drift by an ulp through the trig
        lines.append(f"  rotation {_fmt_floats(node.config.rotation)}")
        lines.append(f"  incoming_twist {_fmt_twist(node.incoming_twist)}")
        lines.append(f"  edge_twist {_fmt_twist(node.edge_twist)}")
        lines.append(f"  patch {_fmt_patch(node.pusher_patch)}")
        lines.append(f"  edge_patch {_fmt_patch(node.edge_patch)}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _fmt_residuals(residuals: dict) -> str:
    if not residuals:
        return "-"
    return " ".join(f"{k}={float(v)!r}" for k, v in sorted(residuals.items()))


def _parse_residuals(text: str) -> dict:
    if text == "-":
        return {}
    out = {}
    for token in text.split():
        key, _, value = token.partition("=")
        out[key] = float(value)
    return out


def save_plan(plan: Plan, path):
    """Write a plan as versioned structured text, one step per record."""
    lines = [
        f"pushplan plan {PLAN_FORMAT_VERSION}",
        f"start_translation {_fmt_floats(plan.start_pose.translation)}",
        f"start_rotation {_fmt_floats(plan.start_pose.rotation)}",
        f"goal_translation {_fmt_floats(plan.goal_pose.translation)}",
        f"goal_rotation {_fmt_floats(plan.goal_pose.rotation)}",
        f"switch_count {plan.switch_count}",
        f"final_error {plan.final_error!r}",
        f"steps {len(plan.steps)}",
    ]
    for step in plan.steps:
        lines.append(f"step {step.index}")
        lines.append(f"  pusher {step.pusher_id}")
        lines.append(f"  patch {_fmt_patch(step.patch)}")
        lines.append(f"  pusher_twist {_fmt_twist(step.pusher_twist)}")
        lines.append(f"  object_twist {_fmt_twist(step.object_twist)}")
        lines.append(f"  pose_translation {_fmt_floats(step.pose_after.translation)}")
        lines.append(f"  pose_rotation {_fmt_floats(step.pose_after.rotation)}")
        lines.append(f"  modes {' '.join(step.modes) if step.modes else '-'}")
        lines.append(f"  residuals {_fmt_residuals(step.residuals)}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_plan(path) -> Plan:
    """Read a plan written by save_plan; segments are rebuilt from steps."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    header = lines[0].split()
    if header[:2] != ["pushplan", "plan"]:
        raise ValueError("not a plan file")
    if int(header[2]) != PLAN_FORMAT_VERSION:
        raise ValueError(f"unsupported plan version {header[2]}")
    meta = {}
    cursor = 1
    while cursor < len(lines) and not lines[cursor].startswith("step "):
        key, _, value = lines[cursor].partition(" ")
        meta[key] = value
        cursor += 1
    start = Pose(
        np.array([float(x) for x in meta["start_rotation"].split()]).reshape(3, 3),
        [float(x) for x in meta["start_translation"].split()],
    )
    goal = Pose(
        np.array([float(x) for x in meta["goal_rotation"].split()]).reshape(3, 3),
        [float(x) for x in meta["goal_translation"].split()],
    )
    steps = []
    for _ in range(int(meta["steps"])):
        index = int(lines[cursor].split()[1])
        rec = {}
        cursor += 1
        while cursor < len(lines) and lines[cursor].startswith("  "):
            key, _, value = lines[cursor].strip().partition(" ")
            rec[key] = value
            cursor += 1
        steps.append(PushStep(
            index=index,
            pusher_id=rec["pusher"],
            patch=_parse_patch(rec["patch"]),
            pusher_twist=_parse_twist(rec["pusher_twist"]),
            object_twist=_parse_twist(rec["object_twist"]),
            pose_after=Pose(
                np.array([float(x) for x in rec["pose_rotation"].split()]).reshape(3, 3),
                [float(x) for x in rec["pose_translation"].split()],
            ),
            modes=tuple(rec["modes"].split()) if rec["modes"] != "-" else (),
            residuals=_parse_residuals(rec["residuals"]),
        ))
    steps = tuple(steps)
    segments = _merge_segments(steps)
    stored_switches = int(meta["switch_count"])
    if stored_switches != max(0, len(segments) - 1):
        raise ValueError("switch_count does not match the stored steps")
    return Plan(
        start_pose=start,
        goal_pose=goal,
        steps=steps,
        segments=segments,
        switch_count=stored_switches,
        final_error=float(meta["final_error"]),
    )


def load_tree(path, metric: MetricWeights | None = None) -> Tree:
    """Read a snapshot written by save_tree."""
    metric = metric or MetricWeights()
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    header = lines[0].split()
    if header[:2] != ["pushplan", "tree-snapshot"]:
        raise ValueError("not a tree snapshot")
    if int(header[2]) != TREE_FORMAT_VERSION:
        raise ValueError(f"unsupported snapshot version {header[2]}")
    count = int(lines[1].split()[1])
    tree = None
    cursor = 2
    for _ in range(count):
        assert lines[cursor].startswith("node ")
        rec = {}
        cursor += 1
        while cursor < len(lines) and lines[cursor].startswith("  "):
            key, _, value = lines[cursor].strip().partition(" ")
            rec[key] = value
            cursor += 1
        config = Pose(
            np.array([float(x) for x in rec["rotation"].split()]).reshape(3, 3),
            [float(x) for x in rec["translation"].split()],
        )
        node = Node(
            config=config,
            parent=None if rec["parent"] == "-" else int(rec["parent"]),
            pusher_id=None if rec["pusher"] == "-" else rec["pusher"],
            pusher_patch=_parse_patch(rec["patch"]),
            incoming_twist=_parse_twist(rec["incoming_twist"]),
            node_cost=float(rec["node_cost"]),
            push_cost=float(rec["push_cost"]),
            edge_patch=_parse_patch(rec["edge_patch"]),
            edge_twist=_parse_twist(rec["edge_twist"]),
        )
        if tree is None:
            tree = Tree(node, metric)
        else:
            tree.add(node)
    if tree is None:
        raise ValueError("snapshot holds no nodes")
    return tree
