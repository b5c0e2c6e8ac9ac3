"""Planning toolkit for reconfiguring a grasped object with external pushes.

A quasi-dynamic inverse contact-dynamics solver resolves single unit steps
(which object twist results from a pusher motion, and vice versa), and a
transition-based RRT* plans sequences of such steps while minimizing
pusher switch-overs.
"""

from .contacts import (
    ContactFrameBasis,
    ContactPatch,
    FingerSpec,
    GraspLostError,
    GraspScene,
    PatchShape,
    PointContact,
    PusherSpec,
    basis_from_normal,
    build_contact_set,
    contact_jacobian,
    discretize_patch,
    finger_patch_at_pose,
    finger_within_face,
    grasp_map,
    gravity_impulse,
)
from .dynamics import (
    ConstraintSystem,
    ContactImpulse,
    ContactVelocity,
    InfeasibleError,
    MaxIterationsError,
    ModeInconsistencyError,
    NoProgressError,
    PusherLostError,
    SolveResult,
    SolverFailure,
    SolverOptions,
    assemble_problem,
    classify_modes,
    dump_system,
    evolve_pusher_patch,
    forward_check,
    forward_solve,
    solve_inverse_dynamics,
)
from .geometry import (
    ConvexPolyhedron,
    Face,
    InvalidGeometryError,
    Sphere,
    box_geometry,
    box_inertia,
    generalized_inertia,
    sphere_inertia,
)
from .planner import (
    DynamicsPropagator,
    Node,
    NotFoundError,
    Plan,
    PlannerParams,
    PushStep,
    SamplingBounds,
    Segment,
    Tree,
    extract_plan,
    grasp_maintained,
    load_plan,
    load_tree,
    nearest_neighbor,
    plan,
    plan_with_tree,
    sample_random_configuration,
    save_plan,
    save_tree,
    transition_test,
)
from .scenes import (
    ParsedScene,
    RunResult,
    SceneFormatError,
    TraceRecord,
    ValidationReport,
    available_scenarios,
    export_trace,
    parse_scene,
    parse_scene_text,
    run_plan,
    scenario_path,
    serialize_scene,
    trace_records,
    validate_plan,
)
from .se3 import (
    MetricWeights,
    Pose,
    Twist,
    Wrench,
    compose,
    exp_twist,
    identity_pose,
    interpolate_pose,
    invert,
    log_pose,
    pose_distance,
    relative_twist,
    step_pose,
    twist_metric_norm,
)

__version__ = "0.1.0"
