"""Quasi-dynamic inverse contact dynamics for pushing a grasped object.

One unit step is posed in the space of contact impulses P, relative contact
velocities V, object twist v_obj and pusher twist. Hard constraints:

  * time-integrated Newton law        G P + P_mg = M v_obj
  * contact kinematics                V = G^T v_obj - J theta_dot
  * grip force: normal impulses of each finger patch sum to F_grip*dt with
    the center of pressure pinned at the patch center
  * unilateral bounds v_n >= 0, p_n >= 0 and the quadratic friction cones
  * pusher twist workspace box

The complementarity conditions (separation, cone boundary under slip and
slip-opposing dissipation) are penalized in the objective together with a
tracking term on the desired object twist; the weight ratio between the two
is 1e4 by default. Linear equalities are eliminated exactly through an
orthonormal nullspace basis and the reduced problem goes to SLSQP with
analytic gradients, deterministic multi-starts and penalty-weight escalation
until the complementarity residuals drop below tolerance.

All internal quantities are normalized: impulses by F_grip*dt, angular
velocities by the object bounding radius, so tolerances are unit-free.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .contacts import (
    ContactPatch,
    ContactSet,
    GraspScene,
    basis_from_normal,
    build_contact_set,
    contact_jacobian_for_set,
    grasp_map,
    gravity_impulse,
)
from .geometry import ConvexPolyhedron, Sphere
from .se3 import MetricWeights, Pose, Twist, exp_twist, rotation_from_rotvec

logger = logging.getLogger("pushplan.dynamics")

EQUALITY_TOL = 1e-10


class SolverFailure(RuntimeError):
    """Base class for inverse-dynamics failures; carries diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class InfeasibleError(SolverFailure):
    """No point satisfying the hard constraints was found."""


class NoProgressError(SolverFailure):
    """The best achievable twist does not move toward the desired one."""


class MaxIterationsError(SolverFailure):
    """Optimization stalled before reaching the residual tolerances."""


class PusherLostError(RuntimeError):
    """The evolved pusher patch left the object face it was pushing on."""


@dataclass(frozen=True)
class SolverOptions:
    complementarity_weight: float = 1e4
    tracking_weight: float = 1.0
    smoothing_eps: float = 1e-6
    tol_feas: float = 1e-8
    tol_objective: float = 1e-6
    tol_complementarity: float = 1e-6
    max_iterations: int = 120
    multi_start: int = 3
    weight_boosts: int = 2
    weight_boost_factor: float = 100.0
    progress_min: float = 0.1
    mode_tol: float = 1e-5
    seed: int = 7

    def __post_init__(self):
        if self.complementarity_weight <= 0 or self.tracking_weight < 0:
            raise ValueError("weights must be positive")


@dataclass(frozen=True)
class ContactImpulse:
    """Local-frame impulse (N*step) at one point contact."""

    p_n: float
    p_t: float
    p_o: float

    def as_vector(self) -> np.ndarray:
        return np.array([self.p_n, self.p_t, self.p_o])


@dataclass(frozen=True)
class ContactVelocity:
    """Local-frame relative velocity (mm/step), object minus other body."""

    v_n: float
    v_t: float
    v_o: float

    def as_vector(self) -> np.ndarray:
        return np.array([self.v_n, self.v_t, self.v_o])

    @property
    def slip_speed(self) -> float:
        return float(np.hypot(self.v_t, self.v_o))


@dataclass(frozen=True)
class SolveResult:
    achieved_twist: Twist
    pusher_twist: Twist
    impulses: tuple[ContactImpulse, ...]
    velocities: tuple[ContactVelocity, ...]
    modes: tuple[str, ...]
    objective_value: float
    residuals: dict
    desired_twist: Twist | None
    pusher_id: str
    iterations: int
    starts_tried: int
    weight_used: float
    raw_state: np.ndarray | None = None  # full normalized unknown vector, reusable as a warm start

    @property
    def impulse_matrix(self) -> np.ndarray:
        return np.array([p.as_vector() for p in self.impulses])

    @property
    def velocity_matrix(self) -> np.ndarray:
        return np.array([v.as_vector() for v in self.velocities])


# mass in kg, force unit N = kg*m/s^2: with mm lengths the inertia blocks
# pick up a factor 1e-3 so M*v comes out in N*step / N*mm*step
KG_TO_FORCE_UNITS = 1e-3



class ConstraintSystem:
    """One assembled instantaneous problem on normalized variables.

    Layout of the unknown vector x (dimension 6n + 12):
      [0, 3n)        p: impulses / (F_grip*dt), per contact (n, t, o)
      [3n, 6n)       v: relative contact velocities, mm/step
      [6n, 6n+6)     w: object twist, angular part scaled by length L
      [6n+6, 6n+12)  u: pusher twist, same scaling
    """

    def __init__(
        self,
        scene: GraspScene,
        object_pose: Pose,
        pusher_patch: ContactPatch,
        desired_twist: Twist | None,
        metric: MetricWeights | None = None,
        pinned_pusher_twist: Twist | None = None,
        smoothing_eps: float = 1e-6,
    ):
        self.scene = scene
        self.pose = object_pose
        self.patch = pusher_patch
        self.pusher_id = pusher_patch.owner
        self.desired = desired_twist
        self.metric = metric if metric is not None else MetricWeights()
        self.eps = smoothing_eps
        self.cset: ContactSet = build_contact_set(scene, object_pose, pusher_patch)

        n = self.cset.n
        self.n = n
        self.dim = 6 * n + 12
        self.sl_p = slice(0, 3 * n)
        self.sl_v = slice(3 * n, 6 * n)
        self.sl_w = slice(6 * n, 6 * n + 6)
        self.sl_u = slice(6 * n + 6, 6 * n + 12)
        self.mu = self.cset.mus()

        self.F_bar = scene.characteristic_impulse()
        self.L = scene.characteristic_length()
        d_inv = np.ones(6)
        d_inv[3:] = 1.0 / self.L  # normalized twist -> physical
        self.twist_from_norm = d_inv
        self.twist_to_norm = 1.0 / d_inv

        G = grasp_map(self.cset.contacts)
        J = contact_jacobian_for_set(self.cset, self.pusher_id)
        M_eff = scene.inertia * KG_TO_FORCE_UNITS
        p_mg = gravity_impulse(scene, self.pusher_id, object_pose)
        wrench_scale = np.ones(6) / self.F_bar
        wrench_scale[3:] /= self.L

        rows = []
        rhs = []
        # Newton: G_hat p - M_hat w = -p_mg_hat, with p normalized by F_bar
        G_hat = wrench_scale[:, None] * G * self.F_bar
        M_hat = (wrench_scale[:, None] * M_eff) * d_inv[None, :]
        newton = np.zeros((6, self.dim))
        newton[:, self.sl_p] = G_hat
        newton[:, self.sl_w] = -M_hat
        rows.append(newton)
        rhs.append(-wrench_scale * np.concatenate([p_mg.force, p_mg.torque]))
        # kinematics: v - G^T D w + J D u = 0
        kin = np.zeros((3 * n, self.dim))
        kin[:, self.sl_v] = np.eye(3 * n)
        kin[:, self.sl_w] = -(G.T * d_inv[None, :])
        kin[:, self.sl_u] = J * d_inv[None, :]
        rows.append(kin)
        rhs.append(np.zeros(3 * n))
        # grip force per finger patch: normals sum to 1 (normalized) with the
        # center of pressure pinned at the patch center
        for g in self.cset.groups:
            if g.label == self.pusher_id:
                continue
            row = np.zeros(self.dim)
            for i in range(g.start, g.stop):
                row[3 * i] = 1.0
            rows.append(row[None, :])
            rhs.append(np.array([1.0]))
            for axis in (g.patch.basis.tangent1, g.patch.basis.tangent2):
                coords = np.array(
                    [(self.cset.contacts[i].position - g.patch.center) @ axis for i in range(g.start, g.stop)]
                )
                if np.max(np.abs(coords)) < 1e-9:
                    continue
                mrow = np.zeros(self.dim)
                for k, i in enumerate(range(g.start, g.stop)):
                    mrow[3 * i] = coords[k]
                rows.append(mrow[None, :])
                rhs.append(np.array([0.0]))
        if pinned_pusher_twist is not None:
            pin = np.zeros((6, self.dim))
            pin[:, self.sl_u] = np.eye(6)
            rows.append(pin)
            rhs.append(self.twist_to_norm * pinned_pusher_twist.as_vector())
        self.E = np.vstack(rows)
        self.e = np.concatenate(rhs)

        # exact elimination of the equalities: x = x0 + N y
        self.x0, self.N = self._nullspace_parameterization(self.E, self.e)

        # linear inequalities A x + b >= 0
        spec = scene.pusher(self.pusher_id)
        u_max = self.twist_to_norm * np.concatenate([spec.max_linear, spec.max_angular])
        A = []
        b = []
        for i in range(n):
            row = np.zeros(self.dim)
            row[3 * i] = 1.0  # p_n >= 0
            A.append(row)
            b.append(0.0)
        for i in range(n):
            row = np.zeros(self.dim)
            row[3 * n + 3 * i] = 1.0  # v_n >= 0
            A.append(row)
            b.append(0.0)
        for k in range(6):
            row = np.zeros(self.dim)
            row[6 * n + 6 + k] = -1.0
            A.append(row)
            b.append(u_max[k])
            row = np.zeros(self.dim)
            row[6 * n + 6 + k] = 1.0
            A.append(row)
            b.append(u_max[k])
        self.A_ineq = np.array(A)
        self.b_ineq = np.array(b)

        w_des = None
        if desired_twist is not None:
            w_des = self.twist_to_norm * desired_twist.as_vector()
        self.w_des = w_des
        # tracking acts on the normalized object twist with the scaled metric
        tw = np.ones(6)
        tw[3:] = (self.metric.rotation * d_inv[3:]) ** 2
        tw[:3] = self.metric.translation**2
        self.track_weights = tw

    @staticmethod
    def _nullspace_parameterization(E, e):
        U, s, Vt = np.linalg.svd(E, full_matrices=True)
        tol = max(E.shape) * np.finfo(float).eps * (s[0] if s.size else 1.0)
        rank = int(np.sum(s > tol))
        x0 = Vt[:rank].T @ ((U[:, :rank].T @ e) / s[:rank])
        if np.linalg.norm(E @ x0 - e, ord=np.inf) > 1e-8:
            raise InfeasibleError(
                "equality constraints are inconsistent",
                {"equality_residual": float(np.linalg.norm(E @ x0 - e, ord=np.inf))},
            )
        N = Vt[rank:].T
        return x0, N

    # -- variable access ---------------------------------------------------

    def x_of(self, y: np.ndarray) -> np.ndarray:
        return self.x0 + self.N @ y

    def y_of(self, x: np.ndarray) -> np.ndarray:
        return self.N.T @ (x - self.x0)

    def split(self, x):
        n = self.n
        p = x[self.sl_p].reshape(n, 3)
        v = x[self.sl_v].reshape(n, 3)
        return p, v, x[self.sl_w], x[self.sl_u]

    def object_twist(self, x) -> Twist:
        w = self.twist_from_norm * x[self.sl_w]
        return Twist(w[:3], w[3:])

    def pusher_twist(self, x) -> Twist:
        u = self.twist_from_norm * x[self.sl_u]
        return Twist(u[:3], u[3:])

    # -- penalized complementarity terms ------------------------------------

    def complementarity_terms(self, x) -> np.ndarray:
        """Stacked residuals (4 per contact): separation, cone-boundary
        under slip, and the two slip-opposing dissipation conditions."""
        p, v, _, _ = self.split(x)
        s = np.sqrt(v[:, 1] ** 2 + v[:, 2] ** 2 + self.eps**2) - self.eps
        kappa = (self.mu * p[:, 0]) ** 2 - p[:, 1] ** 2 - p[:, 2] ** 2
        c1 = v[:, 0] * p[:, 0]
        c2 = kappa * s
        c3 = self.mu * p[:, 0] * v[:, 1] + p[:, 1] * s
        c4 = self.mu * p[:, 0] * v[:, 2] + p[:, 2] * s
        return np.concatenate([c1, c2, c3, c4])

    def complementarity_jacobian(self, x) -> np.ndarray:
        n = self.n
        p, v, _, _ = self.split(x)
        s_full = np.sqrt(v[:, 1] ** 2 + v[:, 2] ** 2 + self.eps**2)
        s = s_full - self.eps
        ds_dvt = v[:, 1] / s_full
        ds_dvo = v[:, 2] / s_full
        kappa = (self.mu * p[:, 0]) ** 2 - p[:, 1] ** 2 - p[:, 2] ** 2
        Jc = np.zeros((4 * n, self.dim))
        idx = np.arange(n)
        pn, pt, po = 3 * idx, 3 * idx + 1, 3 * idx + 2
        vn, vt, vo = 3 * n + 3 * idx, 3 * n + 3 * idx + 1, 3 * n + 3 * idx + 2
        # c1 = v_n p_n
        Jc[idx, pn] = v[:, 0]
        Jc[idx, vn] = p[:, 0]
        # c2 = kappa * s
        r2 = n + idx
        Jc[r2, pn] = 2.0 * self.mu**2 * p[:, 0] * s
        Jc[r2, pt] = -2.0 * p[:, 1] * s
        Jc[r2, po] = -2.0 * p[:, 2] * s
        Jc[r2, vt] = kappa * ds_dvt
        Jc[r2, vo] = kappa * ds_dvo
        # c3 = mu p_n v_t + p_t s
        r3 = 2 * n + idx
        Jc[r3, pn] = self.mu * v[:, 1]
        Jc[r3, pt] = s
        Jc[r3, vt] = self.mu * p[:, 0] + p[:, 1] * ds_dvt
        Jc[r3, vo] = p[:, 1] * ds_dvo
        # c4 = mu p_n v_o + p_o s
        r4 = 3 * n + idx
        Jc[r4, pn] = self.mu * v[:, 2]
        Jc[r4, po] = s
        Jc[r4, vt] = p[:, 2] * ds_dvt
        Jc[r4, vo] = self.mu * p[:, 0] + p[:, 2] * ds_dvo
        return Jc

    def tracking_error(self, x) -> float:
        if self.w_des is None:
            return 0.0
        d = x[self.sl_w] - self.w_des
        return float(d @ (self.track_weights * d))

    def objective(self, x, comp_weight: float, track_weight: float) -> float:
        c = self.complementarity_terms(x)
        return float(comp_weight * (c @ c) + track_weight * self.tracking_error(x))

    def objective_gradient(self, x, comp_weight: float, track_weight: float) -> np.ndarray:
        c = self.complementarity_terms(x)
        grad = 2.0 * comp_weight * (c @ self.complementarity_jacobian(x))
        if self.w_des is not None and track_weight != 0.0:
            d = x[self.sl_w] - self.w_des
            grad[self.sl_w] += 2.0 * track_weight * self.track_weights * d
        return grad

    # -- cone constraints ----------------------------------------------------

    def cone_values(self, x) -> np.ndarray:
        p, _, _, _ = self.split(x)
        return (self.mu * p[:, 0]) ** 2 - p[:, 1] ** 2 - p[:, 2] ** 2

    # the optimizer works against a second-order-cone form whose gradient
    # stays nonzero at p = 0; feasible sets agree to within CONE_DELTA
    CONE_DELTA = 1e-9

    def cone_margins(self, x) -> np.ndarray:
        p, _, _, _ = self.split(x)
        d = self.CONE_DELTA
        return self.mu * p[:, 0] + d - np.sqrt(p[:, 1] ** 2 + p[:, 2] ** 2 + d * d)

    def cone_margin_jacobian(self, x) -> np.ndarray:
        p, _, _, _ = self.split(x)
        d = self.CONE_DELTA
        root = np.sqrt(p[:, 1] ** 2 + p[:, 2] ** 2 + d * d)
        Jc = np.zeros((self.n, self.dim))
        idx = np.arange(self.n)
        Jc[idx, 3 * idx] = self.mu
        Jc[idx, 3 * idx + 1] = -p[:, 1] / root
        Jc[idx, 3 * idx + 2] = -p[:, 2] / root
        return Jc

    # -- residual reporting ----------------------------------------------------

    def hard_residuals(self, x) -> dict:
        lin = self.A_ineq @ x + self.b_ineq
        cone = self.cone_values(x)
        c = self.complementarity_terms(x)
        return {
            "newton": float(np.linalg.norm(self.E[:6] @ x - self.e[:6], ord=np.inf)),
            "equality": float(np.linalg.norm(self.E @ x - self.e, ord=np.inf)),
            "unilateral": float(max(0.0, -np.min(lin))) if lin.size else 0.0,
            "cone": float(max(0.0, -np.min(cone))),
            "complementarity": float(np.max(np.abs(c))),
            "complementarity_sum_sq": float(c @ c),
            "rigid-array": self.rigid_array_residual(x),
            "tracking": self.tracking_error(x),
        }

    def rigid_array_residual(self, x) -> float:
        """Worst deviation of any patch's point velocities from one rigid
        motion; zero by construction, recomputed as an honest check."""
        _, v, w, u = self.split(x)
        v_obj = self.twist_from_norm * w
        th = self.twist_from_norm * u
        worst = 0.0
        for g in self.cset.groups:
            for i in range(g.start, g.stop):
                cpt = self.cset.contacts[i]
                R = cpt.basis.as_matrix()
                obj_vel = v_obj[:3] + np.cross(v_obj[3:], cpt.position)
                inp = np.zeros(3)
                if g.label == self.pusher_id:
                    inp = th[:3] + np.cross(th[3:], cpt.position)
                pred = R.T @ (obj_vel - inp)
                worst = max(worst, float(np.linalg.norm(pred - v[i])))
        return worst

    def progress(self, x) -> float:
        if self.desired is None:
            return 1.0
        d = self.desired.as_vector()
        scale = np.ones(6)
        scale[3:] = self.metric.rotation
        d_s = scale * d
        denom = float(d_s @ d_s)
        if denom < 1e-24:
            return 1.0
        a_s = scale * self.object_twist(x).as_vector()
        return float(a_s @ d_s) / denom


def assemble_problem(
    scene: GraspScene,
    object_pose: Pose,
    active_pusher,
    desired_twist: Twist | None,
    metric: MetricWeights | None = None,
    options: SolverOptions | None = None,
    pinned_pusher_twist: Twist | None = None,
) -> ConstraintSystem:
    """Build the instantaneous constraint system at a pose.

    `active_pusher` is either a pusher id (its catalog patch is used) or a
    ContactPatch whose owner names the pusher.
    """
    opts = options or SolverOptions()
    if isinstance(active_pusher, str):
        patch = scene.pusher(active_pusher).patch
    else:
        patch = active_pusher
        scene.pusher(patch.owner)
    return ConstraintSystem(
        scene,
        object_pose,
        patch,
        desired_twist,
        metric=metric,
        pinned_pusher_twist=pinned_pusher_twist,
        smoothing_eps=opts.smoothing_eps,
    )


def _seed_states(system: ConstraintSystem, options: SolverOptions) -> list[np.ndarray]:
    """Deterministic multi-start seeds in the reduced coordinates."""
    seeds = []
    base = np.zeros(system.dim)
    for g in system.cset.groups:
        npts = g.stop - g.start
        # fingers share the grip impulse; the pusher gets a light preload so
        # every point starts strictly inside its friction cone
        fill = 0.02 if g.label == system.pusher_id else 1.0 / npts
        for i in range(g.start, g.stop):
            base[3 * i] = fill
    if system.desired is not None:
        moving = base.copy()
        w = system.twist_to_norm * system.desired.as_vector()
        moving[system.sl_w] = w
        moving[system.sl_u] = w
        seeds.append(moving)
    seeds.append(base)
    rng = np.random.default_rng(options.seed)
    for _ in range(max(0, options.multi_start - len(seeds))):
        ref = seeds[0]
        y = system.y_of(ref) + 0.05 * rng.standard_normal(system.N.shape[1])
        seeds.append(system.x_of(y))
    return [system.y_of(x) for x in seeds[: max(1, options.multi_start)]]


def _restore_feasibility(system: ConstraintSystem, y0: np.ndarray, options: SolverOptions) -> np.ndarray:
    """Pull a seed onto the inequality-feasible set (hinge-squared descent).

    The equality-projected seeds usually violate a few friction cones; SLSQP
    recovers poorly from such starts, a short smooth restoration does not.
    """

    def infeasibility(y):
        x = system.x_of(y)
        lin = np.minimum(system.A_ineq @ x + system.b_ineq, 0.0)
        cone = np.minimum(system.cone_margins(x), 0.0)
        return float(lin @ lin + cone @ cone)

    def gradient(y):
        x = system.x_of(y)
        lin = np.minimum(system.A_ineq @ x + system.b_ineq, 0.0)
        cone = np.minimum(system.cone_margins(x), 0.0)
        g = 2.0 * (lin @ system.A_ineq)
        active = cone < 0.0
        if np.any(active):
            g = g + 2.0 * (cone[active] @ system.cone_margin_jacobian(x)[active])
        return g @ system.N

    if infeasibility(y0) <= options.tol_feas**2:
        return y0
    res = minimize(infeasibility, y0, jac=gradient, method="BFGS", options={"maxiter": 200, "gtol": 1e-14})
    return res.x


def _run_slsqp(system: ConstraintSystem, y0, comp_weight, track_weight, options):
    AN = system.A_ineq @ system.N
    c0 = system.A_ineq @ system.x0 + system.b_ineq
    constraints = [
        {"type": "ineq", "fun": lambda y: c0 + AN @ y, "jac": lambda y: AN},
        {
            "type": "ineq",
            "fun": lambda y: system.cone_margins(system.x_of(y)),
            "jac": lambda y: system.cone_margin_jacobian(system.x_of(y)) @ system.N,
        },
    ]
    res = minimize(
        lambda y: system.objective(system.x_of(y), comp_weight, track_weight),
        y0,
        jac=lambda y: system.objective_gradient(system.x_of(y), comp_weight, track_weight) @ system.N,
        method="SLSQP",
        constraints=constraints,
        options={"maxiter": options.max_iterations, "ftol": 1e-16},
    )
    return res


def _result_from_x(system: ConstraintSystem, x, options, iterations, starts, weight) -> SolveResult:
    p_mat = system.split(x)[0] * system.F_bar
    v_mat = system.split(x)[1]
    impulses = tuple(ContactImpulse(*row) for row in p_mat)
    velocities = tuple(ContactVelocity(*row) for row in v_mat)
    residuals = system.hard_residuals(x)
    residuals["progress"] = system.progress(x)
    residuals["mu_by_contact"] = tuple(float(m) for m in system.mu)
    residuals["impulse_scale"] = system.F_bar
    modes = _modes_from_arrays(system.split(x)[0], v_mat, system.mu, options.mode_tol)
    return SolveResult(
        achieved_twist=system.object_twist(x),
        pusher_twist=system.pusher_twist(x),
        impulses=impulses,
        velocities=velocities,
        modes=modes,
        objective_value=system.objective(x, options.complementarity_weight, options.tracking_weight),
        residuals=residuals,
        desired_twist=system.desired,
        pusher_id=system.pusher_id,
        iterations=iterations,
        starts_tried=starts,
        weight_used=weight,
        raw_state=np.array(x, dtype=float),
    )


def solve_inverse_dynamics(
    system: ConstraintSystem,
    options: SolverOptions | None = None,
    warm_start: np.ndarray | None = None,
) -> SolveResult:
    """Minimize the penalized complementarity + tracking objective.

    ``warm_start`` is a full state vector from a previous solve on a system of
    the same contact layout (for example the parent edge of a search branch);
    it is tried before the constructed seeds.

    Raises InfeasibleError, NoProgressError or MaxIterationsError; a returned
    result always satisfies the hard constraints and complementarity
    tolerances.
    """
    options = options or SolverOptions()
    # the optimizer works on a rescaled objective (complementarity weight 1
    # equals the configured weight) so its magnitude stays O(1); a softer
    # warmup stage precedes it and failed stages escalate by the boost factor
    track_weight = (
        options.tracking_weight / options.complementarity_weight if system.desired is not None else 0.0
    )
    # tracking solves need a soft warmup stage so the tracking gradient can
    # slide the iterate along the complementarity manifold before the penalty
    # stiffens; without a tracking term the warmup only wastes iterations
    stages = [1.0] if system.desired is None else [1.0 / options.weight_boost_factor, 1.0]
    stages += [options.weight_boost_factor ** (b + 1) for b in range(options.weight_boosts)]
    seeds = list(_seed_states(system, options))
    if warm_start is not None:
        x_w = warm_start.ravel() if isinstance(warm_start, np.ndarray) else np.asarray(warm_start, float)
        if x_w.size != system.dim:
            raise ValueError(f"warm start has size {x_w.size}, expected {system.dim}")
        seeds.insert(0, system.y_of(x_w))
    best = None  # (feasible, comp_residual, x)
    total_iters = 0
    for k, y0 in enumerate(seeds, start=1):
        y = _restore_feasibility(system, y0, options)
        x = system.x_of(y)
        r = system.hard_residuals(x)
        for weight in stages:
            res = _run_slsqp(system, y, weight, track_weight, options)
            total_iters += int(res.nit)
            y = res.x
            x = system.x_of(y)
            r = system.hard_residuals(x)
            feasible = r["unilateral"] <= options.tol_feas and r["cone"] <= options.tol_feas
            comp_ok = (
                r["complementarity"] <= options.tol_complementarity
                and r["complementarity_sum_sq"] <= options.tol_objective
            )
            if weight >= 1.0 and feasible:
                if system.desired is not None and system.progress(x) < options.progress_min:
                    # the iterate sits in a non-tracking basin at full weight;
                    # later boosts only stiffen complementarity and pull it
                    # further toward rest, and the remaining seeds start from
                    # rest-like states, so no restart can recover tracking
                    r["progress"] = system.progress(x)
                    raise NoProgressError(
                        f"achieved twist tracks only {r['progress']:.3f} of the desired direction",
                        {"residuals": r, "pusher": system.pusher_id},
                    )
                if comp_ok:
                    return _result_from_x(
                        system, x, options, total_iters, k, weight * options.complementarity_weight
                    )
        feasible = r["unilateral"] <= options.tol_feas and r["cone"] <= options.tol_feas
        key = (not feasible, r["complementarity"])
        if best is None or key < (not best[0], best[1]):
            best = (feasible, r["complementarity"], x)

    feasible, comp, x = best
    r = system.hard_residuals(x)
    r["progress"] = system.progress(x)
    diag = {"residuals": r, "pusher": system.pusher_id}
    if not feasible:
        raise InfeasibleError("no feasible point for the hard contact constraints", diag)
    comp_ok = comp <= options.tol_complementarity and r["complementarity_sum_sq"] <= options.tol_objective
    if comp_ok and system.desired is not None and system.progress(x) < options.progress_min:
        raise NoProgressError(
            f"achieved twist tracks only {system.progress(x):.3f} of the desired direction", diag
        )
    raise MaxIterationsError(
        f"complementarity residual {comp:.2e} above tolerance after {len(seeds)} starts", diag
    )


def _modes_from_arrays(p_norm, v, mu, tol) -> tuple[str, ...]:
    modes = []
    for i in range(p_norm.shape[0]):
        slip = float(np.hypot(v[i, 1], v[i, 2]))
        if v[i, 0] > tol:
            modes.append("separating")
        elif slip > tol:
            modes.append("sliding")
        else:
            modes.append("sticking")
    return tuple(modes)


class ModeInconsistencyError(RuntimeError):
    pass


def classify_modes(result: SolveResult, options: SolverOptions | None = None) -> tuple[str, ...]:
    """Label each contact sticking / sliding / separating.

    Raises ModeInconsistencyError when a sliding contact carries a force
    strictly inside its friction cone (violates the boundary rule).
    """
    options = options or SolverOptions()
    tol = options.mode_tol
    mus = result.residuals.get("mu_by_contact")
    scale = result.residuals.get("impulse_scale")
    if mus is None or scale is None:
        raise ModeInconsistencyError("result lacks per-contact friction data")
    modes = []
    for i, (imp, vel) in enumerate(zip(result.impulses, result.velocities)):
        slip = vel.slip_speed
        if vel.v_n > tol:
            modes.append("separating")
        elif slip > tol:
            # sliding demands a force on the cone boundary (normalized units)
            pn, pt, po = imp.p_n / scale, imp.p_t / scale, imp.p_o / scale
            cone_gap = (mus[i] * pn) ** 2 - pt**2 - po**2
            if cone_gap > tol * max(1.0, (mus[i] * pn) ** 2):
                raise ModeInconsistencyError(
                    f"contact {i} slides at {slip:.3e} with force strictly inside the cone"
                )
            modes.append("sliding")
        else:
            modes.append("sticking")
    return tuple(modes)


def forward_solve(
    scene: GraspScene,
    object_pose: Pose,
    active_pusher,
    pusher_twist: Twist,
    options: SolverOptions | None = None,
    warm_start: np.ndarray | None = None,
) -> SolveResult:
    """Forward oracle with full diagnostics: pinned pusher twist, free object.

    Solves the same constraint system with the pusher twist pinned and only
    the complementarity terms in the objective.  When replaying an inverse
    solve, pass its raw_state as `warm_start`; the pinned problem shares the
    variable layout, so the replay confirms in a few iterations.
    """
    options = options or SolverOptions()
    system = assemble_problem(
        scene,
        object_pose,
        active_pusher,
        desired_twist=None,
        options=options,
        pinned_pusher_twist=pusher_twist,
    )
    return solve_inverse_dynamics(system, options, warm_start=warm_start)


def forward_check(
    scene: GraspScene,
    object_pose: Pose,
    active_pusher,
    pusher_twist: Twist,
    options: SolverOptions | None = None,
    warm_start: np.ndarray | None = None,
) -> Twist:
    """Forward oracle: given the pusher twist, find the object twist."""
    result = forward_solve(scene, object_pose, active_pusher, pusher_twist,
                           options=options, warm_start=warm_start)
    return result.achieved_twist


def evolve_pusher_patch(patch: ContactPatch, result: SolveResult, geometry) -> ContactPatch:
    """Move the pusher patch to its post-step location on the object surface.

    The patch is carried by the pusher's motion relative to the object: flat
    faces keep the face normal and translate/spin the patch in-plane; on a
    sphere the contact is re-derived from the transported pusher-plane
    normal, which is how rolling migrates a sticking contact.
    Raises PusherLost when the new center leaves the face.
    """
    rel = Twist(
        result.pusher_twist.linear - result.achieved_twist.linear,
        result.pusher_twist.angular - result.achieved_twist.angular,
    )
    if np.linalg.norm(rel.as_vector()) < 1e-12:
        return patch
    R_rel = rotation_from_rotvec(rel.angular)
    if isinstance(geometry, Sphere):
        n_new = R_rel @ patch.basis.normal
        n_new = n_new / np.linalg.norm(n_new)
        center = geometry.surface_point_for_normal(n_new)
        hint = R_rel @ patch.basis.tangent1
        hint = hint - (hint @ n_new) * n_new
        if np.linalg.norm(hint) < 1e-9:
            hint = patch.basis.tangent2
        basis = basis_from_normal(n_new, hint)
        return patch.moved_to(center, basis)
    if not isinstance(geometry, ConvexPolyhedron):
        raise TypeError(f"unsupported geometry {type(geometry).__name__}")
    face = geometry.face(patch.face)
    motion = exp_twist(rel)
    center = face.project(motion.apply(patch.center))
    if not face.contains(center, margin=0.0):
        raise PusherLostError(
            f"pusher {patch.owner} left face {patch.face} at {np.round(center, 3)}"
        )
    inward = -face.normal
    hint = R_rel @ patch.basis.tangent1
    hint = hint - (hint @ inward) * inward
    if np.linalg.norm(hint) < 1e-9:
        hint = patch.basis.tangent1
    basis = basis_from_normal(inward, hint)
    return patch.moved_to(center, basis)


def dump_system(system: ConstraintSystem, result: SolveResult | None, path) -> None:
    """Write a structured text dump of one assembled problem and solution."""
    lines = []
    lines.append("pushplan inverse-dynamics dump")
    lines.append(f"pusher: {system.pusher_id}  contacts: {system.n}  unknowns: {system.dim}")
    lines.append(f"normalization: impulse {system.F_bar:.6g} N*step, length {system.L:.6g} mm")
    if system.desired is not None:
        lines.append(f"desired twist: {np.array2string(system.desired.as_vector(), precision=6)}")
    lines.append(f"equalities: {system.E.shape[0]}  reduced dim: {system.N.shape[1]}")
    if result is not None:
        lines.append(f"achieved twist: {np.array2string(result.achieved_twist.as_vector(), precision=6)}")
        lines.append(f"pusher twist:   {np.array2string(result.pusher_twist.as_vector(), precision=6)}")
        lines.append("residuals:")
        for k in sorted(result.residuals):
            v = result.residuals[k]
            if isinstance(v, float):
                lines.append(f"  {k}: {v:.3e}")
        lines.append("contacts (group, mode, p [N*step], v [mm/step]):")
        labels = []
        for g in system.cset.groups:
            labels.extend([g.label] * (g.stop - g.start))
        for i in range(system.n):
            p = result.impulses[i]
            v = result.velocities[i]
            lines.append(
                f"  {i:3d} {labels[i]:>10s} {result.modes[i]:>10s} "
                f"p=({p.p_n:+.4e},{p.p_t:+.4e},{p.p_o:+.4e}) "
                f"v=({v.v_n:+.4e},{v.v_t:+.4e},{v.v_o:+.4e})"
            )
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
