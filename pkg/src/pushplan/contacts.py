"""Contact geometry for a parallel-jaw grasp with external pushers.

Finite-area contacts are discretized into rigid arrays of frictional point
contacts.  Every point carries a local right-handed frame (n, t, o) with n
pointing INTO the object; positions are in the object frame, mm.

Sign conventions used throughout:
  * contact impulses act on the object, normal component along +n (push);
  * relative contact velocity is object-surface minus other-body, so a
    positive normal velocity means the bodies separate.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import ConvexPolyhedron, Face, InvalidGeometryError, Sphere
from .se3 import Pose, Wrench, identity_pose, skew

BASIS_TOL = 1e-9

# standard gravity, mm/s^2; one unit step is one second's worth of impulse
GRAVITY_MM_S2 = 9810.0
NEWTON_PER_KG = GRAVITY_MM_S2 / 1000.0


@dataclass(frozen=True)
class ContactFrameBasis:
    """Right-handed local contact frame with normal = tangent1 x tangent2."""

    normal: np.ndarray
    tangent1: np.ndarray
    tangent2: np.ndarray

    def __post_init__(self):
        for name in ("normal", "tangent1", "tangent2"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(3).copy()
            v.flags.writeable = False
            object.__setattr__(self, name, v)
        R = self.as_matrix()
        if not np.allclose(R.T @ R, np.eye(3), atol=100 * BASIS_TOL):
            raise ValueError("contact basis is not orthonormal")
        if not np.allclose(np.cross(self.tangent1, self.tangent2), self.normal, atol=100 * BASIS_TOL):
            raise ValueError("contact basis is not right-handed (n != t x o)")

    def as_matrix(self) -> np.ndarray:
        """Columns (n, t, o): maps local contact coordinates to object frame."""
        return np.column_stack([self.normal, self.tangent1, self.tangent2])


def basis_from_normal(normal, tangent_hint=None) -> ContactFrameBasis:
    """Build a contact frame for `normal`, steering tangent1 along the hint."""
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    if tangent_hint is None:
        tangent_hint = np.array([1.0, 0.0, 0.0])
        if abs(n @ tangent_hint) > 0.9:
            tangent_hint = np.array([0.0, 1.0, 0.0])
    t = np.asarray(tangent_hint, dtype=float)
    t = t - (t @ n) * n
    norm = np.linalg.norm(t)
    if norm < 1e-12:
        raise ValueError("tangent hint is parallel to the normal")
    t = t / norm
    # o = n x t makes (t, o, n) right handed, i.e. n = t x o
    return ContactFrameBasis(n, t, np.cross(n, t))


@dataclass(frozen=True)
class PointContact:
    position: np.ndarray  # object frame, mm
    basis: ContactFrameBasis
    mu: float

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(3).copy()
        p.flags.writeable = False
        object.__setattr__(self, "position", p)
        if self.mu < 0.0:
            raise ValueError("friction coefficient must be nonnegative")


@dataclass(frozen=True)
class PatchShape:
    """point, line(length mm) or circle(radius mm)."""

    kind: str  # "point" | "line" | "circle"
    dimension: float = 0.0

    def __post_init__(self):
        if self.kind not in ("point", "line", "circle"):
            raise ValueError(f"unknown patch shape {self.kind!r}")
        if self.kind != "point" and self.dimension <= 0.0:
            raise InvalidGeometryError(f"{self.kind} patch needs a positive dimension")

    @property
    def footprint_radius(self) -> float:
        if self.kind == "point":
            return 0.0
        if self.kind == "line":
            return self.dimension / 2.0
        return self.dimension


@dataclass(frozen=True)
class ContactPatch:
    shape: PatchShape
    center: np.ndarray  # object frame, mm
    basis: ContactFrameBasis
    mu: float
    points: tuple[PointContact, ...]
    owner: str  # "finger-a" | "finger-b" | pusher id
    face: str | None = None  # object face the patch lives on

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(3).copy()
        c.flags.writeable = False
        object.__setattr__(self, "center", c)
        n = self.basis.normal
        for p in self.points:
            if abs((p.position - self.center) @ n) > 1e-9:
                raise ValueError("patch point leaves the tangent plane")

    def moved_to(self, center, basis: ContactFrameBasis) -> "ContactPatch":
        """Same patch shape re-anchored at a new center/orientation."""
        pts = _patch_points(self.shape, np.asarray(center, dtype=float), basis, self.mu)
        return replace(self, center=np.asarray(center, dtype=float), basis=basis, points=pts)


def _patch_points(shape: PatchShape, center, basis, mu, line_points=3, circle_rim_points=8):
    offsets = [np.zeros(3)]
    if shape.kind == "line":
        if line_points < 2:
            raise InvalidGeometryError("line patch needs at least 2 points")
        half = shape.dimension / 2.0
        offsets = [basis.tangent1 * s for s in np.linspace(-half, half, line_points)]
    elif shape.kind == "circle":
        if circle_rim_points < 3:
            raise InvalidGeometryError("circular patch needs at least 3 rim points")
        angles = 2.0 * np.pi * np.arange(circle_rim_points) / circle_rim_points
        offsets = [
            shape.dimension * (np.cos(a) * basis.tangent1 + np.sin(a) * basis.tangent2)
            for a in angles
        ]
        offsets.append(np.zeros(3))
    return tuple(PointContact(center + off, basis, mu) for off in offsets)


def discretize_patch(
    shape: PatchShape,
    center,
    basis: ContactFrameBasis,
    mu: float,
    owner: str = "pusher",
    face: str | None = None,
    line_points: int = 3,
    circle_rim_points: int = 8,
) -> ContactPatch:
    """Discretize a patch into a rigid array of point contacts.

    point -> the center itself; line -> `line_points` collinear points along
    tangent1 (endpoints included); circle -> `circle_rim_points` equally
    spaced rim points plus the center.
    """
    center = np.asarray(center, dtype=float)
    pts = _patch_points(shape, center, basis, mu, line_points, circle_rim_points)
    return ContactPatch(shape, center, basis, mu, pts, owner, face)


@dataclass(frozen=True)
class PusherSpec:
    """External pusher: initial patch on the object plus operating context."""

    pusher_id: str
    patch: ContactPatch
    gravity_dir: np.ndarray  # unit, gripper frame, active while engaged
    max_linear: np.ndarray = field(default_factory=lambda: np.full(3, 10.0))  # mm/step
    max_angular: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))  # rad/step

    def __post_init__(self):
        g = np.asarray(self.gravity_dir, dtype=float).reshape(3)
        norm = np.linalg.norm(g)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError("gravity_dir must be a unit vector")
        g = g / norm
        g.flags.writeable = False
        object.__setattr__(self, "gravity_dir", g)
        for name in ("max_linear", "max_angular"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(3).copy()
            if np.any(v < 0.0):
                raise ValueError("workspace bounds must be nonnegative")
            v.flags.writeable = False
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class FingerSpec:
    """One jaw of the gripper, fixed in the gripper frame.

    `center` sits on the object surface at the nominal grasp (identity pose);
    `approach` is the jaw axis direction pointing into the object.
    """

    name: str
    center: np.ndarray
    approach: np.ndarray
    shape: PatchShape
    mu: float
    tangent_hint: np.ndarray
    circle_rim_points: int = 8

    def __post_init__(self):
        for name in ("center", "approach", "tangent_hint"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(3).copy()
            v.flags.writeable = False
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class GraspScene:
    """Everything the dynamics and the planner need to know about one grasp."""

    mass: float  # kg
    inertia: np.ndarray  # 6x6 generalized inertia, kg / kg*mm^2 blocks
    fingers: tuple[FingerSpec, FingerSpec]
    grip_force: float  # N, per finger patch
    pushers: tuple[PusherSpec, ...]
    geometry: ConvexPolyhedron | Sphere
    step_duration: float = 1.0  # one unit step

    def __post_init__(self):
        M = np.asarray(self.inertia, dtype=float).reshape(6, 6).copy()
        if not np.allclose(M, M.T, atol=1e-9):
            raise ValueError("generalized inertia must be symmetric")
        if np.any(np.linalg.eigvalsh(M) <= 0.0):
            raise ValueError("generalized inertia must be positive definite")
        M.flags.writeable = False
        object.__setattr__(self, "inertia", M)
        if self.grip_force <= 0.0:
            raise ValueError("grip force must be positive")
        if self.mass < 0.0:
            raise ValueError("mass must be nonnegative")

    def pusher(self, pusher_id: str) -> PusherSpec:
        for p in self.pushers:
            if p.pusher_id == pusher_id:
                return p
        raise KeyError(f"unknown pusher {pusher_id!r}")

    def characteristic_length(self) -> float:
        return self.geometry.bounding_radius()

    def characteristic_impulse(self) -> float:
        return self.grip_force * self.step_duration

    @property
    def finger_patches(self) -> tuple[ContactPatch, ContactPatch]:
        """Finger contact patches at the nominal grasp (identity pose)."""
        a = finger_patch_at_pose(self, self.fingers[0], identity_pose())
        b = finger_patch_at_pose(self, self.fingers[1], identity_pose())
        if a is None or b is None:
            raise InvalidGeometryError("fingers do not touch the object at the nominal grasp")
        return a, b


class GraspLostError(RuntimeError):
    """A finger left its grasped face."""


def finger_patch_at_pose(scene: GraspScene, finger: FingerSpec, pose: Pose) -> ContactPatch | None:
    """Contact patch of a gripper-fixed finger on the object at `pose`.

    The jaw ray is pulled into the object frame and intersected with the
    surface; returns None when the jaw no longer meets the object.
    """
    inv_R = pose.rotation.T
    point_obj = inv_R @ (finger.center - pose.translation - finger.approach * 1e3)
    dir_obj = inv_R @ finger.approach
    hit = scene.geometry.intersect_line(point_obj, dir_obj)
    if hit is None:
        return None
    face_ref, center = hit
    if isinstance(scene.geometry, Sphere):
        inward = -center / np.linalg.norm(center)
        face_id = "sphere"
    else:
        inward = -face_ref.normal
        face_id = face_ref.face_id
    hint = inv_R @ finger.tangent_hint
    hint = hint - (hint @ inward) * inward
    if np.linalg.norm(hint) < 1e-9:
        return None
    basis = basis_from_normal(inward, hint)
    return discretize_patch(
        finger.shape, center, basis, finger.mu,
        owner=finger.name, face=face_id,
        circle_rim_points=finger.circle_rim_points,
    )


def finger_within_face(scene: GraspScene, finger: FingerSpec, pose: Pose) -> bool:
    """True when the finger still grips its face with the full patch footprint."""
    patch = finger_patch_at_pose(scene, finger, pose)
    if patch is None:
        return False
    if isinstance(scene.geometry, Sphere):
        return True
    face = scene.geometry.face(patch.face)
    return face.contains(patch.center, margin=patch.shape.footprint_radius)


@dataclass(frozen=True)
class ContactGroup:
    label: str  # "finger-a", "finger-b" or the pusher id
    patch: ContactPatch
    start: int  # first contact index of this group
    stop: int


@dataclass(frozen=True)
class ContactSet:
    """All point contacts of one instantaneous problem, in a fixed order."""

    contacts: tuple[PointContact, ...]
    groups: tuple[ContactGroup, ...]

    @property
    def n(self) -> int:
        return len(self.contacts)

    def group(self, label: str) -> ContactGroup:
        for g in self.groups:
            if g.label == label:
                return g
        raise KeyError(f"no contact group {label!r}")

    def group_slices(self) -> dict[str, slice]:
        return {g.label: slice(g.start, g.stop) for g in self.groups}

    def mus(self) -> np.ndarray:
        return np.array([c.mu for c in self.contacts])


def build_contact_set(scene: GraspScene, pose: Pose, pusher_patch: ContactPatch) -> ContactSet:
    """Assemble finger contacts at `pose` plus the active pusher patch."""
    groups = []
    contacts: list[PointContact] = []
    for finger in scene.fingers:
        patch = finger_patch_at_pose(scene, finger, pose)
        if patch is None:
            raise GraspLostError(f"finger {finger.name} is not in contact at this pose")
        groups.append(ContactGroup(finger.name, patch, len(contacts), len(contacts) + len(patch.points)))
        contacts.extend(patch.points)
    groups.append(
        ContactGroup(pusher_patch.owner, pusher_patch, len(contacts), len(contacts) + len(pusher_patch.points))
    )
    contacts.extend(pusher_patch.points)
    return ContactSet(tuple(contacts), tuple(groups))


def grasp_map(contacts) -> np.ndarray:
    """Stacked per-contact wrench bases.

    Block i is the 6x3 map [R_i; r_i x R_i] taking a local impulse (n, t, o)
    to the object-frame wrench about the origin; columns concatenate so that
    G @ P sums the contact wrenches.
    """
    if len(contacts) == 0:
        raise ValueError("grasp map needs at least one contact")
    G = np.zeros((6, 3 * len(contacts)))
    for i, c in enumerate(contacts):
        R = c.basis.as_matrix()
        G[:3, 3 * i : 3 * i + 3] = R
        G[3:, 3 * i : 3 * i + 3] = skew(c.position) @ R
    return G


def contact_jacobian_for_set(cset: ContactSet, pusher_label: str) -> np.ndarray:
    """Maps the 6-DOF pusher twist to input velocities at every contact.

    Rows follow the contact order of `cset`; finger rows are zero because the
    jaws command zero velocity.  The pusher twist is expressed in the object
    frame about the object origin.
    """
    J = np.zeros((3 * cset.n, 6))
    g = cset.group(pusher_label)
    for i in range(g.start, g.stop):
        c = cset.contacts[i]
        R = c.basis.as_matrix()
        J[3 * i : 3 * i + 3, :3] = R.T
        J[3 * i : 3 * i + 3, 3:] = -R.T @ skew(c.position)
    return J


def contact_jacobian(scene: GraspScene, active_pusher: str, object_pose: Pose) -> np.ndarray:
    """Contact Jacobian for the catalog patch of `active_pusher` at a pose."""
    patch = scene.pusher(active_pusher).patch
    cset = build_contact_set(scene, object_pose, patch)
    return contact_jacobian_for_set(cset, patch.owner)


def gravity_impulse(scene: GraspScene, active_pusher: str, object_pose: Pose) -> Wrench:
    """Gravitational impulse in the object frame over one unit step.

    Uses the gravity direction tied to the active pusher (constant in the
    gripper frame while that pusher is engaged).  Zero torque because the
    object frame origin is the center of mass.
    """
    spec = scene.pusher(active_pusher)
    magnitude = scene.mass * NEWTON_PER_KG * scene.step_duration  # N*step
    force = magnitude * (object_pose.rotation.T @ spec.gravity_dir)
    return Wrench(force, np.zeros(3))
