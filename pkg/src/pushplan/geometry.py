"""Object surface geometry: convex polyhedra (boxes) and spheres.

Faces are addressed by short ids ("x+", "z-", ...).  All coordinates live in
the object frame with the origin at the center of mass; lengths in mm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PLANE_TOL = 1e-9


class InvalidGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Face:
    """A planar convex face: outward normal, plane offset and vertex loop."""

    face_id: str
    normal: np.ndarray  # unit, outward
    offset: float  # plane is normal . x = offset
    vertices: np.ndarray  # (n, 3), counterclockwise seen from outside

    def contains(self, point, margin: float = 0.0) -> bool:
        """True if `point` projects inside the face with clearance `margin`.

        The condition is closed: points exactly `margin` from every edge pass.
        """
        p = np.asarray(point, dtype=float)
        n = len(self.vertices)
        for i in range(n):
            a = self.vertices[i]
            b = self.vertices[(i + 1) % n]
            edge = b - a
            # inward edge normal within the face plane
            inward = np.cross(self.normal, edge)
            inward = inward / np.linalg.norm(inward)
            if (p - a) @ inward < margin - PLANE_TOL:
                return False
        return True

    def project(self, point) -> np.ndarray:
        p = np.asarray(point, dtype=float)
        return p - ((p @ self.normal) - self.offset) * self.normal


@dataclass(frozen=True)
class ConvexPolyhedron:
    faces: tuple[Face, ...]

    kind: str = "polyhedron"

    def face(self, face_id: str) -> Face:
        for f in self.faces:
            if f.face_id == face_id:
                return f
        raise KeyError(f"unknown face {face_id!r}")

    def face_ids(self) -> list[str]:
        return [f.face_id for f in self.faces]

    def bounding_radius(self) -> float:
        return float(max(np.linalg.norm(f.vertices, axis=1).max() for f in self.faces))

    def intersect_line(self, point, direction):
        """First face pierced by the ray entering the body.

        Returns (face, hit_point) for the face whose outward normal opposes
        `direction`; None if the line misses the body.
        """
        p = np.asarray(point, dtype=float)
        d = np.asarray(direction, dtype=float)
        d = d / np.linalg.norm(d)
        best = None
        for f in self.faces:
            denom = f.normal @ d
            if abs(denom) < PLANE_TOL:
                continue
            s = (f.offset - f.normal @ p) / denom
            hit = p + s * d
            if denom < 0.0 and f.contains(hit, margin=-1e-7):
                if best is None or s < best[2]:
                    best = (f, hit, s)
        if best is None:
            return None
        return best[0], best[1]


@dataclass(frozen=True)
class Sphere:
    radius: float

    kind: str = "sphere"

    def __post_init__(self):
        if self.radius <= 0.0:
            raise InvalidGeometryError("sphere radius must be positive")

    def bounding_radius(self) -> float:
        return self.radius

    def face_ids(self) -> list[str]:
        return ["sphere"]

    def intersect_line(self, point, direction):
        """Entry point of the line into the sphere, or None."""
        p = np.asarray(point, dtype=float)
        d = np.asarray(direction, dtype=float)
        d = d / np.linalg.norm(d)
        # |p + s d|^2 = r^2
        b = p @ d
        c = p @ p - self.radius**2
        disc = b * b - c
        if disc < 0.0:
            return None
        s = -b - np.sqrt(disc)
        return "sphere", p + s * d

    def surface_point_for_normal(self, inward_normal) -> np.ndarray:
        """Surface point whose into-object normal equals `inward_normal`."""
        n = np.asarray(inward_normal, dtype=float)
        n = n / np.linalg.norm(n)
        return -self.radius * n


def box_geometry(size) -> ConvexPolyhedron:
    """Axis-aligned box centered at the origin; `size` = full extents in mm."""
    sx, sy, sz = (float(s) / 2.0 for s in np.asarray(size, dtype=float))
    if min(sx, sy, sz) <= 0.0:
        raise InvalidGeometryError("box extents must be positive")

    def corner(i, j, k):
        return np.array([i * sx, j * sy, k * sz])

    # vertex loops counterclockwise seen from outside
    spec = [
        ("x+", np.array([1.0, 0, 0]), sx, [(1, -1, -1), (1, 1, -1), (1, 1, 1), (1, -1, 1)]),
        ("x-", np.array([-1.0, 0, 0]), sx, [(-1, 1, -1), (-1, -1, -1), (-1, -1, 1), (-1, 1, 1)]),
        ("y+", np.array([0, 1.0, 0]), sy, [(1, 1, -1), (-1, 1, -1), (-1, 1, 1), (1, 1, 1)]),
        ("y-", np.array([0, -1.0, 0]), sy, [(-1, -1, -1), (1, -1, -1), (1, -1, 1), (-1, -1, 1)]),
        ("z+", np.array([0, 0, 1.0]), sz, [(1, -1, 1), (1, 1, 1), (-1, 1, 1), (-1, -1, 1)]),
        ("z-", np.array([0, 0, -1.0]), sz, [(-1, -1, -1), (-1, 1, -1), (1, 1, -1), (1, -1, -1)]),
    ]
    faces = tuple(
        Face(fid, n, off, np.array([corner(*c) for c in loop]))
        for fid, n, off, loop in spec
    )
    return ConvexPolyhedron(faces)


def box_inertia(mass: float, size) -> np.ndarray:
    """Rotational inertia of a solid box about its center, kg*mm^2."""
    a, b, c = np.asarray(size, dtype=float)
    return mass / 12.0 * np.diag([b * b + c * c, a * a + c * c, a * a + b * b])


def sphere_inertia(mass: float, radius: float) -> np.ndarray:
    """Rotational inertia of a solid sphere, kg*mm^2."""
    return 0.4 * mass * radius * radius * np.eye(3)


def generalized_inertia(mass: float, rotational: np.ndarray) -> np.ndarray:
    """6x6 generalized inertia: diag(m I3, I_rot)."""
    M = np.zeros((6, 6))
    M[:3, :3] = mass * np.eye(3)
    M[3:, 3:] = np.asarray(rotational, dtype=float)
    return M
