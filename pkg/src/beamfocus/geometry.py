"""Pure geometry for mechanically steered reflector tiles.

Positions and directions are ``numpy`` arrays of shape (3,), float64, in
meters (dimensionless for unit directions).  Everything here is a pure
function of its inputs and safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometry, NotUnit

Vec3 = np.ndarray

_EPS_DEGENERATE = 1e-9
_EPS_ORTHO = 1e-12


def vec3(x: float, y: float, z: float) -> Vec3:
    """Build a float64 3-vector."""
    return np.array([x, y, z], dtype=float)


def unit(v: Vec3) -> Vec3:
    """Unit vector along *v*; raises DegenerateGeometry near zero length."""
    n = float(np.linalg.norm(v))
    if n < _EPS_DEGENERATE:
        raise DegenerateGeometry(f"cannot normalize near-zero vector {v}")
    return np.asarray(v, dtype=float) / n


def reflect(direction: Vec3, normal: Vec3) -> Vec3:
    """Mirror *direction* across the plane with unit *normal*."""
    d = np.asarray(direction, dtype=float)
    return d - 2.0 * float(np.dot(d, normal)) * np.asarray(normal, dtype=float)


def tile_normal(tile_pos: Vec3, source_pos: Vec3, focal_pos: Vec3) -> Vec3:
    """Unit normal that specularly redirects source illumination at the focal point.

    The half-sum of the unit directions tile->source and tile->focal is
    renormalized to unit length (only the orientation is physical).  Raises
    DegenerateGeometry when the two directions are antiparallel (grazing
    limit) or a position coincides with the tile.
    """
    to_source = unit(np.asarray(source_pos, dtype=float) - tile_pos)
    to_focal = unit(np.asarray(focal_pos, dtype=float) - tile_pos)
    half = 0.5 * (to_source + to_focal)
    n = float(np.linalg.norm(half))
    if n < _EPS_DEGENERATE:
        raise DegenerateGeometry("source and focal directions are antiparallel")
    return half / n


def tile_normals(tile_positions: np.ndarray, source_pos: Vec3, focal_pos: Vec3) -> np.ndarray:
    """Vectorized :func:`tile_normal` over an (N, 3) array of tile centers."""
    tiles = np.asarray(tile_positions, dtype=float)
    to_source = np.asarray(source_pos, dtype=float) - tiles
    to_focal = np.asarray(focal_pos, dtype=float) - tiles
    ns = np.linalg.norm(to_source, axis=1)
    nf = np.linalg.norm(to_focal, axis=1)
    if np.any(ns < _EPS_DEGENERATE) or np.any(nf < _EPS_DEGENERATE):
        raise DegenerateGeometry("a tile coincides with the source or focal point")
    half = 0.5 * (to_source / ns[:, None] + to_focal / nf[:, None])
    h = np.linalg.norm(half, axis=1)
    if np.any(h < _EPS_DEGENERATE):
        raise DegenerateGeometry("source and focal directions are antiparallel at a tile")
    return half / h[:, None]


def normal_to_angles(n: Vec3) -> tuple[float, float]:
    """Elevation / azimuth of a unit normal.

    elevation = asin(n_z) in [-pi/2, pi/2]; azimuth = atan2(n_y, n_x) in
    (-pi, pi], forced to 0 at the poles where azimuth is undefined.
    """
    n = np.asarray(n, dtype=float)
    if abs(float(np.linalg.norm(n)) - 1.0) > _EPS_DEGENERATE:
        raise NotUnit(f"|n| = {np.linalg.norm(n)!r} is not 1")
    elevation = math.asin(max(-1.0, min(1.0, float(n[2]))))
    if math.cos(elevation) < 1e-12:
        return elevation, 0.0
    return elevation, math.atan2(float(n[1]), float(n[0]))


def angles_to_normal(elevation: float, azimuth: float) -> Vec3:
    """Inverse of :func:`normal_to_angles`."""
    ce = math.cos(elevation)
    return np.array([ce * math.cos(azimuth), ce * math.sin(azimuth), math.sin(elevation)])


@dataclass
class TileOrientation:
    """A tile's unit normal together with its mechanical angles."""

    normal: Vec3
    elevation: float
    azimuth: float

    @classmethod
    def from_normal(cls, n: Vec3) -> "TileOrientation":
        elevation, azimuth = normal_to_angles(n)
        return cls(normal=np.asarray(n, dtype=float), elevation=elevation, azimuth=azimuth)


@dataclass
class SegmentSpec:
    """A planar grid of tile centers.

    Tiles sit at ``origin + (i - (rows-1)/2) * pitch * axis1
    + (j - (cols-1)/2) * pitch * axis2`` so the grid is centered on
    ``origin``, which doubles as the segment reference point.
    """

    origin: Vec3
    axis1: Vec3
    axis2: Vec3
    rows: int
    cols: int
    pitch: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.axis1 = np.asarray(self.axis1, dtype=float)
        self.axis2 = np.asarray(self.axis2, dtype=float)
        if self.rows < 1 or self.cols < 1:
            raise ValueError("rows and cols must be positive")
        if self.pitch <= 0:
            raise ValueError("tile pitch must be positive")
        for name, ax in (("axis1", self.axis1), ("axis2", self.axis2)):
            if abs(float(np.linalg.norm(ax)) - 1.0) > _EPS_ORTHO:
                raise NotUnit(f"{name} is not unit length")
        if abs(float(np.dot(self.axis1, self.axis2))) > _EPS_ORTHO:
            raise ValueError("axis1 and axis2 are not orthogonal")

    @property
    def n_tiles(self) -> int:
        return self.rows * self.cols

    @property
    def plane_normal(self) -> Vec3:
        return np.cross(self.axis1, self.axis2)


def tile_centers(spec: SegmentSpec) -> np.ndarray:
    """Row-major (rows*cols, 3) array of tile center positions."""
    i = np.arange(spec.rows) - (spec.rows - 1) / 2.0
    j = np.arange(spec.cols) - (spec.cols - 1) / 2.0
    off1 = spec.pitch * np.outer(i, spec.axis1)          # (rows, 3)
    off2 = spec.pitch * np.outer(j, spec.axis2)          # (cols, 3)
    grid = spec.origin + off1[:, None, :] + off2[None, :, :]
    return grid.reshape(spec.rows * spec.cols, 3)


def segment_facing(
    origin: Vec3,
    target: Vec3,
    rows: int,
    cols: int,
    pitch: float,
    up: Vec3 = (0.0, 0.0, 1.0),
) -> SegmentSpec:
    """Segment whose mounting plane faces *target* from *origin*.

    axis1 is horizontal (perpendicular to the facing direction and *up*),
    axis2 completes the right-handed frame, so ``plane_normal`` points at
    the target.
    """
    normal = unit(np.asarray(target, dtype=float) - origin)
    up = np.asarray(up, dtype=float)
    a1 = np.cross(up, normal)
    n1 = float(np.linalg.norm(a1))
    if n1 < _EPS_DEGENERATE:
        # facing straight up/down; fall back to x as the in-plane direction
        a1 = np.cross(np.array([1.0, 0.0, 0.0]), normal)
        n1 = float(np.linalg.norm(a1))
    a1 = a1 / n1
    a2 = np.cross(normal, a1)
    return SegmentSpec(origin=origin, axis1=a1, axis2=a2, rows=rows, cols=cols, pitch=pitch)


def reflection_half_angle(ap: Vec3, segment_ref: Vec3, user: Vec3) -> float:
    """Half the angle subtended at the segment between the AP and user directions.

    Lies in [0, pi/2]: near-retro geometry gives 0, a through-plane /
    grazing fold gives pi/2.
    """
    to_ap = unit(np.asarray(ap, dtype=float) - segment_ref)
    to_user = unit(np.asarray(user, dtype=float) - segment_ref)
    c = max(-1.0, min(1.0, float(np.dot(to_ap, to_user))))
    return 0.5 * math.acos(c)


def compatibility(user: Vec3, segment_ref: Vec3, ap: Vec3, d0: float) -> float:
    """Geometric favorability of serving *user* from the segment at *segment_ref*.

    exp(-dist/d0) * cos(half reflection angle): decays with user distance
    and vanishes when the AP and user fold through the segment plane.
    """
    if d0 <= 0:
        raise ValueError("d0 must be positive")
    d = float(np.linalg.norm(np.asarray(user, dtype=float) - segment_ref))
    theta = reflection_half_angle(ap, segment_ref, user)
    return math.exp(-d / d0) * math.cos(theta)


def compatibility_matrix(
    users: np.ndarray, segment_refs: np.ndarray, ap: Vec3, d0: float
) -> np.ndarray:
    """(K, L) matrix of :func:`compatibility` scores for all user/segment pairs."""
    users = np.atleast_2d(np.asarray(users, dtype=float))
    refs = np.atleast_2d(np.asarray(segment_refs, dtype=float))
    out = np.empty((users.shape[0], refs.shape[0]))
    for k, u in enumerate(users):
        for l, r in enumerate(refs):
            out[k, l] = compatibility(u, r, ap, d0)
    return out
