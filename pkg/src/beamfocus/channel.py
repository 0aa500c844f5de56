"""Deterministic geometric-optics channel for steered-tile reflectors.

Each tile contributes a complex path coefficient: free-space spreading over
the bounce path, a cosine-power directivity lobe around the specular
direction, and the exact propagation phase.  Tiles are perfect reflectors;
the direct AP-to-user path is always excluded (NLOS deployment).  Optional
single-bounce wall paths use the image method with a Fresnel reflection
coefficient (perpendicular polarization).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, DegenerateGeometry, GeometryError
from .geometry import SegmentSpec, Vec3, tile_centers, tile_normals, unit

SPEED_OF_LIGHT = 299792458.0
VACUUM_PERMITTIVITY = 8.8541878128e-12

# RSSI reported for exactly-zero received field; below any physical value
# and keeps rewards finite.
ZERO_POWER_DBM = -300.0


@dataclass
class Material:
    """Dielectric parameters of a reflecting surface."""

    permittivity: float  # relative, >= 1
    conductivity: float  # S/m, >= 0

    def __post_init__(self):
        if self.permittivity < 1.0:
            raise ConfigError("relative permittivity must be >= 1")
        if self.conductivity < 0.0:
            raise ConfigError("conductivity must be >= 0")


# ITU-R P.2040-1 style building materials
CONCRETE = Material(permittivity=5.31, conductivity=0.0326)
MARBLE = Material(permittivity=7.0, conductivity=0.01)


@dataclass
class ChannelConfig:
    """Carrier, power and tile-lobe settings for the channel evaluation."""

    frequency: float = 60e9          # Hz
    tx_power_dbm: float = 5.0
    directivity_exponent: float | str = "auto"  # "auto" derives q from tile pitch
    h_other_mode: str = "zero"       # {"zero", "walls"}

    def __post_init__(self):
        if self.frequency <= 0:
            raise ConfigError("carrier frequency must be positive")
        if self.h_other_mode not in ("zero", "walls"):
            raise ConfigError(f"unknown h_other_mode {self.h_other_mode!r}")
        if self.directivity_exponent != "auto" and not float(self.directivity_exponent) > 0:
            raise ConfigError("directivity exponent must be positive or 'auto'")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.frequency

    @property
    def wall_paths_enabled(self) -> bool:
        return self.h_other_mode == "walls"

    @property
    def tx_power_watts(self) -> float:
        return 1e-3 * 10.0 ** (self.tx_power_dbm / 10.0)

    def resolve_q(self, pitch: float | None = None) -> float:
        """Numeric directivity exponent; derives the auto value from *pitch*."""
        if self.directivity_exponent != "auto":
            return float(self.directivity_exponent)
        if pitch is None or pitch <= 0:
            raise ConfigError("auto directivity exponent needs the tile pitch")
        return auto_directivity_exponent(self.wavelength, pitch)


def auto_directivity_exponent(wavelength: float, pitch: float) -> float:
    """Exponent q of the cos^q tile lobe tied to the tile aperture.

    Half-power beamwidth 0.886 * wavelength / pitch; q chosen so the
    power pattern G(psi)^2 drops to 1/2 at half that width.
    """
    theta_hp = 0.886 * wavelength / pitch
    half = min(0.5 * theta_hp, 0.5 * math.pi - 1e-9)
    return math.log(0.5) / (2.0 * math.log(math.cos(half)))


@dataclass
class Wall:
    """Finite rectangular reflecting surface.

    Points are ``origin + s*axis1 + t*axis2`` with |s| <= half_width and
    |t| <= half_height; the normal is axis1 x axis2.
    """

    origin: Vec3
    axis1: Vec3
    axis2: Vec3
    half_width: float
    half_height: float
    material: Material

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.axis1 = np.asarray(self.axis1, dtype=float)
        self.axis2 = np.asarray(self.axis2, dtype=float)
        if self.half_width <= 0 or self.half_height <= 0:
            raise ConfigError("wall extents must be positive")

    @property
    def normal(self) -> Vec3:
        return np.cross(self.axis1, self.axis2)


@dataclass
class Scene:
    """Static propagation scene: AP, reflector segments, walls, channel config."""

    ap: Vec3
    segments: list[SegmentSpec]
    cfg: ChannelConfig
    walls: list[Wall] = field(default_factory=list)

    def __post_init__(self):
        self.ap = np.asarray(self.ap, dtype=float)
        # tile centers are fixed for the scene's lifetime
        self.tile_positions = [tile_centers(s) for s in self.segments]

    @property
    def segment_refs(self) -> np.ndarray:
        return np.array([s.origin for s in self.segments])


def tile_coefficient(
    ap: Vec3,
    tile: Vec3,
    normal: Vec3,
    user: Vec3,
    cfg: ChannelConfig,
    pitch: float | None = None,
) -> complex:
    """Complex field coefficient of the AP -> tile -> user bounce.

    Zero when the tile is illuminated or observed from behind its plane
    (keeps the path reciprocal under AP/user exchange).
    """
    h = segment_coefficients(
        ap, np.asarray(tile, dtype=float)[None, :], np.asarray(normal, dtype=float)[None, :],
        user, cfg, pitch,
    )
    return complex(h[0])


def segment_coefficients(
    ap: Vec3,
    tiles: np.ndarray,
    normals: np.ndarray,
    user: Vec3,
    cfg: ChannelConfig,
    pitch: float | None = None,
) -> np.ndarray:
    """Vectorized per-tile coefficients for an (N, 3) tile array."""
    user = np.asarray(user, dtype=float)
    return _per_tile_field(ap, user[None, :], tiles, normals, cfg, pitch)[0]


class WallBounce(NamedTuple):
    """Wall path coefficient plus whether the specular point hit the wall."""

    h: complex
    specular_on_wall: bool


def wall_bounce_coefficient(ap: Vec3, user: Vec3, wall: Wall, cfg: ChannelConfig) -> WallBounce:
    """Single-bounce wall path via the image method.

    Mirrors the AP across the wall plane, intersects the image-user line
    with the wall, and applies a perpendicular-polarization Fresnel
    coefficient with complex permittivity eps_r - j*sigma/(omega*eps0).
    A specular point outside the finite wall yields a zero coefficient,
    flagged in the result.
    """
    ap = np.asarray(ap, dtype=float)
    user = np.asarray(user, dtype=float)
    n = unit(wall.normal)
    s_ap = float(np.dot(ap - wall.origin, n))
    s_user = float(np.dot(user - wall.origin, n))
    if s_ap * s_user <= 0.0 or s_ap == 0.0:
        raise GeometryError("AP and user must lie strictly on the same side of the wall")
    if s_ap < 0.0:
        # allow walls whose normal points away from the scene
        n = -n
        s_ap, s_user = -s_ap, -s_user

    image = ap - 2.0 * s_ap * n
    t_star = s_ap / (s_ap + s_user)
    spec_point = image + t_star * (user - image)
    s1 = float(np.dot(spec_point - wall.origin, wall.axis1))
    s2 = float(np.dot(spec_point - wall.origin, wall.axis2))
    if abs(s1) > wall.half_width or abs(s2) > wall.half_height:
        return WallBounce(0.0 + 0.0j, False)

    d_total = float(np.linalg.norm(user - image))
    cos_i = abs(float(np.dot(unit(user - image), n)))
    gamma = fresnel_perpendicular(cos_i, wall.material, cfg.frequency)

    lam = cfg.wavelength
    amp = lam / (4.0 * math.pi * d_total)
    phase = -2.0 * math.pi * d_total / lam
    return WallBounce(gamma * amp * np.exp(1j * phase), True)


def fresnel_perpendicular(cos_theta_i: float, material: Material, frequency: float) -> complex:
    """Perpendicular-polarization Fresnel reflection from air onto a lossy dielectric.

    *cos_theta_i* is measured from the surface normal.
    """
    omega = 2.0 * math.pi * frequency
    eps = material.permittivity - 1j * material.conductivity / (omega * VACUUM_PERMITTIVITY)
    sin2 = 1.0 - cos_theta_i**2
    root = np.sqrt(eps - sin2)
    return complex((cos_theta_i - root) / (cos_theta_i + root))


def other_paths_coefficient(ap: Vec3, user: Vec3, walls: Sequence[Wall], cfg: ChannelConfig) -> complex:
    """Sum of single-bounce wall contributions (zero unless walls mode is on)."""
    if not cfg.wall_paths_enabled or not walls:
        return 0.0 + 0.0j
    total = 0.0 + 0.0j
    for wall in walls:
        total += wall_bounce_coefficient(ap, user, wall, cfg).h
    return total


def received_power(
    ap: Vec3,
    user: Vec3,
    tiles: np.ndarray,
    normals: np.ndarray,
    cfg: ChannelConfig,
    pitch: float | None = None,
    walls: Sequence[Wall] | None = None,
) -> tuple[float, float]:
    """Coherent received power over a set of tiles, as (watts, RSSI dBm).

    All per-tile coefficients and the wall term are summed as complex
    fields before squaring, so perfectly phased tiles gain quadratically.
    Zero total field reports the ``ZERO_POWER_DBM`` sentinel.
    """
    p_r, rssi = received_power_batch(ap, np.asarray(user, dtype=float)[None, :],
                                     tiles, normals, cfg, pitch, walls)
    return float(p_r[0]), float(rssi[0])


def received_power_batch(
    ap: Vec3,
    users: np.ndarray,
    tiles: np.ndarray,
    normals: np.ndarray,
    cfg: ChannelConfig,
    pitch: float | None = None,
    walls: Sequence[Wall] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`received_power` over an (M, 3) batch of user positions."""
    users = np.atleast_2d(np.asarray(users, dtype=float))
    field_sum = _segment_field_batch(ap, users, tiles, normals, cfg, pitch)
    if cfg.wall_paths_enabled and walls:
        field_sum = field_sum + np.array(
            [other_paths_coefficient(ap, u, walls, cfg) for u in users]
        )
    return _field_to_power(field_sum, cfg)


def _field_to_power(field_sum: np.ndarray, cfg: ChannelConfig) -> tuple[np.ndarray, np.ndarray]:
    mag = np.abs(field_sum)
    p_r = cfg.tx_power_watts * mag**2
    with np.errstate(divide="ignore"):
        rssi = np.where(mag > 0.0, cfg.tx_power_dbm + 20.0 * np.log10(mag), ZERO_POWER_DBM)
    return p_r, rssi


def field_to_power(field_sum: complex, cfg: ChannelConfig) -> tuple[float, float]:
    """Received (watts, RSSI dBm) of an aggregated complex field ratio."""
    p, rssi = _field_to_power(np.asarray([field_sum]), cfg)
    return float(p[0]), float(rssi[0])


@dataclass
class CoverageGrid:
    """Rectangular sampling grid at a fixed height."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    nx: int
    ny: int
    height: float

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ConfigError("coverage grid needs at least one cell per axis")

    def cell_centers(self) -> np.ndarray:
        """(ny*nx, 3) cell-center positions, row-major over (y, x)."""
        xs = self.x_min + (np.arange(self.nx) + 0.5) * (self.x_max - self.x_min) / self.nx
        ys = self.y_min + (np.arange(self.ny) + 0.5) * (self.y_max - self.y_min) / self.ny
        gx, gy = np.meshgrid(xs, ys)                       # (ny, nx)
        return np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, self.height)])


def coverage_map(scene: Scene, focal_points: np.ndarray, grid: CoverageGrid) -> np.ndarray:
    """(ny, nx) RSSI map in dBm with every segment aimed at its focal point.

    Cell [iy, ix] is :func:`received_power` at that cell center, all
    segments' tiles aggregated coherently.
    """
    focal_points = np.atleast_2d(np.asarray(focal_points, dtype=float))
    if len(focal_points) != len(scene.segments):
        raise ConfigError("one focal point per segment is required")
    users = grid.cell_centers()
    field_sum = np.zeros(len(users), dtype=complex)
    for spec, tiles, focal in zip(scene.segments, scene.tile_positions, focal_points):
        normals = tile_normals(tiles, scene.ap, focal)
        field_sum += _segment_field_batch(scene.ap, users, tiles, normals, scene.cfg, spec.pitch)
    if scene.cfg.wall_paths_enabled and scene.walls:
        field_sum += np.array(
            [other_paths_coefficient(scene.ap, u, scene.walls, scene.cfg) for u in users]
        )
    _, rssi = _field_to_power(field_sum, scene.cfg)
    return rssi.reshape(grid.ny, grid.nx)


def _per_tile_field(
    ap: Vec3,
    users: np.ndarray,
    tiles: np.ndarray,
    normals: np.ndarray,
    cfg: ChannelConfig,
    pitch: float | None,
) -> np.ndarray:
    """(M, N) complex per-tile coefficients for M users and N tiles."""
    ap = np.asarray(ap, dtype=float)
    tiles = np.asarray(tiles, dtype=float)
    normals = np.asarray(normals, dtype=float)
    lam = cfg.wavelength
    q = cfg.resolve_q(pitch)

    to_ap = ap - tiles                                     # (N, 3)
    d1 = np.linalg.norm(to_ap, axis=1)
    to_user = users[:, None, :] - tiles[None, :, :]        # (M, N, 3)
    d2 = np.linalg.norm(to_user, axis=2)
    if np.any(d1 < 1e-9) or np.any(d2 < 1e-9):
        raise DegenerateGeometry("AP or user coincides with a tile")
    dir_ap = to_ap / d1[:, None]
    dir_user = to_user / d2[:, :, None]

    front_in = np.einsum("ij,ij->i", dir_ap, normals) > 0.0
    front_out = np.einsum("mnj,nj->mn", dir_user, normals) > 0.0

    # specular direction of the incident ray, per tile
    incident = -dir_ap
    refl = incident - 2.0 * np.einsum("ij,ij->i", incident, normals)[:, None] * normals
    cos_psi = np.clip(np.einsum("mnj,nj->mn", dir_user, refl), 0.0, 1.0)
    gain = np.where(front_in[None, :] & front_out, cos_psi**q, 0.0)

    total_len = d1[None, :] + d2
    return gain * lam / (4.0 * math.pi * total_len) * np.exp(-2j * math.pi * total_len / lam)


def _segment_field_batch(
    ap: Vec3,
    users: np.ndarray,
    tiles: np.ndarray,
    normals: np.ndarray,
    cfg: ChannelConfig,
    pitch: float | None,
) -> np.ndarray:
    """Complex field sum of one segment's tiles for a batch of users, (M,)."""
    return _per_tile_field(ap, users, tiles, normals, cfg, pitch).sum(axis=1)
