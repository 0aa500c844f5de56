"""Desk-scale scene presets shared by the experiments, the CLI and the tests."""

from __future__ import annotations

import numpy as np

from .channel import CONCRETE, MARBLE, ChannelConfig, Scene, Wall
from .geometry import segment_facing, vec3

# 10 m x 10 m coverage region, centered on the origin
REGION_X = (-5.0, 5.0)
REGION_Y = (-5.0, 5.0)
USER_HEIGHT = 1.5
ROOM_HEIGHT = 3.0

AP_POSITION = vec3(-2.0, 0.0, 2.5)
SEGMENT_ORIGINS = (vec3(5.0, 5.0, 2.0), vec3(5.0, -5.0, 2.0))
ROOM_CENTER = vec3(0.0, 0.0, USER_HEIGHT)

TILE_ROWS = 8
TILE_COLS = 8
TILE_PITCH = 0.025  # meters


def room_walls() -> list[Wall]:
    """Four concrete walls plus a marble floor for the 10 x 10 m room."""
    hw, hh = 5.0, ROOM_HEIGHT / 2.0
    zc = ROOM_HEIGHT / 2.0
    walls = [
        Wall(vec3(5.0, 0.0, zc), vec3(0, 1, 0), vec3(0, 0, 1), hw, hh, CONCRETE),
        Wall(vec3(-5.0, 0.0, zc), vec3(0, 1, 0), vec3(0, 0, 1), hw, hh, CONCRETE),
        Wall(vec3(0.0, 5.0, zc), vec3(1, 0, 0), vec3(0, 0, 1), hw, hh, CONCRETE),
        Wall(vec3(0.0, -5.0, zc), vec3(1, 0, 0), vec3(0, 0, 1), hw, hh, CONCRETE),
        Wall(vec3(0.0, 0.0, 0.0), vec3(1, 0, 0), vec3(0, 1, 0), 5.0, 5.0, MARBLE),
    ]
    return walls


def canonical_scene(
    n_segments: int = 2,
    rows: int = TILE_ROWS,
    cols: int = TILE_COLS,
    pitch: float = TILE_PITCH,
    frequency: float = 60e9,
    tx_power_dbm: float = 5.0,
    h_other_mode: str = "zero",
) -> Scene:
    """Corner-mounted reflector segments facing the room center.

    The AP sits near the ceiling on the opposite side; the direct AP-user
    path is excluded by the channel model regardless.
    """
    segments = [
        segment_facing(origin, ROOM_CENTER, rows, cols, pitch)
        for origin in SEGMENT_ORIGINS[:n_segments]
    ]
    cfg = ChannelConfig(
        frequency=frequency,
        tx_power_dbm=tx_power_dbm,
        directivity_exponent="auto",
        h_other_mode=h_other_mode,
    )
    return Scene(ap=AP_POSITION.copy(), segments=segments, cfg=cfg, walls=room_walls())


def region_contains(p: np.ndarray) -> bool:
    return REGION_X[0] <= p[0] <= REGION_X[1] and REGION_Y[0] <= p[1] <= REGION_Y[1]
