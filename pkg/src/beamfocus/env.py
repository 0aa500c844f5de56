"""Hierarchical multi-agent control environment for steered reflector segments.

State: true and observed (noisy) user positions, one focal point per
segment, and a user-to-segment allocation.  Low-level agents move focal
points with bounded per-step displacements; a high-level controller
rewrites the allocation on macro-step boundaries.  The reward is the sum
over users of the RSSI margin above a floor (the raw watt-scale power sum
is also tracked for inspection).

User and segment indices are 1-based at this public surface: allocations
map segment l in {1..L} to a user in {1..K}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .channel import Scene, field_to_power, other_paths_coefficient, segment_coefficients
from .errors import ActionShapeError, ConfigError, PhaseError
from .geometry import compatibility_matrix, tile_normals


@dataclass
class EnvConfig:
    """Sizes, timing and noise settings of the environment."""

    n_users: int = 2
    n_segments: int = 2
    region_x: tuple[float, float] = (-5.0, 5.0)
    region_y: tuple[float, float] = (-5.0, 5.0)
    user_height: float = 1.5
    user_speed: float = 1.0          # m/s
    step_duration: float = 0.1       # s
    actuation_limit: float = 0.5     # max focal displacement per axis per step, m
    macro_period: int = 10           # env steps between allocation updates
    episode_length: int = 200
    noise_std: float = 0.0           # localization error std, m (x and y)
    focal_init_mean: tuple[float, float, float] = (0.0, 0.0, 1.5)
    focal_init_cov: float = 2.5      # isotropic covariance of the initial focal points
    reward_floor_dbm: float = -90.0
    compat_d0: float = 10.0          # distance normalization of the compatibility score
    strict_macro: bool = True        # reject off-boundary allocation changes

    def __post_init__(self):
        if self.n_users < 1 or self.n_segments < 1:
            raise ConfigError("need at least one user and one segment")
        if self.macro_period < 1:
            raise ConfigError("macro period must be >= 1")
        if self.actuation_limit <= 0 or self.step_duration <= 0:
            raise ConfigError("actuation limit and step duration must be positive")
        if self.episode_length < 1:
            raise ConfigError("episode length must be >= 1")
        if self.noise_std < 0 or self.user_speed < 0:
            raise ConfigError("noise std and user speed must be >= 0")
        if self.focal_init_cov < 0 or self.compat_d0 <= 0:
            raise ConfigError("bad focal init covariance or compatibility scale")


@dataclass
class EnvState:
    """Full environment state; ``waypoints`` are mobility internals."""

    users: np.ndarray            # (K, 3) true positions
    users_observed: np.ndarray   # (K, 3) noisy positions
    focals: np.ndarray           # (L, 3)
    allocation: np.ndarray       # (L,) ints in 1..K
    t: int
    rssi_dbm: np.ndarray         # (K,) cache from the last evaluation
    power_watts_total: float     # sum over users of received watts (logged)
    waypoints: np.ndarray        # (K, 3) current mobility targets

    def copy(self) -> "EnvState":
        return EnvState(
            users=self.users.copy(),
            users_observed=self.users_observed.copy(),
            focals=self.focals.copy(),
            allocation=self.allocation.copy(),
            t=self.t,
            rssi_dbm=self.rssi_dbm.copy(),
            power_watts_total=self.power_watts_total,
            waypoints=self.waypoints.copy(),
        )


def inject_localization_noise(
    true_positions: np.ndarray, noise_std: float, rng: np.random.Generator
) -> np.ndarray:
    """Add zero-mean Gaussian error of std *noise_std* to x and y (height is known)."""
    if noise_std < 0:
        raise ConfigError("noise std must be >= 0")
    observed = np.array(true_positions, dtype=float)
    if noise_std > 0:
        observed[:, :2] += rng.normal(0.0, noise_std, size=(len(observed), 2))
    return observed


class ReflectorEnv:
    """One environment instance; not thread-safe, clone per worker."""

    def __init__(self, scene: Scene, cfg: EnvConfig):
        if len(scene.segments) != cfg.n_segments:
            raise ConfigError("scene segment count does not match the config")
        self.scene = scene
        self.cfg = cfg
        self.rng: np.random.Generator | None = None
        self.state: EnvState | None = None

    # -- observation sizes -------------------------------------------------
    @property
    def high_obs_dim(self) -> int:
        return 3 * self.cfg.n_users + 6 * self.cfg.n_segments

    LOW_OBS_DIM = 9

    # -- lifecycle ----------------------------------------------------------
    def reset(self, seed: int) -> EnvState:
        """Deterministic initial state for (config, seed)."""
        cfg = self.cfg
        self.rng = np.random.default_rng(seed)
        users = np.column_stack([
            self.rng.uniform(*cfg.region_x, size=cfg.n_users),
            self.rng.uniform(*cfg.region_y, size=cfg.n_users),
            np.full(cfg.n_users, cfg.user_height),
        ])
        waypoints = self._sample_waypoints(cfg.n_users)
        focal_std = math.sqrt(cfg.focal_init_cov)
        focals = np.asarray(cfg.focal_init_mean, dtype=float) + focal_std * self.rng.normal(
            size=(cfg.n_segments, 3)
        )
        observed = inject_localization_noise(users, cfg.noise_std, self.rng)
        allocation = self._greedy_allocation(observed)
        state = EnvState(
            users=users,
            users_observed=observed,
            focals=focals,
            allocation=allocation,
            t=0,
            rssi_dbm=np.zeros(cfg.n_users),
            power_watts_total=0.0,
            waypoints=waypoints,
        )
        self._evaluate(state)
        self.state = state
        return state

    def step(self, low_actions: np.ndarray) -> tuple[EnvState, float, np.ndarray, bool]:
        """Apply per-segment focal displacements and advance one timestep."""
        state = self._require_state()
        cfg = self.cfg
        actions = np.asarray(low_actions, dtype=float)
        if actions.shape != (cfg.n_segments, 3):
            raise ActionShapeError(
                f"expected ({cfg.n_segments}, 3) actions, got {actions.shape}"
            )
        state.focals += np.clip(actions, -cfg.actuation_limit, cfg.actuation_limit)
        self._move_users(state)
        state.users_observed = inject_localization_noise(state.users, cfg.noise_std, self.rng)
        self._evaluate(state)
        reward = float(
            np.sum(np.maximum(0.0, state.rssi_dbm - cfg.reward_floor_dbm))
        )
        state.t += 1
        done = state.t >= cfg.episode_length
        return state, reward, state.rssi_dbm.copy(), done

    def set_allocation(self, state: EnvState, allocation) -> EnvState:
        """Assign one user (1..K) to each segment; macro boundaries only."""
        alloc = np.asarray(allocation, dtype=int)
        if alloc.shape != (self.cfg.n_segments,):
            raise ActionShapeError(f"allocation must have length {self.cfg.n_segments}")
        if np.any(alloc < 1) or np.any(alloc > self.cfg.n_users):
            raise IndexError(f"allocation entries must lie in 1..{self.cfg.n_users}")
        if self.cfg.strict_macro and state.t % self.cfg.macro_period != 0:
            raise PhaseError(
                f"allocation update at t={state.t} is off the macro boundary"
            )
        state.allocation = alloc
        return state

    # -- observations --------------------------------------------------------
    def observe_high(self, state: EnvState) -> np.ndarray:
        """Flat global observation: noisy users, segment refs, focal points."""
        return np.concatenate([
            state.users_observed.ravel(),
            self.scene.segment_refs.ravel(),
            state.focals.ravel(),
        ])

    def observe_low(self, state: EnvState, segment: int) -> np.ndarray:
        """9-vector for segment l in 1..L: assigned user, own ref, own focal."""
        if not 1 <= segment <= self.cfg.n_segments:
            raise IndexError(f"segment index {segment} out of 1..{self.cfg.n_segments}")
        user_idx = int(state.allocation[segment - 1]) - 1
        return np.concatenate([
            state.users_observed[user_idx],
            self.scene.segments[segment - 1].origin,
            state.focals[segment - 1],
        ])

    def compat_matrix(self, state: EnvState) -> np.ndarray:
        """(K, L) compatibility scores from the observed user positions."""
        return compatibility_matrix(
            state.users_observed, self.scene.segment_refs, self.scene.ap, self.cfg.compat_d0
        )

    # -- internals -------------------------------------------------------------
    def _require_state(self) -> EnvState:
        if self.state is None or self.rng is None:
            raise ConfigError("reset() must be called before stepping")
        return self.state

    def _sample_waypoints(self, count: int) -> np.ndarray:
        return np.column_stack([
            self.rng.uniform(*self.cfg.region_x, size=count),
            self.rng.uniform(*self.cfg.region_y, size=count),
            np.full(count, self.cfg.user_height),
        ])

    def _move_users(self, state: EnvState) -> None:
        step_len = self.cfg.user_speed * self.cfg.step_duration
        if step_len == 0.0:
            return
        for k in range(self.cfg.n_users):
            delta = state.waypoints[k] - state.users[k]
            dist = float(np.linalg.norm(delta))
            if dist <= step_len:
                state.users[k] = state.waypoints[k]
                state.waypoints[k] = self._sample_waypoints(1)[0]
            else:
                state.users[k] += delta * (step_len / dist)

    def _greedy_allocation(self, observed: np.ndarray) -> np.ndarray:
        compat = compatibility_matrix(
            observed, self.scene.segment_refs, self.scene.ap, self.cfg.compat_d0
        )
        # per segment: best user, ties to the lowest user index (argmax takes first)
        return np.argmax(compat, axis=0) + 1

    def _evaluate(self, state: EnvState) -> None:
        """Recompute tile normals from the focal points and every user's RSSI."""
        scene = self.scene
        normals = [
            tile_normals(tiles, scene.ap, focal)
            for tiles, focal in zip(scene.tile_positions, state.focals)
        ]
        rssi = np.empty(self.cfg.n_users)
        watts = 0.0
        for k in range(self.cfg.n_users):
            serving = [l for l in range(self.cfg.n_segments) if state.allocation[l] == k + 1]
            total = 0.0 + 0.0j
            for l in serving:
                total += complex(np.sum(segment_coefficients(
                    scene.ap, scene.tile_positions[l], normals[l], state.users[k],
                    scene.cfg, scene.segments[l].pitch,
                )))
            total += other_paths_coefficient(scene.ap, state.users[k], scene.walls, scene.cfg)
            p, r = field_to_power(total, scene.cfg)
            rssi[k] = r
            watts += p
        state.rssi_dbm = rssi
        state.power_watts_total = watts
