"""Experiment harness: run configs, training drivers, evaluation, file I/O.

Reproduces the experimental protocol at desk scale: the four methods on
the canonical two-segment scene, deployment evaluation under mobility,
the localization-noise sweep with error-matched training, and the
dimensionality report.  All results land as CSV next to a JSON config
echo; figures are rendered alongside by :mod:`beamfocus.report`.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .channel import ChannelConfig, CoverageGrid, Scene, coverage_map
from .env import EnvConfig, ReflectorEnv
from .errors import ConfigError, DimensionMismatch, WorkerFailure
from .geometry import segment_facing
from .marl import (
    METHODS,
    HierarchicalTrainer,
    PpoConfig,
    PriorSchedule,
    RolloutBatch,
    compute_gae,
    CurveRow,
    _gaussian_log_prob_np,
)
from .nn import load_checkpoint, save_checkpoint
from . import scenes

DEFAULT_SIGMA_SWEEP = (0.0, 0.1, 0.3, 0.5, 1.0, 2.0)
EVAL_HORIZON = 300

RUN_CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "beamfocus run configuration",
    "type": "object",
    "properties": {
        "scene": {
            "type": "object",
            "properties": {
                "ap": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
                "frequency_hz": {"type": "number", "exclusiveMinimum": 0},
                "tx_power_dbm": {"type": "number"},
                "h_other_mode": {"enum": ["zero", "walls"]},
                "segments": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "properties": {
                            "origin": {"type": "array"},
                            "target": {"type": "array"},
                            "rows": {"type": "integer", "minimum": 1},
                            "cols": {"type": "integer", "minimum": 1},
                            "pitch": {"type": "number", "exclusiveMinimum": 0},
                        },
                    },
                },
                "walls": {"enum": ["room_default", "none"]},
            },
        },
        "env": {"type": "object"},
        "ppo": {"type": "object"},
        "prior": {
            "type": "object",
            "properties": {
                "initial_weight": {"type": "number", "minimum": 0},
                "cutoff_fraction": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "method": {"enum": list(METHODS)},
        "n_envs": {"type": "integer", "minimum": 1},
        "sigma_sweep": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "eval_horizon": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "out_dir": {"type": "string"},
        "coverage_focals": {"type": ["array", "null"]},
        "coverage_grid": {
            "type": "object",
            "properties": {
                "x_min": {"type": "number"}, "x_max": {"type": "number"},
                "y_min": {"type": "number"}, "y_max": {"type": "number"},
                "nx": {"type": "integer", "minimum": 1},
                "ny": {"type": "integer", "minimum": 1},
                "height": {"type": "number"},
            },
        },
    },
}


@dataclass
class SegmentConfig:
    origin: tuple[float, float, float] = (5.0, 5.0, 2.0)
    target: tuple[float, float, float] = (0.0, 0.0, 1.5)
    rows: int = 8
    cols: int = 8
    pitch: float = 0.025


@dataclass
class SceneConfig:
    ap: tuple[float, float, float] = tuple(scenes.AP_POSITION)
    frequency_hz: float = 60e9
    tx_power_dbm: float = 5.0
    h_other_mode: str = "zero"
    walls: str = "room_default"
    segments: list[SegmentConfig] = field(default_factory=lambda: [
        SegmentConfig(origin=tuple(o)) for o in scenes.SEGMENT_ORIGINS
    ])

    def build(self) -> Scene:
        cfg = ChannelConfig(
            frequency=self.frequency_hz,
            tx_power_dbm=self.tx_power_dbm,
            directivity_exponent="auto",
            h_other_mode=self.h_other_mode,
        )
        segs = [
            segment_facing(np.asarray(s.origin, dtype=float), np.asarray(s.target, dtype=float),
                           s.rows, s.cols, s.pitch)
            for s in self.segments
        ]
        walls = scenes.room_walls() if self.walls == "room_default" else []
        return Scene(ap=np.asarray(self.ap, dtype=float), segments=segs, cfg=cfg, walls=walls)


@dataclass
class RunConfig:
    """Everything one run needs; JSON round-trippable with resolved defaults."""

    scene: SceneConfig = field(default_factory=SceneConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    prior_initial_weight: float = 5.0
    prior_cutoff_fraction: float = 0.4
    method: str = "allocator"
    n_envs: int = 8
    sigma_sweep: tuple[float, ...] = DEFAULT_SIGMA_SWEEP
    eval_horizon: int = EVAL_HORIZON
    seed: int = 0
    out_dir: str = "runs/desk"
    # coverage export settings: one focal point per segment plus a grid
    coverage_focals: list | None = None
    coverage_grid: dict = field(default_factory=lambda: {
        "x_min": scenes.REGION_X[0], "x_max": scenes.REGION_X[1],
        "y_min": scenes.REGION_Y[0], "y_max": scenes.REGION_Y[1],
        "nx": 50, "ny": 50, "height": scenes.USER_HEIGHT,
    })

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.n_envs < 1:
            raise ConfigError("n_envs must be >= 1")
        if any(s < 0 for s in self.sigma_sweep):
            raise ConfigError("sigma sweep values must be >= 0")
        if len(self.scene.segments) != self.env.n_segments:
            raise ConfigError("scene segment count must match env.n_segments")

    @property
    def prior(self) -> PriorSchedule:
        return PriorSchedule.for_total(
            self.ppo.total_episodes, self.prior_initial_weight, self.prior_cutoff_fraction
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sigma_sweep"] = list(self.sigma_sweep)
        d["prior"] = {
            "initial_weight": d.pop("prior_initial_weight"),
            "cutoff_fraction": d.pop("prior_cutoff_fraction"),
        }
        # canonical JSON form: tuples become lists, numpy scalars plain floats
        return json.loads(json.dumps(d, default=float))

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        scene_raw = raw.pop("scene", {})
        segments = [SegmentConfig(**s) for s in scene_raw.pop("segments", [])] or None
        scene = SceneConfig(**scene_raw) if segments is None else SceneConfig(
            **scene_raw, segments=segments
        )
        env = EnvConfig(**raw.pop("env", {}))
        ppo = PpoConfig(**raw.pop("ppo", {}))
        prior = raw.pop("prior", {})
        known = {
            "prior_initial_weight": raw.pop(
                "prior_initial_weight", prior.get("initial_weight", 5.0)),
            "prior_cutoff_fraction": raw.pop(
                "prior_cutoff_fraction", prior.get("cutoff_fraction", 0.4)),
        }
        for key in ("method", "n_envs", "sigma_sweep", "eval_horizon", "seed", "out_dir",
                    "coverage_focals", "coverage_grid"):
            if key in raw:
                known[key] = raw.pop(key)
        if "sigma_sweep" in known:
            known["sigma_sweep"] = tuple(known["sigma_sweep"])
        if raw:
            raise ConfigError(f"unknown config keys: {sorted(raw)}")
        return cls(scene=scene, env=env, ppo=ppo, **known)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)

    def env_factory(self, noise_std: float | None = None):
        env_cfg_dict = asdict(self.env)
        if noise_std is not None:
            env_cfg_dict["noise_std"] = noise_std

        def factory(_env_id: int) -> ReflectorEnv:
            return ReflectorEnv(self.scene.build(), EnvConfig(**env_cfg_dict))

        return factory


# -- operations -------------------------------------------------------------------


def dimensionality_report(n_users: int, n_segments: int, rows: int, cols: int) -> tuple[int, int]:
    """Control dimension with per-tile angles vs per-segment focal points.

    Per-tile: the allocation space plus two angles per tile.  Focal: the
    allocation space plus three coordinates per segment.  Exact integers.
    """
    for name, v in (("n_users", n_users), ("n_segments", n_segments),
                    ("rows", rows), ("cols", cols)):
        if int(v) != v or v < 1:
            raise ConfigError(f"{name} must be a positive integer")
    if n_segments * math.log2(max(2, n_users)) > 62:
        raise OverflowError(f"allocation space {n_users}**{n_segments} overflows")
    alloc = int(n_users) ** int(n_segments)
    d_tile = alloc + 2 * int(rows) * int(cols)
    d_focal = alloc + 3 * int(n_segments)
    return d_tile, d_focal


def run_concurrent_rollouts(
    env_factory,
    trainer: HierarchicalTrainer,
    n_envs: int,
    steps: int,
    seed: int,
) -> RolloutBatch:
    """Synchronous batched rollout of a policy snapshot.

    One transition per environment per step (stepping is strictly
    round-robin: no env advances ahead of another), rows tagged with env
    ids, deterministic given (seed, n_envs, policy).  Environments reset
    whenever an episode ends.
    """
    if n_envs < 1:
        raise ConfigError("n_envs must be >= 1")
    envs = [env_factory(i) for i in range(n_envs)]
    seg = trainer.n_segments
    dim = trainer.obs_dim
    ss = np.random.SeedSequence(seed)
    reset_rng = np.random.default_rng(ss.spawn(1)[0])
    sample_rng = np.random.default_rng(ss.spawn(2)[1])
    states = []
    for i, env in enumerate(envs):
        try:
            states.append(env.reset(int(reset_rng.integers(0, 2**63 - 1))))
        except Exception as exc:  # pragma: no cover - defensive
            raise WorkerFailure(i, seed, exc) from exc

    obs_rows = np.zeros((steps * n_envs, dim))
    act_rows = np.zeros((steps * n_envs, 3 * seg))
    logp_rows = np.zeros(steps * n_envs)
    env_ids = np.zeros(steps * n_envs, dtype=int)
    rewards = np.zeros((n_envs, steps))

    log_std = trainer.head.log_std.data
    row = 0
    for t in range(steps):
        for e, env in enumerate(envs):
            try:
                state = states[e]
                if state.t % env.cfg.macro_period == 0:
                    env.set_allocation(state, trainer.sample_allocation(env, state, sample_rng))
                obs_rows[row] = env.observe_high(state)
                mean = trainer.low_action_means(env, state)          # (seg, 3)
                # shared 3-vector log-std for the hierarchical actor,
                # flattened (seg*3,) for the centralized one
                ls = log_std.reshape(mean.shape) if log_std.size == mean.size else \
                    np.broadcast_to(log_std, mean.shape)
                sample = mean + np.exp(ls) * sample_rng.normal(size=mean.shape)
                act_rows[row] = sample.reshape(-1)
                logp_rows[row] = float(_gaussian_log_prob_np(sample, mean, ls).sum())
                env_ids[row] = e
                states[e], r, _, done = env.step(sample.reshape(seg, 3))
                rewards[e, t] = r
                if done:
                    states[e] = env.reset(int(reset_rng.integers(0, 2**63 - 1)))
                row += 1
            except WorkerFailure:
                raise
            except Exception as exc:
                raise WorkerFailure(e, seed, exc) from exc

    batch = RolloutBatch(centralized=True)
    batch.low_obs = obs_rows
    batch.low_actions = act_rows
    batch.low_log_probs = logp_rows
    batch.low_global_obs = obs_rows
    batch.low_env_ids = env_ids
    adv_rows = np.zeros(steps * n_envs)
    ret_rows = np.zeros(steps * n_envs)
    for e in range(n_envs):
        values = trainer.critic(obs_rows[env_ids == e]).data.reshape(-1)
        dones = np.zeros(steps)
        dones[-1] = 1.0
        adv, ret = compute_gae(rewards[e], values, dones, 0.0,
                               trainer.ppo.discount, trainer.ppo.gae_lambda)
        adv_rows[env_ids == e] = adv
        ret_rows[env_ids == e] = ret
    batch.low_advantages = adv_rows
    batch.low_returns = ret_rows
    return batch


@dataclass
class EvalReport:
    """Deployment evaluation: per-step per-user RSSI under mobility."""

    method: str
    sigma_err: float
    rssi_dbm: np.ndarray      # (horizon, n_users)
    rewards: np.ndarray       # (horizon,)

    @property
    def mean_rssi_dbm(self) -> float:
        return float(self.rssi_dbm.mean())

    @property
    def std_rssi_dbm(self) -> float:
        return float(self.rssi_dbm.std())


def evaluate(
    cfg: RunConfig,
    trainer: HierarchicalTrainer,
    sigma_err: float,
    seed: int,
    horizon: int | None = None,
) -> EvalReport:
    """Deterministic-policy deployment run at localization noise *sigma_err*."""
    horizon = horizon or cfg.eval_horizon
    env_cfg_dict = asdict(cfg.env)
    env_cfg_dict["noise_std"] = sigma_err
    env_cfg_dict["episode_length"] = horizon
    env = ReflectorEnv(cfg.scene.build(), EnvConfig(**env_cfg_dict))
    if env.cfg.n_users != trainer.n_users or env.cfg.n_segments != trainer.n_segments:
        raise DimensionMismatch("checkpoint sizes do not match the evaluation config")

    ss = np.random.SeedSequence(seed)
    reset_child, alloc_child = ss.spawn(2)
    state = env.reset(int(np.random.default_rng(reset_child).integers(0, 2**63 - 1)))
    alloc_rng = np.random.default_rng(alloc_child)

    rssi = np.zeros((horizon, env.cfg.n_users))
    rewards = np.zeros(horizon)
    for t in range(horizon):
        if state.t % env.cfg.macro_period == 0:
            if trainer.method == "random":
                env.set_allocation(state, trainer.sample_allocation(env, state, alloc_rng))
            else:
                env.set_allocation(state, trainer.deterministic_allocation(env, state))
        acts = trainer.deterministic_low_actions(env, state)
        state, r, step_rssi, _ = env.step(acts)
        rssi[t] = step_rssi
        rewards[t] = r
    return EvalReport(
        method=trainer.method, sigma_err=sigma_err, rssi_dbm=rssi, rewards=rewards
    )


# -- file output ----------------------------------------------------------------


def _fmt(value) -> str:
    return repr(float(value))


def write_training_curve_csv(path: str | Path, rows: list[CurveRow]) -> None:
    lines = ["episode,mean_reward,mean_rssi_dbm,alpha,method"]
    for r in sorted(rows, key=lambda r: r.episode):
        lines.append(
            f"{r.episode},{_fmt(r.mean_reward)},{_fmt(r.mean_rssi_dbm)},"
            f"{_fmt(r.alpha)},{r.method}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def write_eval_csv(path: str | Path, reports: list[EvalReport]) -> None:
    lines = ["method,sigma_err,step,user,rssi_dbm"]
    for rep in reports:
        horizon, n_users = rep.rssi_dbm.shape
        for t in range(horizon):
            for k in range(n_users):
                lines.append(
                    f"{rep.method},{_fmt(rep.sigma_err)},{t},{k + 1},{_fmt(rep.rssi_dbm[t, k])}"
                )
    Path(path).write_text("\n".join(lines) + "\n")


def write_eval_summary_csv(path: str | Path, reports: list[EvalReport]) -> None:
    lines = ["method,sigma_err,mean_rssi_dbm,std_rssi_dbm"]
    for rep in reports:
        lines.append(
            f"{rep.method},{_fmt(rep.sigma_err)},{_fmt(rep.mean_rssi_dbm)},"
            f"{_fmt(rep.std_rssi_dbm)}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def write_coverage_csv(path: str | Path, matrix: np.ndarray, grid: CoverageGrid) -> None:
    """Row-major dBm matrix preceded by one metadata header row."""
    header = (
        f"# coverage_map x_min={_fmt(grid.x_min)} x_max={_fmt(grid.x_max)}"
        f" y_min={_fmt(grid.y_min)} y_max={_fmt(grid.y_max)}"
        f" nx={grid.nx} ny={grid.ny} height={_fmt(grid.height)} units=dBm"
    )
    lines = [header]
    for row in matrix:
        lines.append(",".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def write_config_echo(path: str | Path, cfg: RunConfig) -> None:
    echo = {"schema": "beamfocus-run-config-v1", "resolved": cfg.to_dict()}
    Path(path).write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")


# -- drivers ---------------------------------------------------------------------


def checkpoint_path(out_dir: str | Path, method: str, seed: int,
                    sigma: float | None = None) -> Path:
    name = f"checkpoint_{method}_seed{seed}"
    if sigma is not None:
        name += f"_sigma{sigma:g}"
    return Path(out_dir) / f"{name}.json"


def save_trainer(path: str | Path, trainer: HierarchicalTrainer, cfg: RunConfig,
                 sigma: float | None = None) -> None:
    meta = {
        "method": trainer.method,
        "episodes_done": trainer.episodes_done,
        "nonfinite_events": trainer.nonfinite_events,
        "run_config": cfg.to_dict(),
    }
    if sigma is not None:
        meta["trained_sigma_err"] = sigma
    save_checkpoint(
        path, trainer.nets(), trainer.optimizers(),
        rng_state=trainer.policy_rng.bit_generator.state, meta=meta,
    )


def load_trainer(path: str | Path) -> tuple[HierarchicalTrainer, RunConfig]:
    """Rebuild a trainer (architecture from the config echo in the checkpoint)."""
    blob = json.loads(Path(path).read_text())
    meta = blob.get("meta", {})
    if "run_config" not in meta:
        raise DimensionMismatch(f"checkpoint {path} carries no run config")
    cfg = RunConfig.from_dict(meta["run_config"])
    trainer = HierarchicalTrainer(
        cfg.env_factory(), meta["method"], cfg.ppo, cfg.prior, n_envs=1, seed=cfg.seed
    )
    load_checkpoint(path, trainer.nets(), trainer.optimizers())
    return trainer, cfg


def run_method(cfg: RunConfig, log_every: int = 10,
               render_figures: bool = True) -> tuple[list[CurveRow], Path]:
    """Train one method per the config; writes curve CSV, echo, checkpoint."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config_echo(out / "config_echo.json", cfg)
    trainer = HierarchicalTrainer(
        cfg.env_factory(), cfg.method, cfg.ppo, cfg.prior, cfg.n_envs, cfg.seed
    )
    curve = trainer.train(log_every=log_every)
    curve_path = out / "training_curve.csv"
    write_training_curve_csv(curve_path, curve)
    ckpt = checkpoint_path(out, cfg.method, cfg.seed)
    save_trainer(ckpt, trainer, cfg)
    if render_figures:
        from .report import plot_training_curve

        plot_training_curve([curve_path], out / "training_curve.png")
    return curve, ckpt


def run_sweep(cfg: RunConfig, log_every: int = 0,
              render_figures: bool = True) -> list[EvalReport]:
    """Error-matched noise sweep: train and evaluate at each sigma."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config_echo(out / "config_echo.json", cfg)
    reports: list[EvalReport] = []
    for sigma in cfg.sigma_sweep:
        env_dict = asdict(cfg.env)
        env_dict["noise_std"] = sigma
        sweep_cfg = RunConfig(
            scene=cfg.scene, env=EnvConfig(**env_dict), ppo=cfg.ppo,
            prior_initial_weight=cfg.prior_initial_weight,
            prior_cutoff_fraction=cfg.prior_cutoff_fraction,
            method=cfg.method, n_envs=cfg.n_envs, sigma_sweep=cfg.sigma_sweep,
            eval_horizon=cfg.eval_horizon, seed=cfg.seed, out_dir=cfg.out_dir,
        )
        trainer = HierarchicalTrainer(
            sweep_cfg.env_factory(), sweep_cfg.method, sweep_cfg.ppo,
            sweep_cfg.prior, sweep_cfg.n_envs, sweep_cfg.seed,
        )
        trainer.train(log_every=log_every)
        save_trainer(
            checkpoint_path(out, cfg.method, cfg.seed, sigma), trainer, sweep_cfg, sigma
        )
        reports.append(evaluate(sweep_cfg, trainer, sigma, seed=cfg.seed))
    write_eval_csv(out / "eval_rssi.csv", reports)
    write_eval_summary_csv(out / "eval_summary.csv", reports)
    if render_figures:
        from .report import plot_noise_sweep

        plot_noise_sweep(reports, out / "noise_sweep.png")
    return reports


def export_coverage_map(
    cfg: RunConfig,
    focal_points: np.ndarray,
    grid: CoverageGrid,
    out_path: str | Path,
    render_figures: bool = True,
) -> np.ndarray:
    """Coverage map of the configured scene with the given focal points."""
    scene = cfg.scene.build()
    matrix = coverage_map(scene, focal_points, grid)
    write_coverage_csv(out_path, matrix, grid)
    if render_figures:
        from .report import plot_coverage

        plot_coverage(matrix, grid, Path(out_path).with_suffix(".png"))
    return matrix
