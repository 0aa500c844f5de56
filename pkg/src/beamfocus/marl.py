"""Hierarchical multi-agent PPO with a geometric allocation prior.

Two timescales: shared low-level focal agents act every step from their
local 9-vectors; the allocation controller acts every ``macro_period``
steps from the global state.  Training is centralized (a global critic
per level scores the joint state), execution is decentralized.  The
compatibility prior enters the allocation policy as a pre-softmax logit
offset weighted by a decaying gate, and its log-probabilities are used
consistently for sampling and for PPO ratios.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, minimum, select_rows
from .env import ReflectorEnv
from .errors import ConfigError, LengthMismatch, NonFinite, ShapeMismatch
from .nn import (
    Adam,
    GaussianHead,
    ManagerNet,
    Mlp,
    categorical_entropy,
    categorical_log_probs,
    categorical_sample,
    tokens_from_global_obs,
)

METHODS = ("allocator", "no_compat", "no_allocator", "random")


@dataclass
class PpoConfig:
    """Clipped-surrogate hyperparameters (shared by both hierarchy levels)."""

    discount: float = 0.985
    gae_lambda: float = 0.9
    clip_ratio: float = 0.2
    value_coef: float = 1.0
    entropy_coef: float = 1.0e-4
    epochs_per_batch: int = 40
    minibatch_size: int = 200
    learning_rate: float = 2.0e-4
    grad_clip_norm: float = 0.5
    total_episodes: int = 800

    def __post_init__(self):
        if not 0.0 < self.discount <= 1.0:
            raise ConfigError("discount must be in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigError("gae lambda must be in [0, 1]")
        if self.clip_ratio <= 0.0:
            raise ConfigError("clip ratio must be positive")
        if self.minibatch_size < 1 or self.epochs_per_batch < 1:
            raise ConfigError("bad batch settings")


@dataclass
class PriorSchedule:
    """Linearly decaying weight of the compatibility prior."""

    initial_weight: float = 5.0
    cutoff_episode: int = 320  # weight is exactly zero from this episode on

    def alpha(self, episode: int) -> float:
        if self.initial_weight <= 0.0 or self.cutoff_episode <= 0:
            return 0.0
        return self.initial_weight * max(0.0, 1.0 - episode / self.cutoff_episode)

    @classmethod
    def for_total(cls, total_episodes: int, initial_weight: float = 5.0,
                  cutoff_fraction: float = 0.4) -> "PriorSchedule":
        return cls(initial_weight=initial_weight,
                   cutoff_episode=int(round(cutoff_fraction * total_episodes)))


def compute_gae(
    rewards, values, dones, bootstrap_value: float, discount: float, lam: float
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and returns for one trajectory.

    values[t] scores the state the t-th reward was earned from; the
    bootstrap scores the state after the last transition (ignored when
    the trajectory ends in a terminal).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    if not (len(rewards) == len(values) == len(dones)):
        raise LengthMismatch(
            f"rewards {len(rewards)}, values {len(values)}, dones {len(dones)}"
        )
    n = len(rewards)
    adv = np.zeros(n)
    next_value = float(bootstrap_value)
    carry = 0.0
    for t in range(n - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + discount * next_value * live - values[t]
        carry = delta + discount * lam * live * carry
        adv[t] = carry
        next_value = values[t]
    return adv, adv + values


# -- allocation policy -------------------------------------------------------


def allocation_table(n_users: int, n_segments: int) -> np.ndarray:
    """(n_users**n_segments, n_segments) table of allocations, users 1-based.

    Index encoding is mixed-radix with segment 1 least significant.
    """
    count = n_users**n_segments
    table = np.empty((count, n_segments), dtype=int)
    for idx in range(count):
        rem = idx
        for l in range(n_segments):
            table[idx, l] = rem % n_users + 1
            rem //= n_users
    return table


def prior_scores(compat: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Per-allocation prior: sum over segments of the assigned user's score."""
    compat = np.asarray(compat, dtype=float)
    k, l = compat.shape
    if table.shape[1] != l or table.max() > k:
        raise ShapeMismatch(f"compat {compat.shape} vs table {table.shape}")
    cols = np.arange(l)
    return compat[table - 1, cols].sum(axis=1)


def select_allocation(
    obs_high: np.ndarray,
    manager: ManagerNet,
    compat: np.ndarray,
    alpha: float,
    rng: np.random.Generator,
) -> tuple[int, float]:
    """Sample an allocation index from softmax(logits + alpha * prior).

    Returns the index and its log-probability under the prior-shifted
    distribution (the prior is part of the policy while alpha > 0).
    """
    tokens = tokens_from_global_obs(obs_high, manager.n_users, manager.n_segments)
    logits = manager(tokens).data[0].copy()
    if alpha > 0.0:
        table = allocation_table(manager.n_users, manager.n_segments)
        logits = logits + alpha * prior_scores(compat, table)
    idx = categorical_sample(logits, rng)
    z = logits - logits.max()
    log_probs = z - math.log(np.exp(z).sum())
    return idx, float(log_probs[idx])


# -- rollout storage ------------------------------------------------------------


@dataclass
class RolloutBatch:
    """Flattened transitions for both hierarchy levels, ready for PPO.

    Low-level rows are one per (env, step, agent); for the centralized
    baseline they are one per (env, step) with ``low_alloc_actions``
    holding the allocation index on macro rows (-1 elsewhere).  Macro
    rows are one per allocation decision of the hierarchical manager.
    """

    centralized: bool = False
    low_obs: np.ndarray = field(default_factory=lambda: np.zeros((0, 9)))
    low_actions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    low_alloc_actions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    low_log_probs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    low_global_obs: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    low_advantages: np.ndarray = field(default_factory=lambda: np.zeros(0))
    low_returns: np.ndarray = field(default_factory=lambda: np.zeros(0))
    low_env_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    macro_obs: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    macro_actions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    macro_log_probs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    macro_prior_offsets: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    macro_advantages: np.ndarray = field(default_factory=lambda: np.zeros(0))
    macro_returns: np.ndarray = field(default_factory=lambda: np.zeros(0))
    macro_env_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self) -> int:
        return len(self.low_obs)


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    if len(adv) == 0:
        return adv
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def _global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global norm is at most *max_norm*."""
    norm = _global_grad_norm(params)
    if norm > max_norm > 0.0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class _UpdateGuard:
    """Snapshot/restore around an update; trips on non-finite parameters."""

    def __init__(self, params: dict[str, Tensor]):
        self.params = params
        self.backup = {k: p.data.copy() for k, p in params.items()}

    def check(self) -> bool:
        return all(np.all(np.isfinite(p.data)) for p in self.params.values())

    def restore(self) -> None:
        for k, p in self.params.items():
            p.data = self.backup[k]
            p.grad = None


def ppo_update_gaussian(
    obs: np.ndarray,
    actions: np.ndarray,
    old_log_probs: np.ndarray,
    advantages: np.ndarray,
    returns: np.ndarray,
    critic_obs: np.ndarray,
    actor: Mlp,
    head: GaussianHead,
    critic: Mlp,
    actor_opt: Adam,
    critic_opt: Adam,
    cfg: PpoConfig,
    rng: np.random.Generator,
) -> dict:
    """Clipped-surrogate update of a Gaussian actor plus its critic."""
    n = len(obs)
    eps = cfg.clip_ratio
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0,
             "ratio_max_dev": 0.0, "nonfinite": False, "minibatches": 0}
    guard = _UpdateGuard({**actor.params(), **head.params(), **critic.params()})
    first = True
    for _ in range(cfg.epochs_per_batch):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            mb = order[start : start + cfg.minibatch_size]
            mean = actor(obs[mb])
            logp = head.log_prob(mean, actions[mb])
            ratio = (logp - old_log_probs[mb]).exp()
            if first:
                stats["ratio_max_dev"] = float(np.abs(ratio.data - 1.0).max())
                first = False
            adv = advantages[mb]
            surrogate = minimum(ratio * adv, ratio.clip(1 - eps, 1 + eps) * adv).mean()
            value = critic(critic_obs[mb]).reshape(-1)
            value_loss = ((value - returns[mb]) ** 2.0).mean()
            entropy = head.entropy()
            loss = -surrogate + cfg.value_coef * value_loss - cfg.entropy_coef * entropy
            if not np.isfinite(loss.data):
                guard.restore()
                stats["nonfinite"] = True
                raise NonFinite("gaussian PPO loss is not finite; parameters restored")
            loss.backward()
            clip_gradients(actor_opt.params, cfg.grad_clip_norm)
            clip_gradients(critic_opt.params, cfg.grad_clip_norm)
            actor_opt.step()
            critic_opt.step()
            stats["policy_loss"] = float(-surrogate.data)
            stats["value_loss"] = float(value_loss.data)
            stats["entropy"] = float(entropy.data)
            stats["minibatches"] += 1
    if not guard.check():
        guard.restore()
        stats["nonfinite"] = True
        raise NonFinite("gaussian PPO produced non-finite parameters; restored")
    return stats


def ppo_update_categorical(
    tokens: np.ndarray,
    actions: np.ndarray,
    old_log_probs: np.ndarray,
    prior_offsets: np.ndarray,
    advantages: np.ndarray,
    returns: np.ndarray,
    critic_obs: np.ndarray,
    manager: ManagerNet,
    critic: Mlp,
    manager_opt: Adam,
    critic_opt: Adam,
    cfg: PpoConfig,
    rng: np.random.Generator,
) -> dict:
    """Clipped-surrogate update of the allocation policy plus its critic.

    ``prior_offsets`` are the alpha-weighted prior logits recorded at
    collection time; they stay part of the policy during the update.
    """
    n = len(tokens)
    eps = cfg.clip_ratio
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0,
             "ratio_max_dev": 0.0, "nonfinite": False, "minibatches": 0}
    guard = _UpdateGuard({**manager.params(), **critic.params()})
    first = True
    for _ in range(cfg.epochs_per_batch):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            mb = order[start : start + cfg.minibatch_size]
            logits = manager(tokens[mb]) + prior_offsets[mb]
            logp = select_rows(categorical_log_probs(logits), actions[mb])
            ratio = (logp - old_log_probs[mb]).exp()
            if first:
                stats["ratio_max_dev"] = float(np.abs(ratio.data - 1.0).max())
                first = False
            adv = advantages[mb]
            surrogate = minimum(ratio * adv, ratio.clip(1 - eps, 1 + eps) * adv).mean()
            value = critic(critic_obs[mb]).reshape(-1)
            value_loss = ((value - returns[mb]) ** 2.0).mean()
            entropy = categorical_entropy(logits).mean()
            loss = -surrogate + cfg.value_coef * value_loss - cfg.entropy_coef * entropy
            if not np.isfinite(loss.data):
                guard.restore()
                stats["nonfinite"] = True
                raise NonFinite("allocation PPO loss is not finite; parameters restored")
            loss.backward()
            clip_gradients(manager_opt.params, cfg.grad_clip_norm)
            clip_gradients(critic_opt.params, cfg.grad_clip_norm)
            manager_opt.step()
            critic_opt.step()
            stats["policy_loss"] = float(-surrogate.data)
            stats["value_loss"] = float(value_loss.data)
            stats["entropy"] = float(entropy.data)
            stats["minibatches"] += 1
    if not guard.check():
        guard.restore()
        stats["nonfinite"] = True
        raise NonFinite("allocation PPO produced non-finite parameters; restored")
    return stats


class CentralizedActor:
    """Single PPO actor on the global state.

    A shared ReLU trunk feeds a displacement head (3 components per
    segment) and an allocation-logit head sampled on macro boundaries.
    """

    def __init__(
        self,
        in_dim: int,
        n_segments: int,
        n_allocations: int,
        rng: np.random.Generator,
        hidden: int = 256,
        out_scale: float = 0.01,
    ):
        from .nn import orthogonal

        self.in_dim = in_dim
        g = math.sqrt(2.0)
        self.w1 = Tensor(orthogonal(rng, in_dim, hidden, g), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(orthogonal(rng, hidden, hidden, g), requires_grad=True)
        self.b2 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w_disp = Tensor(orthogonal(rng, hidden, 3 * n_segments, out_scale), requires_grad=True)
        self.b_disp = Tensor(np.zeros(3 * n_segments), requires_grad=True)
        self.w_alloc = Tensor(orthogonal(rng, hidden, n_allocations, out_scale), requires_grad=True)
        self.b_alloc = Tensor(np.zeros(n_allocations), requires_grad=True)

    def forward(self, obs) -> tuple[Tensor, Tensor]:
        x = obs if isinstance(obs, Tensor) else Tensor(np.asarray(obs, dtype=float))
        if x.data.shape[-1] != self.in_dim:
            raise ShapeMismatch(f"expected obs dim {self.in_dim}, got {x.data.shape}")
        h = (x @ self.w1 + self.b1).relu()
        h = (h @ self.w2 + self.b2).relu()
        return h @ self.w_disp + self.b_disp, h @ self.w_alloc + self.b_alloc

    __call__ = forward

    def params(self) -> dict[str, Tensor]:
        return {
            "w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
            "w_disp": self.w_disp, "b_disp": self.b_disp,
            "w_alloc": self.w_alloc, "b_alloc": self.b_alloc,
        }


def ppo_update_centralized(
    obs: np.ndarray,
    disp_actions: np.ndarray,
    alloc_actions: np.ndarray,
    old_log_probs: np.ndarray,
    advantages: np.ndarray,
    returns: np.ndarray,
    actor: CentralizedActor,
    head: GaussianHead,
    critic: Mlp,
    actor_opt: Adam,
    critic_opt: Adam,
    cfg: PpoConfig,
    rng: np.random.Generator,
) -> dict:
    """PPO for the centralized baseline: joint Gaussian-plus-categorical
    log-probabilities (the categorical part only on macro rows, where
    ``alloc_actions`` >= 0)."""
    n = len(obs)
    eps = cfg.clip_ratio
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0,
             "ratio_max_dev": 0.0, "nonfinite": False, "minibatches": 0}
    guard = _UpdateGuard({**actor.params(), **head.params(), **critic.params()})
    first = True
    for _ in range(cfg.epochs_per_batch):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            mb = order[start : start + cfg.minibatch_size]
            mean, logits = actor(obs[mb])
            logp = head.log_prob(mean, disp_actions[mb])
            idx = alloc_actions[mb]
            macro_mask = (idx >= 0).astype(float)
            safe_idx = np.where(idx >= 0, idx, 0)
            cat_logp = select_rows(categorical_log_probs(logits), safe_idx)
            logp = logp + cat_logp * macro_mask
            ratio = (logp - old_log_probs[mb]).exp()
            if first:
                stats["ratio_max_dev"] = float(np.abs(ratio.data - 1.0).max())
                first = False
            adv = advantages[mb]
            surrogate = minimum(ratio * adv, ratio.clip(1 - eps, 1 + eps) * adv).mean()
            value = critic(obs[mb]).reshape(-1)
            value_loss = ((value - returns[mb]) ** 2.0).mean()
            macro_count = max(1.0, float(macro_mask.sum()))
            entropy = head.entropy() + (categorical_entropy(logits) * macro_mask).sum() * (
                1.0 / macro_count
            )
            loss = -surrogate + cfg.value_coef * value_loss - cfg.entropy_coef * entropy
            if not np.isfinite(loss.data):
                guard.restore()
                stats["nonfinite"] = True
                raise NonFinite("centralized PPO loss is not finite; parameters restored")
            loss.backward()
            clip_gradients(actor_opt.params, cfg.grad_clip_norm)
            clip_gradients(critic_opt.params, cfg.grad_clip_norm)
            actor_opt.step()
            critic_opt.step()
            stats["policy_loss"] = float(-surrogate.data)
            stats["value_loss"] = float(value_loss.data)
            stats["entropy"] = float(entropy.data)
            stats["minibatches"] += 1
    if not guard.check():
        guard.restore()
        stats["nonfinite"] = True
        raise NonFinite("centralized PPO produced non-finite parameters; restored")
    return stats


LOG_TWO_PI_NP = math.log(2.0 * math.pi)


def _gaussian_log_prob_np(actions: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (actions - mean) * np.exp(-log_std)
    return (-0.5 * z * z - log_std - 0.5 * LOG_TWO_PI_NP).sum(axis=-1)


@dataclass
class CurveRow:
    """One training-curve record: one episode of one environment."""

    episode: int
    mean_reward: float
    mean_rssi_dbm: float
    alpha: float
    method: str


class HierarchicalTrainer:
    """Synchronous collect-update loop over a fleet of environments.

    Methods:
      allocator     manager with the compatibility prior (full system)
      no_compat     manager without the prior (alpha forced to zero)
      no_allocator  one centralized PPO actor for displacements + allocation
      random        uniform allocation each macro step, learned low level
    """

    def __init__(
        self,
        env_factory,
        method: str,
        ppo: PpoConfig,
        prior: PriorSchedule,
        n_envs: int = 8,
        seed: int = 0,
    ):
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
        if n_envs < 1:
            raise ConfigError("need at least one environment")
        self.method = method
        self.ppo = ppo
        self.prior = prior
        self.n_envs = n_envs
        self.seed = seed

        self.envs: list[ReflectorEnv] = [env_factory(i) for i in range(n_envs)]
        env_cfg = self.envs[0].cfg
        self.n_users = env_cfg.n_users
        self.n_segments = env_cfg.n_segments
        self.episode_length = env_cfg.episode_length
        self.macro_period = env_cfg.macro_period
        self.actuation_limit = env_cfg.actuation_limit
        self.obs_dim = self.envs[0].high_obs_dim
        self.n_allocations = self.n_users**self.n_segments
        self.alloc_table = allocation_table(self.n_users, self.n_segments)

        children = np.random.SeedSequence(seed).spawn(4)
        init_rng = np.random.default_rng(children[0])
        self.policy_rng = np.random.default_rng(children[1])
        self.update_rng = np.random.default_rng(children[2])
        self.env_seed_rng = np.random.default_rng(children[3])

        self.nonfinite_events = 0
        self.episodes_done = 0

        if method == "no_allocator":
            self.actor = CentralizedActor(
                self.obs_dim, self.n_segments, self.n_allocations, init_rng
            )
            self.head = GaussianHead(3 * self.n_segments)
            self.critic = Mlp(self.obs_dim, (256, 256), 1, init_rng)
            self.manager = None
            self.macro_critic = None
            self.actor_opt = Adam({**self.actor.params(), **self.head.params()}, lr=ppo.learning_rate)
            self.critic_opt = Adam(self.critic.params(), lr=ppo.learning_rate)
            self.manager_opt = None
            self.macro_critic_opt = None
        else:
            self.actor = Mlp(ReflectorEnv.LOW_OBS_DIM, (256, 256), 3, init_rng, out_scale=0.01)
            self.head = GaussianHead(3)
            self.critic = Mlp(self.obs_dim, (256, 256), 1, init_rng)
            self.manager = ManagerNet(self.n_users, self.n_segments, init_rng)
            self.macro_critic = Mlp(self.obs_dim, (128, 128), 1, init_rng)
            self.actor_opt = Adam({**self.actor.params(), **self.head.params()}, lr=ppo.learning_rate)
            self.critic_opt = Adam(self.critic.params(), lr=ppo.learning_rate)
            self.manager_opt = Adam(self.manager.params(), lr=ppo.learning_rate)
            self.macro_critic_opt = Adam(self.macro_critic.params(), lr=ppo.learning_rate)

    # -- policy snapshots -----------------------------------------------------
    def nets(self) -> dict[str, dict[str, Tensor]]:
        nets = {"actor": self.actor.params(), "head": self.head.params(),
                "critic": self.critic.params()}
        if self.manager is not None:
            nets["manager"] = self.manager.params()
            nets["macro_critic"] = self.macro_critic.params()
        return nets

    def optimizers(self) -> dict[str, Adam]:
        opts = {"actor": self.actor_opt, "critic": self.critic_opt}
        if self.manager_opt is not None:
            opts["manager"] = self.manager_opt
            opts["macro_critic"] = self.macro_critic_opt
        return opts

    def low_action_means(self, env: ReflectorEnv, state) -> np.ndarray:
        """(n_segments, 3) mean displacements of the current policy."""
        if self.method == "no_allocator":
            mean, _ = self.actor(env.observe_high(state)[None, :])
            return mean.data[0].reshape(self.n_segments, 3)
        obs = np.stack([
            env.observe_low(state, l + 1) for l in range(self.n_segments)
        ])
        return self.actor(obs).data

    def deterministic_low_actions(self, env: ReflectorEnv, state) -> np.ndarray:
        """Mean displacement per segment, clipped to the actuation limit."""
        return np.clip(
            self.low_action_means(env, state), -self.actuation_limit, self.actuation_limit
        )

    def sample_allocation(self, env: ReflectorEnv, state, rng: np.random.Generator) -> np.ndarray:
        """Stochastic allocation of the current policy (prior gate off)."""
        if self.method == "random":
            return self.alloc_table[int(rng.integers(self.n_allocations))]
        obs_high = env.observe_high(state)
        if self.method == "no_allocator":
            _, logits = self.actor(obs_high[None, :])
            idx = categorical_sample(logits.data[0], rng)
        else:
            compat = env.compat_matrix(state)
            idx, _ = select_allocation(obs_high, self.manager, compat, 0.0, rng)
        return self.alloc_table[idx]

    def deterministic_allocation(self, env: ReflectorEnv, state) -> np.ndarray:
        """Argmax allocation (prior gate is zero after training)."""
        obs_high = env.observe_high(state)
        if self.method == "random":
            return state.allocation
        if self.method == "no_allocator":
            _, logits = self.actor(obs_high[None, :])
            idx = int(np.argmax(logits.data[0]))
        else:
            tokens = tokens_from_global_obs(obs_high, self.n_users, self.n_segments)
            idx = int(np.argmax(self.manager(tokens).data[0]))
        return self.alloc_table[idx]

    # -- training -----------------------------------------------------------
    def train(self, log_every: int = 0) -> list[CurveRow]:
        """Run the configured number of episodes; returns the training curve."""
        curve: list[CurveRow] = []
        total = self.ppo.total_episodes
        while self.episodes_done < total:
            alpha = self.prior.alpha(self.episodes_done) if self.method == "allocator" else 0.0
            rows, batch = self._collect(alpha)
            curve.extend(rows)
            try:
                self._update(batch)
            except NonFinite:
                self.nonfinite_events += 1
            self.episodes_done += self.n_envs
            if log_every and (self.episodes_done // self.n_envs) % log_every == 0:
                recent = np.mean([r.mean_reward for r in curve[-self.n_envs :]])
                print(f"  episodes {self.episodes_done:>5}/{total}  "
                      f"reward {recent:8.3f}  alpha {alpha:.3f}")
        return curve

    def _collect(self, alpha: float) -> tuple[list[CurveRow], RolloutBatch]:
        n_envs, seg, users = self.n_envs, self.n_segments, self.n_users
        horizon, period = self.episode_length, self.macro_period
        dim = self.obs_dim
        central = self.method == "no_allocator"

        reset_seeds = self.env_seed_rng.integers(0, 2**63 - 1, size=n_envs)
        states = [env.reset(int(s)) for env, s in zip(self.envs, reset_seeds)]

        high = np.zeros((n_envs, horizon, dim))
        rewards = np.zeros((n_envs, horizon))
        rssi_sum = np.zeros(n_envs)
        if central:
            c_actions = np.zeros((n_envs, horizon, 3 * seg))
            c_logp = np.zeros((n_envs, horizon))
            c_alloc = np.full((n_envs, horizon), -1, dtype=int)
        else:
            low_obs = np.zeros((n_envs, horizon, seg, 9))
            low_actions = np.zeros((n_envs, horizon, seg, 3))
            low_logp = np.zeros((n_envs, horizon, seg))
        macro: list[list[dict]] = [[] for _ in range(n_envs)]

        for t in range(horizon):
            obs_h = np.stack([env.observe_high(st) for env, st in zip(self.envs, states)])
            high[:, t] = obs_h

            if central:
                means = np.empty((n_envs, 3 * seg))
                for e, env in enumerate(self.envs):
                    mean, logits = self.actor(obs_h[e][None, :])
                    means[e] = mean.data[0]
                    if t % period == 0:
                        idx = categorical_sample(logits.data[0], self.policy_rng)
                        z = logits.data[0] - logits.data[0].max()
                        lp = z[idx] - math.log(np.exp(z).sum())
                        env.set_allocation(states[e], self.alloc_table[idx])
                        c_alloc[e, t] = idx
                        c_logp[e, t] += lp
                samples = self.head.sample(means, self.policy_rng)
                c_actions[:, t] = samples
                c_logp[:, t] += _gaussian_log_prob_np(samples, means, self.head.log_std.data)
                acts = samples.reshape(n_envs, seg, 3)
            else:
                if t % period == 0:
                    for e, env in enumerate(self.envs):
                        if self.method == "random":
                            idx = int(self.policy_rng.integers(self.n_allocations))
                            env.set_allocation(states[e], self.alloc_table[idx])
                            continue
                        compat = env.compat_matrix(states[e])
                        idx, lp = select_allocation(
                            obs_h[e], self.manager, compat, alpha, self.policy_rng
                        )
                        env.set_allocation(states[e], self.alloc_table[idx])
                        offset = (
                            alpha * prior_scores(compat, self.alloc_table)
                            if alpha > 0.0
                            else np.zeros(self.n_allocations)
                        )
                        macro[e].append({
                            "t": t, "obs": obs_h[e], "idx": idx,
                            "logp": lp, "offset": offset,
                        })
                obs_l = np.stack([
                    np.stack([env.observe_low(st, l + 1) for l in range(seg)])
                    for env, st in zip(self.envs, states)
                ])
                low_obs[:, t] = obs_l
                means = self.actor(obs_l.reshape(n_envs * seg, 9)).data
                samples = self.head.sample(means, self.policy_rng)
                low_actions[:, t] = samples.reshape(n_envs, seg, 3)
                low_logp[:, t] = _gaussian_log_prob_np(
                    samples, means, self.head.log_std.data
                ).reshape(n_envs, seg)
                acts = low_actions[:, t]

            for e, env in enumerate(self.envs):
                states[e], r, rssi, _ = env.step(acts[e])
                rewards[e, t] = r
                rssi_sum[e] += float(rssi.mean())

        # values and advantages, one big critic pass per env
        rows: list[CurveRow] = []
        low_parts = {k: [] for k in ("obs", "act", "alloc", "logp", "gobs", "adv", "ret", "env")}
        mac_parts = {k: [] for k in ("obs", "idx", "logp", "off", "adv", "ret", "env")}
        for e in range(n_envs):
            values = self.critic(high[e]).data.reshape(-1)
            dones = np.zeros(horizon)
            dones[-1] = 1.0
            adv, ret = compute_gae(
                rewards[e], values, dones, 0.0, self.ppo.discount, self.ppo.gae_lambda
            )
            if central:
                low_parts["obs"].append(high[e])
                low_parts["act"].append(c_actions[e])
                low_parts["alloc"].append(c_alloc[e])
                low_parts["logp"].append(c_logp[e])
                low_parts["gobs"].append(high[e])
                low_parts["adv"].append(adv)
                low_parts["ret"].append(ret)
                low_parts["env"].append(np.full(horizon, e, dtype=int))
            else:
                for l in range(seg):
                    low_parts["obs"].append(low_obs[e, :, l])
                    low_parts["act"].append(low_actions[e, :, l])
                    low_parts["alloc"].append(np.full(horizon, -1, dtype=int))
                    low_parts["logp"].append(low_logp[e, :, l])
                    low_parts["gobs"].append(high[e])
                    low_parts["adv"].append(adv)
                    low_parts["ret"].append(ret)
                    low_parts["env"].append(np.full(horizon, e, dtype=int))
                if macro[e]:
                    m_obs = np.stack([m["obs"] for m in macro[e]])
                    m_values = self.macro_critic(m_obs).data.reshape(-1)
                    m_rewards = np.array([
                        rewards[e, m["t"] : m["t"] + period].sum() for m in macro[e]
                    ])
                    m_dones = np.zeros(len(macro[e]))
                    m_dones[-1] = 1.0
                    m_adv, m_ret = compute_gae(
                        m_rewards, m_values, m_dones, 0.0,
                        self.ppo.discount**period, self.ppo.gae_lambda,
                    )
                    mac_parts["obs"].append(m_obs)
                    mac_parts["idx"].append(np.array([m["idx"] for m in macro[e]], dtype=int))
                    mac_parts["logp"].append(np.array([m["logp"] for m in macro[e]]))
                    mac_parts["off"].append(np.stack([m["offset"] for m in macro[e]]))
                    mac_parts["adv"].append(m_adv)
                    mac_parts["ret"].append(m_ret)
                    mac_parts["env"].append(np.full(len(macro[e]), e, dtype=int))
            rows.append(CurveRow(
                episode=self.episodes_done + e,
                mean_reward=float(rewards[e].mean()),
                mean_rssi_dbm=float(rssi_sum[e] / horizon),
                alpha=alpha,
                method=self.method,
            ))

        batch = RolloutBatch(
            centralized=central,
            low_obs=np.concatenate(low_parts["obs"]),
            low_actions=np.concatenate(low_parts["act"]),
            low_alloc_actions=np.concatenate(low_parts["alloc"]),
            low_log_probs=np.concatenate(low_parts["logp"]),
            low_global_obs=np.concatenate(low_parts["gobs"]),
            low_advantages=np.concatenate(low_parts["adv"]),
            low_returns=np.concatenate(low_parts["ret"]),
            low_env_ids=np.concatenate(low_parts["env"]),
        )
        if mac_parts["obs"]:
            batch.macro_obs = np.concatenate(mac_parts["obs"])
            batch.macro_actions = np.concatenate(mac_parts["idx"])
            batch.macro_log_probs = np.concatenate(mac_parts["logp"])
            batch.macro_prior_offsets = np.concatenate(mac_parts["off"])
            batch.macro_advantages = np.concatenate(mac_parts["adv"])
            batch.macro_returns = np.concatenate(mac_parts["ret"])
            batch.macro_env_ids = np.concatenate(mac_parts["env"])
        return rows, batch

    def _update(self, batch: RolloutBatch) -> None:
        adv = normalize_advantages(batch.low_advantages)
        if batch.centralized:
            ppo_update_centralized(
                batch.low_obs, batch.low_actions, batch.low_alloc_actions,
                batch.low_log_probs, adv, batch.low_returns,
                self.actor, self.head, self.critic,
                self.actor_opt, self.critic_opt, self.ppo, self.update_rng,
            )
            return
        ppo_update_gaussian(
            batch.low_obs, batch.low_actions, batch.low_log_probs, adv,
            batch.low_returns, batch.low_global_obs,
            self.actor, self.head, self.critic,
            self.actor_opt, self.critic_opt, self.ppo, self.update_rng,
        )
        if self.method in ("allocator", "no_compat") and len(batch.macro_obs):
            tokens = tokens_from_global_obs(batch.macro_obs, self.n_users, self.n_segments)
            ppo_update_categorical(
                tokens, batch.macro_actions, batch.macro_log_probs,
                batch.macro_prior_offsets,
                normalize_advantages(batch.macro_advantages), batch.macro_returns,
                batch.macro_obs,
                self.manager, self.macro_critic,
                self.manager_opt, self.macro_critic_opt, self.ppo, self.update_rng,
            )
