"""Policy and value networks, distribution heads, Adam, and checkpoints.

Everything is float64 numpy on the autodiff tape, small enough to verify
against central finite differences.  Initialization is orthogonal with
ReLU gain for hidden layers; final policy layers are scaled down.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .autodiff import Tensor, as_tensor, log_softmax, softmax
from .errors import ConfigError, DimensionMismatch, ShapeMismatch

LOG_TWO_PI = math.log(2.0 * math.pi)


def orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    a = rng.normal(size=(rows, cols))
    u, _, vt = np.linalg.svd(a, full_matrices=False)
    w = u if u.shape == (rows, cols) else vt
    return gain * w


class Mlp:
    """Fully connected ReLU network; ``out_scale`` shrinks the last layer."""

    def __init__(
        self,
        in_dim: int,
        hidden: tuple[int, ...],
        out_dim: int,
        rng: np.random.Generator,
        out_scale: float = 1.0,
    ):
        self.in_dim = in_dim
        self.out_dim = out_dim
        sizes = [in_dim, *hidden, out_dim]
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
            last = i == len(sizes) - 2
            gain = out_scale if last else math.sqrt(2.0)
            self.weights.append(Tensor(orthogonal(rng, a, b, gain), requires_grad=True))
            self.biases.append(Tensor(np.zeros(b), requires_grad=True))

    def forward(self, x) -> Tensor:
        h = as_tensor(x)
        if h.data.shape[-1] != self.in_dim:
            raise ShapeMismatch(f"expected input dim {self.in_dim}, got {h.data.shape}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < len(self.weights) - 1:
                h = h.relu()
        return h

    __call__ = forward

    def params(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out


MANAGER_TOKEN_DIM = 9  # [pos_a(3), pos_b(3), user flag, segment flag, index]


def build_manager_tokens(users: np.ndarray, refs: np.ndarray, focals: np.ndarray) -> np.ndarray:
    """(K+L, 9) entity tokens: one per user, one per segment.

    User tokens carry the observed position; segment tokens carry the
    segment reference and its focal point.  Class flags and a normalized
    index channel keep entities distinguishable.
    """
    users = np.atleast_2d(users)
    refs = np.atleast_2d(refs)
    focals = np.atleast_2d(focals)
    n_users, n_segments = len(users), len(refs)
    tokens = np.zeros((n_users + n_segments, MANAGER_TOKEN_DIM))
    for k in range(n_users):
        tokens[k, 0:3] = users[k]
        tokens[k, 6] = 1.0
        tokens[k, 8] = (k + 1) / n_users
    for l in range(n_segments):
        tokens[n_users + l, 0:3] = refs[l]
        tokens[n_users + l, 3:6] = focals[l]
        tokens[n_users + l, 7] = 1.0
        tokens[n_users + l, 8] = (l + 1) / n_segments
    return tokens


def tokens_from_global_obs(obs: np.ndarray, n_users: int, n_segments: int) -> np.ndarray:
    """Tokens built from a flat global observation [users, refs, focals]."""
    obs = np.asarray(obs, dtype=float)
    expected = 3 * n_users + 6 * n_segments
    if obs.shape[-1] != expected:
        raise ShapeMismatch(f"global obs must have dim {expected}, got {obs.shape}")
    if obs.ndim == 1:
        obs = obs[None, :]
    batch = []
    for row in obs:
        users = row[: 3 * n_users].reshape(n_users, 3)
        refs = row[3 * n_users : 3 * (n_users + n_segments)].reshape(n_segments, 3)
        focals = row[3 * (n_users + n_segments) :].reshape(n_segments, 3)
        batch.append(build_manager_tokens(users, refs, focals))
    return np.stack(batch)


class ManagerNet:
    """Single-head self-attention over entity tokens -> allocation logits.

    Tokens are linearly embedded, mixed by scaled dot-product attention,
    mean-pooled, and mapped through a 128-unit ReLU layer to one logit per
    allocation (cardinality n_users ** n_segments).
    """

    def __init__(
        self,
        n_users: int,
        n_segments: int,
        rng: np.random.Generator,
        embed_dim: int = 32,
        fc_dim: int = 128,
        out_scale: float = 0.01,
    ):
        self.n_users = n_users
        self.n_segments = n_segments
        self.n_actions = n_users**n_segments
        if self.n_actions > 65536:
            raise ConfigError(f"allocation space {self.n_actions} is too large")
        self.embed_dim = embed_dim
        g = math.sqrt(2.0)
        self.w_embed = Tensor(orthogonal(rng, MANAGER_TOKEN_DIM, embed_dim, g), requires_grad=True)
        self.b_embed = Tensor(np.zeros(embed_dim), requires_grad=True)
        self.w_q = Tensor(orthogonal(rng, embed_dim, embed_dim, 1.0), requires_grad=True)
        self.w_k = Tensor(orthogonal(rng, embed_dim, embed_dim, 1.0), requires_grad=True)
        self.w_v = Tensor(orthogonal(rng, embed_dim, embed_dim, 1.0), requires_grad=True)
        self.w_fc = Tensor(orthogonal(rng, embed_dim, fc_dim, g), requires_grad=True)
        self.b_fc = Tensor(np.zeros(fc_dim), requires_grad=True)
        self.w_out = Tensor(orthogonal(rng, fc_dim, self.n_actions, out_scale), requires_grad=True)
        self.b_out = Tensor(np.zeros(self.n_actions), requires_grad=True)

    def forward(self, tokens) -> Tensor:
        """tokens: (T, 9) or (B, T, 9) observations -> logits (B, n_actions)."""
        arr = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens, dtype=float)
        if arr.ndim == 2:
            arr = arr[None, :, :]
        if arr.shape[-1] != MANAGER_TOKEN_DIM:
            raise ShapeMismatch(f"tokens must have feature dim {MANAGER_TOKEN_DIM}")
        t = as_tensor(arr)
        x = t @ self.w_embed + self.b_embed                      # (B, T, E)
        q = x @ self.w_q
        k = x @ self.w_k
        v = x @ self.w_v
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.embed_dim))
        attn = softmax(scores, axis=-1)
        pooled = (attn @ v).mean(axis=1)                         # (B, E)
        h = (pooled @ self.w_fc + self.b_fc).relu()
        return h @ self.w_out + self.b_out

    __call__ = forward

    def params(self) -> dict[str, Tensor]:
        return {
            "w_embed": self.w_embed, "b_embed": self.b_embed,
            "w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v,
            "w_fc": self.w_fc, "b_fc": self.b_fc,
            "w_out": self.w_out, "b_out": self.b_out,
        }


# -- distribution heads ---------------------------------------------------------


def categorical_sample(logits: np.ndarray, rng: np.random.Generator) -> int:
    z = logits - logits.max()
    p = np.exp(z)
    p /= p.sum()
    return int(np.searchsorted(np.cumsum(p), rng.random()))


def categorical_log_probs(logits: Tensor) -> Tensor:
    return log_softmax(logits, axis=-1)


def categorical_entropy(logits: Tensor) -> Tensor:
    logp = log_softmax(logits, axis=-1)
    p = softmax(logits, axis=-1)
    return -(p * logp).sum(axis=-1)


class GaussianHead:
    """Diagonal Gaussian with a state-independent learned log-std."""

    def __init__(self, dim: int, init_log_std: float = math.log(0.3)):
        self.dim = dim
        self.log_std = Tensor(np.full(dim, init_log_std), requires_grad=True)

    def sample(self, mean: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Unclipped draw; callers clip before acting, after log-prob."""
        std = np.exp(self.log_std.data)
        return mean + std * rng.normal(size=np.shape(mean))

    def log_prob(self, mean: Tensor, actions: np.ndarray) -> Tensor:
        """(B,) log density of *actions* (the unclipped samples)."""
        mean = as_tensor(mean)
        if mean.data.shape[-1] != self.dim:
            raise ShapeMismatch(f"mean dim {mean.data.shape} vs head dim {self.dim}")
        inv_std = (-self.log_std).exp()
        z = (as_tensor(actions) - mean) * inv_std
        return (
            (z**2.0) * -0.5 - self.log_std - 0.5 * LOG_TWO_PI
        ).sum(axis=-1)

    def entropy(self) -> Tensor:
        return (self.log_std + 0.5 * (LOG_TWO_PI + 1.0)).sum()

    def params(self) -> dict[str, Tensor]:
        return {"log_std": self.log_std}


# -- optimizer ----------------------------------------------------------------


class Adam:
    """Canonical Adam with bias correction."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 2.0e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        """Apply one update from the accumulated ``grad`` fields, then clear them."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        step_scale = self.lr / bc1
        inv_sqrt_bc2 = 1.0 / math.sqrt(bc2)
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeMismatch(f"grad shape {g.shape} vs param {p.data.shape}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            denom = np.sqrt(v)
            denom *= inv_sqrt_bc2
            denom += self.eps
            np.divide(m, denom, out=denom)
            denom *= step_scale
            p.data -= denom
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
            "eps": self.eps, "t": self.t,
            "m": {k: v.tolist() for k, v in self.m.items()},
            "v": {k: v.tolist() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.lr = state["lr"]
        self.beta1 = state["beta1"]
        self.beta2 = state["beta2"]
        self.eps = state["eps"]
        self.t = state["t"]
        for k in self.m:
            self.m[k] = np.asarray(state["m"][k], dtype=float).reshape(self.m[k].shape)
            self.v[k] = np.asarray(state["v"][k], dtype=float).reshape(self.v[k].shape)


# -- checkpoints -----------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    nets: dict[str, dict[str, Tensor]],
    optimizers: dict[str, Adam] | None = None,
    rng_state: dict | None = None,
    meta: dict | None = None,
) -> None:
    """JSON checkpoint: shapes, values, optimizer state, RNG state."""
    blob = {
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "nets": {
            net_name: {
                p_name: {"shape": list(p.data.shape), "values": p.data.ravel().tolist()}
                for p_name, p in params.items()
            }
            for net_name, params in nets.items()
        },
        "optimizers": {k: o.state_dict() for k, o in (optimizers or {}).items()},
        "rng_state": rng_state,
    }
    Path(path).write_text(json.dumps(blob))


def load_checkpoint(
    path: str | Path,
    nets: dict[str, dict[str, Tensor]],
    optimizers: dict[str, Adam] | None = None,
) -> dict:
    """Restore parameters (and optimizer state) in place; returns the blob."""
    blob = json.loads(Path(path).read_text())
    if blob.get("version") != CHECKPOINT_VERSION:
        raise DimensionMismatch(f"unsupported checkpoint version {blob.get('version')}")
    for net_name, params in nets.items():
        stored = blob["nets"].get(net_name)
        if stored is None:
            raise DimensionMismatch(f"checkpoint is missing net {net_name!r}")
        for p_name, p in params.items():
            entry = stored.get(p_name)
            if entry is None or tuple(entry["shape"]) != p.data.shape:
                raise DimensionMismatch(
                    f"{net_name}.{p_name}: checkpoint shape "
                    f"{None if entry is None else entry['shape']} vs {p.data.shape}"
                )
            p.data = np.asarray(entry["values"], dtype=float).reshape(p.data.shape)
    for opt_name, opt in (optimizers or {}).items():
        if opt_name in blob.get("optimizers", {}):
            opt.load_state_dict(blob["optimizers"][opt_name])
    return blob
