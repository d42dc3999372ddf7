"""Latent-conditioned trajectory decoder.

A causal self-attention decoder over interleaved (observation, action) tokens
with cross-attention to a set of latent plan tokens, and a fixed-variance
Gaussian action head. Token layout: [start, o_1, a_1, ..., o_T, a_T]; action
means are read at the o_t positions, so the mean for a_t conditions on
o_{t-K:t} and a_{t-K:t-1} plus the latent plan.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import numgrad as ng
from .numgrad import Tensor
from .regen import LabeledTrajectory

LOG_2PI = math.log(2.0 * math.pi)


class ModelError(ValueError):
    """Configuration/shape mismatch in the decoder."""


@dataclass
class ModelConfig:
    n_joints: int
    hidden: int = 64
    heads: int = 8
    blocks: int = 3
    z_tokens: int = 16
    z_dim: int = 64
    context_pairs: int = 10      # K
    max_steps: int = 160         # positional table covers 2*max_steps+1 tokens
    cross_attn_per_block: bool = True
    ff_mult: int = 4
    activation: str = "relu"     # feed-forward nonlinearity: relu | gelu | tanh

    @property
    def obs_dim(self) -> int:
        return 3 + 3 * self.n_joints

    @property
    def act_dim(self) -> int:
        return 3 * self.n_joints

    @property
    def token_window(self) -> int:
        return 2 * self.context_pairs + 1

    def validate(self):
        if self.hidden % self.heads:
            raise ModelError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.z_dim != self.hidden:
            raise ModelError("latent token dim must match hidden size")


@dataclass
class Normalization:
    """Per-dimension z-scoring of observation and action vectors."""

    mu_obs: np.ndarray
    sd_obs: np.ndarray
    mu_act: np.ndarray
    sd_act: np.ndarray

    @classmethod
    def identity(cls, obs_dim: int, act_dim: int) -> "Normalization":
        return cls(np.zeros(obs_dim), np.ones(obs_dim), np.zeros(act_dim), np.ones(act_dim))

    @classmethod
    def from_dataset(cls, trajectories) -> "Normalization":
        obs = np.concatenate([t.obs for t in trajectories], axis=0)
        act = np.concatenate([t.act for t in trajectories], axis=0)
        floor = 1e-6
        return cls(obs.mean(0), np.maximum(obs.std(0), floor),
                   act.mean(0), np.maximum(act.std(0), floor))

    def norm_obs(self, obs):
        return (obs - self.mu_obs) / self.sd_obs

    def norm_act(self, act):
        return (act - self.mu_act) / self.sd_act

    def denorm_act(self, act):
        return act * self.sd_act + self.mu_act


def _init_tensors(cfg: ModelConfig, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    d, do, da = cfg.hidden, cfg.obs_dim, cfg.act_dim

    def w(*shape, std=0.02):
        return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    t = {
        "obs_embed.w": w(do, d, std=0.08), "obs_embed.b": zeros(d),
        "act_embed.w": w(da, d, std=0.08), "act_embed.b": zeros(d),
        "start_token": w(d),
        "pos_embed": w(2 * cfg.max_steps + 1, d),
        "head.w": zeros(d, da), "head.b": zeros(da),
        "final_ln.g": ones(d), "final_ln.b": zeros(d),
    }
    out_std = 0.02 / math.sqrt(2.0 * cfg.blocks)
    for i in range(cfg.blocks):
        p = f"block{i}."
        t[p + "ln1.g"] = ones(d)
        t[p + "ln1.b"] = zeros(d)
        t[p + "attn.wqkv"] = w(d, 3 * d)
        t[p + "attn.bqkv"] = zeros(3 * d)
        t[p + "attn.wo"] = w(d, d, std=out_std)
        t[p + "attn.bo"] = zeros(d)
        if cfg.cross_attn_per_block or i == 0:
            t[p + "ln2.g"] = ones(d)
            t[p + "ln2.b"] = zeros(d)
            t[p + "cross.wq"] = w(d, d)
            t[p + "cross.bq"] = zeros(d)
            t[p + "cross.wk"] = w(cfg.z_dim, d)
            t[p + "cross.bk"] = zeros(d)
            t[p + "cross.wv"] = w(cfg.z_dim, d)
            t[p + "cross.bv"] = zeros(d)
            t[p + "cross.wo"] = w(d, d, std=out_std)
            t[p + "cross.bo"] = zeros(d)
        t[p + "ln3.g"] = ones(d)
        t[p + "ln3.b"] = zeros(d)
        t[p + "ff.w1"] = w(d, cfg.ff_mult * d)
        t[p + "ff.b1"] = zeros(cfg.ff_mult * d)
        t[p + "ff.w2"] = w(cfg.ff_mult * d, d, std=out_std)
        t[p + "ff.b2"] = zeros(d)
    return t


class ModelParams:
    """Decoder parameters plus architecture config and normalization stats."""

    def __init__(self, cfg: ModelConfig, tensors: dict, norm: Normalization,
                 meta: dict | None = None):
        cfg.validate()
        self.cfg = cfg
        self.tensors = tensors
        self.norm = norm
        self.meta = dict(meta or {})

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0,
             norm: Normalization | None = None) -> "ModelParams":
        norm = norm or Normalization.identity(cfg.obs_dim, cfg.act_dim)
        return cls(cfg, _init_tensors(cfg, seed), norm)

    def parameters(self) -> list:
        return [self.tensors[k] for k in sorted(self.tensors)]

    def set_requires_grad(self, flag: bool):
        for t in self.tensors.values():
            t.requires_grad = flag

    def save(self, path) -> None:
        path = Path(path)
        ng.save_arrays(path, {k: v.data for k, v in self.tensors.items()})
        sidecar = {
            "schema": 1,
            "config": asdict(self.cfg),
            "norm": {k: v.tolist() for k, v in asdict(self.norm).items()},
            "meta": self.meta,
        }
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=1))

    @classmethod
    def load(cls, path) -> "ModelParams":
        path = Path(path)
        sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        cfg = ModelConfig(**sidecar["config"])
        norm = Normalization(**{k: np.asarray(v) for k, v in sidecar["norm"].items()})
        arrays = ng.load_arrays(path)
        tensors = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        return cls(cfg, tensors, norm, meta=sidecar.get("meta"))


@dataclass
class ContextWindow:
    """Rolling window of the most recent (obs, act) pairs, at most K."""

    K: int
    pairs: list = field(default_factory=list)   # (obs, act) raw units
    next_step: int = 1                          # 1-based index of the next action

    def append(self, obs: np.ndarray, act: np.ndarray):
        self.pairs.append((np.asarray(obs, dtype=np.float64),
                           np.asarray(act, dtype=np.float64)))
        if len(self.pairs) > self.K:
            self.pairs.pop(0)
        self.next_step += 1

    def __len__(self):
        return len(self.pairs)


def _lift_z(z) -> Tensor:
    if isinstance(z, Tensor):
        return z
    return Tensor(np.asarray(z, dtype=np.float64))


def _heads_split(x: Tensor, heads: int) -> Tensor:
    # (..., L, d) -> (..., H, L, d/H)
    L, d = x.shape[-2], x.shape[-1]
    return x.reshape(*x.shape[:-2], L, heads, d // heads).swapaxes(-3, -2)


def _heads_merge(x: Tensor) -> Tensor:
    # (..., H, L, dh) -> (..., L, d)
    y = x.swapaxes(-3, -2)
    return y.reshape(*y.shape[:-2], y.shape[-2] * y.shape[-1])


def _self_attn_sublayer(t: dict, prefix: str, x: Tensor, cfg: ModelConfig,
                        window: int) -> Tensor:
    h = ng.layer_norm(x, t[prefix + "ln1.g"], t[prefix + "ln1.b"])
    qkv = h @ t[prefix + "attn.wqkv"] + t[prefix + "attn.bqkv"]
    d = cfg.hidden
    q = _heads_split(qkv[..., :, 0:d], cfg.heads)
    k = _heads_split(qkv[..., :, d:2 * d], cfg.heads)
    v = _heads_split(qkv[..., :, 2 * d:3 * d], cfg.heads)
    att = _heads_merge(ng.attention(q, k, v, window=window))
    return x + att @ t[prefix + "attn.wo"] + t[prefix + "attn.bo"]


def _cross_ff_sublayers(t: dict, prefix: str, x: Tensor, zk, zv,
                        cfg: ModelConfig) -> Tensor:
    if zk is not None:
        h = ng.layer_norm(x, t[prefix + "ln2.g"], t[prefix + "ln2.b"])
        q = _heads_split(h @ t[prefix + "cross.wq"] + t[prefix + "cross.bq"], cfg.heads)
        cross = _heads_merge(ng.attention(q, zk, zv, window=None))
        x = x + cross @ t[prefix + "cross.wo"] + t[prefix + "cross.bo"]
    h = ng.layer_norm(x, t[prefix + "ln3.g"], t[prefix + "ln3.b"])
    pre = h @ t[prefix + "ff.w1"] + t[prefix + "ff.b1"]
    ff = getattr(pre, cfg.activation)()
    return x + ff @ t[prefix + "ff.w2"] + t[prefix + "ff.b2"]


def _z_kv(params: ModelParams, z: Tensor, prefix: str):
    t = params.tensors
    zk = _heads_split(z @ t[prefix + "cross.wk"] + t[prefix + "cross.bk"], params.cfg.heads)
    zv = _heads_split(z @ t[prefix + "cross.wv"] + t[prefix + "cross.bv"], params.cfg.heads)
    return zk, zv


def _decoder_from_block0_cross(params: ModelParams, x: Tensor, z) -> Tensor:
    """Continue the forward pass from just after block 0's self-attention."""
    cfg = params.cfg
    t = params.tensors
    z = _lift_z(z)
    zk, zv = _z_kv(params, z, "block0.")
    x = _cross_ff_sublayers(t, "block0.", x, zk, zv, cfg)
    for i in range(1, cfg.blocks):
        prefix = f"block{i}."
        if cfg.cross_attn_per_block:
            zk, zv = _z_kv(params, z, prefix)
        else:
            zk = zv = None
        x = _self_attn_sublayer(t, prefix, x, cfg, cfg.token_window)
        x = _cross_ff_sublayers(t, prefix, x, zk, zv, cfg)
    return ng.layer_norm(x, t["final_ln.g"], t["final_ln.b"])


def _decoder_forward(params: ModelParams, tokens: Tensor, positions: np.ndarray,
                     z) -> Tensor:
    """tokens (..., L, d-embedded) -> hidden states (..., L, d)."""
    cfg = params.cfg
    t = params.tensors
    x = tokens + t["pos_embed"][np.clip(positions, 0, 2 * cfg.max_steps)]
    x = _self_attn_sublayer(t, "block0.", x, cfg, cfg.token_window)
    return _decoder_from_block0_cross(params, x, z)


def _interleave(params: ModelParams, obs_n: Tensor, act_n: Tensor) -> tuple:
    """Build [start, o_1, a_1, ...] token embeddings and their position ids.

    obs_n/act_n: (B, S, *) normalized. Returns tokens (B, 2S+1, d), positions.
    """
    t = params.tensors
    B, S = obs_n.shape[0], obs_n.shape[1]
    d = params.cfg.hidden
    eo = obs_n @ t["obs_embed.w"] + t["obs_embed.b"]
    ea = act_n @ t["act_embed.w"] + t["act_embed.b"]
    start = (t["start_token"] * np.ones((B, 1, 1))).reshape(B, 1, d)
    pairs = ng.concat([eo.reshape(B, S, 1, d), ea.reshape(B, S, 1, d)], axis=2)
    tokens = ng.concat([start, pairs.reshape(B, 2 * S, d)], axis=1)
    positions = np.arange(2 * S + 1)
    return tokens, positions


def sequence_action_means(params: ModelParams, obs: np.ndarray, act: np.ndarray,
                          z) -> Tensor:
    """Teacher-forced normalized action means at every step: (B, S, act_dim)."""
    norm = params.norm
    obs_n = Tensor(norm.norm_obs(obs))
    act_n = Tensor(norm.norm_act(act))
    if obs_n.ndim == 2:
        obs_n = obs_n.reshape(1, *obs_n.shape)
        act_n = act_n.reshape(1, *act_n.shape)
    tokens, positions = _interleave(params, obs_n, act_n)
    hidden = _decoder_forward(params, tokens, positions, z)
    at_obs = hidden[:, 1::2, :]  # hidden states at o_t positions
    return at_obs @ params.tensors["head.w"] + params.tensors["head.b"]


def _reduce_gaussian_ll(params: ModelParams, means: Tensor, target: np.ndarray,
                        step_mask: np.ndarray | None) -> Tensor:
    r = means - Tensor(target)
    r2 = r * r
    if step_mask is not None:
        r2 = r2 * Tensor(step_mask[..., None])
        n_terms = float(step_mask.sum()) * params.cfg.act_dim
    else:
        n_terms = float(np.prod(target.shape[:-1])) * params.cfg.act_dim
    return r2.sum() * -0.5 - 0.5 * n_terms * LOG_2PI


def gaussian_log_likelihood_batch(params: ModelParams, obs: np.ndarray, act: np.ndarray,
                                  z, step_mask: np.ndarray | None = None) -> Tensor:
    """Sum over batch of per-trajectory action log-likelihoods (normalized units)."""
    means = sequence_action_means(params, obs, act, z)
    target = params.norm.norm_act(act)
    if target.ndim == 2:
        target = target[None]
    return _reduce_gaussian_ll(params, means, target, step_mask)


@dataclass
class FrozenPrefix:
    """Latent-free part of the teacher-forced pass, reusable across local steps.

    Valid only while the decoder parameters are frozen: holds plain arrays for
    everything up to (and including) block 0's self-attention.
    """

    x: np.ndarray              # (B, L, hidden) residual stream entering block 0 cross-attn
    target: np.ndarray         # (B, S, act_dim), normalized actions
    step_mask: np.ndarray | None


def training_prefix(params: ModelParams, obs: np.ndarray, act: np.ndarray,
                    step_mask: np.ndarray | None = None) -> FrozenPrefix:
    """Precompute the z-independent forward prefix (no gradients recorded)."""
    norm = params.norm
    obs_n = Tensor(norm.norm_obs(obs))
    act_n = Tensor(norm.norm_act(act))
    if obs_n.ndim == 2:
        obs_n = obs_n.reshape(1, *obs_n.shape)
        act_n = act_n.reshape(1, *act_n.shape)
    cfg = params.cfg
    t = params.tensors
    flags = [v.requires_grad for v in t.values()]
    for v in t.values():
        v.requires_grad = False
    try:
        tokens, positions = _interleave(params, obs_n, act_n)
        x = tokens + t["pos_embed"][np.clip(positions, 0, 2 * cfg.max_steps)]
        x = _self_attn_sublayer(t, "block0.", x, cfg, cfg.token_window)
    finally:
        for v, f in zip(t.values(), flags):
            v.requires_grad = f
    target = norm.norm_act(act)
    if target.ndim == 2:
        target = target[None]
    return FrozenPrefix(x.data, target, step_mask)


def likelihood_from_prefix(params: ModelParams, prefix: FrozenPrefix, z) -> Tensor:
    """Action log-likelihood continuing from a FrozenPrefix (theta frozen)."""
    hidden = _decoder_from_block0_cross(params, Tensor(prefix.x), z)
    at_obs = hidden[:, 1::2, :]
    means = at_obs @ params.tensors["head.w"] + params.tensors["head.b"]
    return _reduce_gaussian_ll(params, means, prefix.target, prefix.step_mask)


def log_likelihood(params: ModelParams, trajectory: LabeledTrajectory, z) -> Tensor:
    """log p(a_1:T | o, z) = sum_t log N(a_t | mean_t, I) in normalized units."""
    if len(trajectory) == 0:
        raise ModelError("empty trajectory")
    return gaussian_log_likelihood_batch(params, trajectory.obs, trajectory.act, z)


def _window_tokens(params: ModelParams, pairs: list, o_t: np.ndarray, next_step: int):
    """Embedded tokens for decode_step: optional start, K pairs, current obs."""
    cfg = params.cfg
    t = params.tensors
    norm = params.norm
    d = cfg.hidden
    toks = []
    positions = []
    first_step = next_step - len(pairs)
    if first_step == 1:  # full history present: include the learnable start token
        toks.append(t["start_token"].reshape(1, d))
        positions.append(0)
    for i, (o, a) in enumerate(pairs):
        step = first_step + i
        toks.append((Tensor(norm.norm_obs(o)) @ t["obs_embed.w"] + t["obs_embed.b"]).reshape(1, d))
        toks.append((Tensor(norm.norm_act(a)) @ t["act_embed.w"] + t["act_embed.b"]).reshape(1, d))
        positions.extend([2 * step - 1, 2 * step])
    toks.append((Tensor(norm.norm_obs(o_t)) @ t["obs_embed.w"] + t["obs_embed.b"]).reshape(1, d))
    positions.append(2 * next_step - 1)
    tokens = ng.concat(toks, axis=0) if len(toks) > 1 else toks[0]
    return tokens.reshape(1, len(positions), d), np.asarray(positions)


def decode_step(params: ModelParams, context: ContextWindow, o_t: np.ndarray, z,
                return_tensor: bool = False):
    """Deterministic action mean for the next step, in raw action units."""
    cfg = params.cfg
    if len(context.pairs) > cfg.context_pairs:
        raise ModelError(f"context holds {len(context.pairs)} pairs, limit {cfg.context_pairs}")
    o_t = np.asarray(o_t, dtype=np.float64)
    if o_t.shape != (cfg.obs_dim,):
        raise ModelError(f"observation shape {o_t.shape}, expected ({cfg.obs_dim},)")
    tokens, positions = _window_tokens(params, context.pairs, o_t, context.next_step)
    hidden = _decoder_forward(params, tokens, positions, z)
    mean_n = hidden[:, -1, :] @ params.tensors["head.w"] + params.tensors["head.b"]
    if return_tensor:
        return mean_n
    return params.norm.denorm_act(mean_n.data[0])


def sample_action(params: ModelParams, context: ContextWindow, o_t: np.ndarray, z,
                  mode: str = "deterministic",
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Mean action, or mean plus unit-variance noise (normalized units) if stochastic."""
    mean = decode_step(params, context, o_t, z)
    if mode == "deterministic":
        return mean
    if mode != "stochastic":
        raise ValueError(f"unknown mode {mode!r}")
    if rng is None:
        raise ValueError("stochastic mode needs an rng")
    noise = rng.standard_normal(params.cfg.act_dim) * params.norm.sd_act
    return mean + noise


def segment_log_likelihood(params: ModelParams, history_pairs: list,
                           seg_obs: np.ndarray, seg_act: np.ndarray,
                           z, first_seg_step: int) -> Tensor:
    """log p(segment | last-K history, z) for replanning updates.

    history_pairs: list of (obs, act) raw pairs directly preceding the segment
    (at most K). Only the segment's steps contribute likelihood terms.
    """
    cfg = params.cfg
    norm = params.norm
    t = params.tensors
    d = cfg.hidden
    history_pairs = history_pairs[-cfg.context_pairs:]
    n_hist = len(history_pairs)
    S = len(seg_obs)
    if S == 0:
        raise ModelError("empty segment")
    obs_all = np.concatenate([np.array([p[0] for p in history_pairs]).reshape(n_hist, -1),
                              seg_obs], axis=0) if n_hist else np.asarray(seg_obs)
    act_all = np.concatenate([np.array([p[1] for p in history_pairs]).reshape(n_hist, -1),
                              seg_act], axis=0) if n_hist else np.asarray(seg_act)
    first_step = first_seg_step - n_hist
    eo = Tensor(norm.norm_obs(obs_all)) @ t["obs_embed.w"] + t["obs_embed.b"]
    ea = Tensor(norm.norm_act(act_all)) @ t["act_embed.w"] + t["act_embed.b"]
    L = len(obs_all)
    pairs = ng.concat([eo.reshape(L, 1, d), ea.reshape(L, 1, d)], axis=1).reshape(1, 2 * L, d)
    positions = np.empty(2 * L, dtype=int)
    steps = np.arange(first_step, first_step + L)
    positions[0::2] = 2 * steps - 1
    positions[1::2] = 2 * steps
    if first_step == 1:
        start = t["start_token"].reshape(1, 1, d)
        pairs = ng.concat([start, pairs], axis=1)
        positions = np.concatenate([[0], positions])
    hidden = _decoder_forward(params, pairs, positions, z)
    obs_pos_start = (1 if first_step == 1 else 0) + 2 * n_hist
    at_obs = hidden[:, obs_pos_start::2, :]
    means = at_obs @ t["head.w"] + t["head.b"]
    target = norm.norm_act(np.asarray(seg_act))[None]
    r = means - Tensor(target)
    return (r * r).sum() * -0.5 - 0.5 * S * cfg.act_dim * LOG_2PI
