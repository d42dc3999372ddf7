"""Test-time planning as latent-space inference.

An initial posterior is fit from the first observation; as execution
proceeds, the posterior is re-optimized every `delta` steps against the newly
observed segment, with the previous posterior acting as the prior (an
incremental Bayesian update).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from .model import ContextWindow, ModelParams
from .numgrad import AdamW, Tape, Tensor
from .vb import LatentPosterior, _kl_tensor, _reparam_tensor, optimize_local


class PlanningError(RuntimeError):
    """Non-finite planning objective."""


@dataclass
class ReplanConfig:
    delta: int = 10          # steps between posterior updates
    t_local: int = 16        # ascent steps for the initial plan
    t_replan: int = 1        # ascent steps per incremental update
    lr: float = 1e-3
    optimizer: str = "adamw"
    sigma_inflation: float = 0.0   # added to sigma after each update (off by default)

    def __post_init__(self):
        if self.delta < 1:
            raise ValueError("delta must be >= 1")


@dataclass
class PlannerState:
    posterior: LatentPosterior
    z: np.ndarray
    config: ReplanConfig
    buffer: list = field(default_factory=list)      # executed (obs, act) pairs
    last_replan: int = 0                            # pair count at last update
    rng: np.random.Generator | None = None
    log: list = field(default_factory=list)

    @property
    def t(self) -> int:
        return len(self.buffer)


def _segment_loglik(params, history, seg_obs, seg_act, z, first_step):
    if hasattr(params, "segment_log_likelihood"):
        return params.segment_log_likelihood(history, seg_obs, seg_act, z, first_step)
    return model_mod.segment_log_likelihood(params, history, seg_obs, seg_act, z, first_step)


def _ascend(params, history, seg_obs, seg_act, first_step, post: LatentPosterior,
            prior: LatentPosterior | None, steps: int, lr: float, optimizer: str,
            rng: np.random.Generator) -> tuple[LatentPosterior, list]:
    """Gradient ascent on E_q[log p(segment | history, z)] - KL(q || prior).

    prior=None means the standard normal. An empty segment contributes no
    likelihood term (used by initial planning before any action exists).
    """
    mu = Tensor(post.mu.copy(), requires_grad=True)
    ls = Tensor(post.log_sigma.copy(), requires_grad=True)
    frozen = isinstance(params, ModelParams)
    if frozen:
        params.set_requires_grad(False)
    opt = AdamW([mu, ls], lr=lr, weight_decay=0.0) if optimizer == "adamw" else None
    trace = []
    try:
        for _ in range(steps):
            eps = rng.standard_normal(mu.shape)
            with Tape() as tape:
                if prior is None:
                    kl = _kl_tensor(mu, ls)
                else:
                    kl = _kl_tensor(mu, ls, prior.mu, prior.log_sigma)
                if len(seg_obs):
                    z = _reparam_tensor(mu, ls, eps)
                    objective = _segment_loglik(params, history, seg_obs, seg_act,
                                                z, first_step) - kl
                else:
                    objective = kl * -1.0
                if not np.isfinite(objective.data):
                    raise PlanningError("non-finite planning objective")
                trace.append(float(objective.data))
                tape.backward(objective * -1.0)
            if opt is not None:
                opt.step()
                opt.zero_grad()
            else:
                mu.data -= lr * mu.grad if mu.grad is not None else 0.0
                ls.data -= lr * ls.grad if ls.grad is not None else 0.0
                mu.grad = ls.grad = None
    finally:
        if frozen:
            params.set_requires_grad(True)
    return LatentPosterior(mu.data, ls.data), trace


def initial_plan(params, o_1: np.ndarray, rng: np.random.Generator,
                 config: ReplanConfig | None = None) -> PlannerState:
    """Fit (mu0, sigma0) from the first observation, then sample the plan.

    With the action-only likelihood no action has been observed yet, so the
    objective reduces to -KL against the standard-normal prior; the posterior
    lands on the prior and z is a prior draw (consistent with z ~ p(z | o_1)).
    """
    config = config or ReplanConfig()
    if hasattr(params, "cfg"):
        shape = (params.cfg.z_tokens, params.cfg.z_dim)
    else:
        shape = params.z_shape
    post = LatentPosterior.standard(shape)
    post, trace = _ascend(params, [], np.empty((0,)), np.empty((0,)), 1,
                          post, None, config.t_local, config.lr, config.optimizer, rng)
    z = post.mu + post.sigma * rng.standard_normal(shape)
    state = PlannerState(posterior=post, z=z, config=config, rng=rng)
    state.log.append({"event": "initial_plan", "objective_trace": trace})
    return state


def replan_update(state: PlannerState, params, new_segment: list) -> PlannerState:
    """One incremental Bayesian update from newly observed (obs, act) pairs.

    Warm-starts at the previous posterior, which also serves as the KL prior.
    """
    if not new_segment:
        raise ValueError("empty segment")
    cfg = state.config
    t0 = time.perf_counter()
    prior = state.posterior.copy()
    first_step = state.last_replan + 1
    k = params.cfg.context_pairs if hasattr(params, "cfg") else 0
    history = state.buffer[max(0, state.last_replan - k):state.last_replan]
    seg_obs = np.asarray([p[0] for p in new_segment])
    seg_act = np.asarray([p[1] for p in new_segment])
    post, trace = _ascend(params, history, seg_obs, seg_act, first_step,
                          state.posterior, prior, cfg.t_replan, cfg.lr,
                          cfg.optimizer, state.rng)
    if cfg.sigma_inflation:
        post = LatentPosterior(post.mu, np.log(post.sigma + cfg.sigma_inflation))
    state.posterior = post
    state.z = post.mu + post.sigma * state.rng.standard_normal(post.mu.shape)
    state.last_replan = len(state.buffer)
    state.log.append({
        "event": "replan",
        "step": state.last_replan,
        "objective_trace": trace,
        "latency_ms": (time.perf_counter() - t0) * 1e3,
    })
    return state


def act(state: PlannerState, params, o_t: np.ndarray,
        mode: str = "deterministic") -> np.ndarray:
    """Generate the next action; replans first whenever t mod delta == 0."""
    t = state.t
    if t > 0 and t % state.config.delta == 0 and t > state.last_replan:
        replan_update(state, params, state.buffer[state.last_replan:])
    k = params.cfg.context_pairs if hasattr(params, "cfg") else len(state.buffer)
    ctx = ContextWindow(K=k, pairs=list(state.buffer[-k:]) if k else [],
                        next_step=t + 1)
    action = model_mod.sample_action(params, ctx, o_t, state.z, mode=mode, rng=state.rng)
    state.buffer.append((np.asarray(o_t, dtype=np.float64), action))
    return action


def finish_episode(state: PlannerState, params) -> None:
    """Process a trailing partial segment (shorter than delta) at episode end."""
    if state.t > state.last_replan:
        replan_update(state, params, state.buffer[state.last_replan:])


@dataclass
class ConsistencyReport:
    mu_distance: float
    cosine: float
    elbo_sequential: float
    elbo_batch: float

    @property
    def elbo_gap(self) -> float:
        scale = max(abs(self.elbo_batch), 1e-12)
        return abs(self.elbo_sequential - self.elbo_batch) / scale


def consistency_check(params, trajectory, delta: int, t_replan: int = 4,
                      t_local: int = 16, lr: float = 1e-3, seed: int = 0,
                      batch_schedule=None) -> ConsistencyReport:
    """Sequential replanning over a full trajectory vs batch inference.

    Sequential: initial plan from o_1, then an update every `delta` steps.
    Batch: optimize_local on the whole trajectory from the prior. Both start
    from standard-normal posteriors with separate seeded streams.
    """
    rng_seq = np.random.default_rng(np.random.SeedSequence((seed, 1)))
    rng_bat = np.random.default_rng(np.random.SeedSequence((seed, 2)))
    if hasattr(params, "cfg"):
        shape = (params.cfg.z_tokens, params.cfg.z_dim)
    else:
        shape = params.z_shape
    obs, acts = trajectory.obs, trajectory.act
    S = len(obs)

    state = PlannerState(posterior=LatentPosterior.standard(shape),
                         z=np.zeros(shape),
                         config=ReplanConfig(delta=delta, t_replan=t_replan, lr=lr),
                         rng=rng_seq)
    # replay the executed trajectory through the update schedule
    full = [(obs[t], acts[t]) for t in range(S)]
    for t in range(S):
        state.buffer.append(full[t])
        k = len(state.buffer)
        if k % delta == 0:
            replan_update(state, params, state.buffer[state.last_replan:])
    if state.t > state.last_replan:
        replan_update(state, params, state.buffer[state.last_replan:])
    mu_seq = state.posterior.mu

    post_b = LatentPosterior.standard(shape)
    if batch_schedule is None:
        batch_schedule = [(t_local, lr)]
    for steps, blr in batch_schedule:
        post_b, _ = optimize_local(params, trajectory, post_b, steps=steps, lr=blr,
                                   rng=rng_bat)
    mu_bat = post_b.mu

    from .vb import elbo
    e_seq = elbo(params, trajectory, state.posterior, np.random.default_rng(seed + 7))
    e_bat = elbo(params, trajectory, post_b, np.random.default_rng(seed + 7))
    a, b = mu_seq.ravel(), mu_bat.ravel()
    denom = max(np.linalg.norm(a) * np.linalg.norm(b), 1e-12)
    return ConsistencyReport(
        mu_distance=float(np.linalg.norm(a - b)),
        cosine=float(a @ b / denom),
        elbo_sequential=e_seq,
        elbo_batch=e_bat,
    )
