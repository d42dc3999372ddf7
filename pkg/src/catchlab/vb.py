"""Classical variational Bayes training of the latent-plan decoder.

Per-trajectory diagonal-Gaussian posteriors (local parameters) are optimized
by gradient ascent on the ELBO with the decoder frozen, alternating with
AdamW updates of the shared decoder parameters on the batch-mean ELBO.
"""

from __future__ import annotations

import csv
import time
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as model_mod
from . import numgrad as ng
from .numgrad import AdamW, Tape, Tensor


class TrainingError(RuntimeError):
    """Non-finite objective or failed checkpoint write."""


@dataclass
class LatentPosterior:
    """Diagonal Gaussian over the latent plan: mu and log sigma, any shape."""

    mu: np.ndarray
    log_sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_sigma = np.asarray(self.log_sigma, dtype=np.float64)
        if self.mu.shape != self.log_sigma.shape:
            raise ValueError("mu and log_sigma shapes differ")

    @classmethod
    def standard(cls, shape) -> "LatentPosterior":
        return cls(np.zeros(shape), np.zeros(shape))

    @classmethod
    def gaussian_init(cls, shape, std: float, rng: np.random.Generator) -> "LatentPosterior":
        return cls(rng.normal(0.0, std, size=shape), np.zeros(shape))

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    def copy(self) -> "LatentPosterior":
        return LatentPosterior(self.mu.copy(), self.log_sigma.copy())


def kl_diag_gaussians(a: LatentPosterior, b: LatentPosterior | None = None) -> float:
    """KL(a || b) for diagonal Gaussians; b=None means the standard normal."""
    if b is None:
        b = LatentPosterior.standard(a.mu.shape)
    var_a = np.exp(2.0 * a.log_sigma)
    var_b = np.exp(2.0 * b.log_sigma)
    return float(np.sum(b.log_sigma - a.log_sigma
                        + (var_a + (a.mu - b.mu) ** 2) / (2.0 * var_b) - 0.5))


def _kl_tensor(mu: Tensor, log_sigma: Tensor,
               prior_mu: np.ndarray | None = None,
               prior_log_sigma: np.ndarray | None = None) -> Tensor:
    """Differentiable KL(q || prior); default prior is the standard normal."""
    if prior_mu is None:
        var = (log_sigma * 2.0).exp()
        return (log_sigma * -1.0 + (var + mu * mu) * 0.5 - 0.5).sum()
    pls = np.asarray(prior_log_sigma)
    inv_2var_b = 0.5 * np.exp(-2.0 * pls)
    var_a = (log_sigma * 2.0).exp()
    dmu = mu - prior_mu
    return (log_sigma * -1.0 + pls + (var_a + dmu * dmu) * inv_2var_b - 0.5).sum()


def reparam_sample(post: LatentPosterior, rng: np.random.Generator) -> np.ndarray:
    """z = mu + sigma * eps with eps ~ N(0, I)."""
    return post.mu + post.sigma * rng.standard_normal(post.mu.shape)


def _reparam_tensor(mu: Tensor, log_sigma: Tensor, eps: np.ndarray) -> Tensor:
    return mu + log_sigma.exp() * eps


def _log_likelihood(params, trajectory, z):
    """Dispatch: ModelParams uses the decoder; toy decoders expose .log_likelihood."""
    if hasattr(params, "log_likelihood"):
        return params.log_likelihood(trajectory, z)
    return model_mod.log_likelihood(params, trajectory, z)


def elbo(params, trajectory, post: LatentPosterior, rng: np.random.Generator,
         n_samples: int = 1) -> float:
    """Single-sample (by default) Monte-Carlo ELBO estimate."""
    kl = kl_diag_gaussians(post)
    total = 0.0
    for _ in range(n_samples):
        z = reparam_sample(post, rng)
        total += float(_log_likelihood(params, trajectory, Tensor(z)).data)
    return total / n_samples - kl


def optimize_local(params, trajectory, init: LatentPosterior, steps: int, lr: float,
                   rng: np.random.Generator, optimizer: str = "adamw",
                   n_samples: int = 1) -> tuple[LatentPosterior, list]:
    """Ascend the ELBO in the local parameters with the decoder frozen.

    Returns the optimized posterior and the per-step ELBO trace. n_samples > 1
    averages reparameterized draws per step (variance reduction for tests;
    training uses the single-sample default).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    mu = Tensor(init.mu.copy(), requires_grad=True)
    ls = Tensor(init.log_sigma.copy(), requires_grad=True)
    frozen = isinstance(params, model_mod.ModelParams)
    if frozen:
        params.set_requires_grad(False)
    opt = AdamW([mu, ls], lr=lr, weight_decay=0.0) if optimizer == "adamw" else None
    trace = []
    try:
        for step in range(steps):
            with Tape() as tape:
                ll = None
                for _ in range(n_samples):
                    z = _reparam_tensor(mu, ls, rng.standard_normal(mu.shape))
                    term = _log_likelihood(params, trajectory, z)
                    ll = term if ll is None else ll + term
                kl = _kl_tensor(mu, ls)
                objective = ll * (1.0 / n_samples) - kl
                if not np.isfinite(objective.data):
                    raise TrainingError(
                        f"non-finite ELBO at local step {step} "
                        f"(trajectory {getattr(trajectory, 'meta', {}).get('source', '?')})")
                trace.append(float(objective.data))
                tape.backward(objective * -1.0)
            if opt is not None:
                opt.step()
                opt.zero_grad()
            else:
                mu.data -= lr * mu.grad
                ls.data -= lr * ls.grad
                mu.grad = None
                ls.grad = None
    finally:
        if frozen:
            params.set_requires_grad(True)
    return LatentPosterior(mu.data, ls.data), trace


@dataclass
class TrainConfig:
    epochs: int = 50
    t_local: int = 16
    local_lr: float = 1e-3
    global_lr: float = 2e-4
    batch_size: int = 12
    seed: int = 0
    weight_decay: float = 0.01
    reinit_local: bool = False     # literal per-batch random re-initialization
    init_std: float = 0.0          # posterior mean init std (0 -> zeros)
    z_tokens: int = 16
    z_dim: int = 64
    hidden: int = 64
    heads: int = 8
    blocks: int = 3
    context_pairs: int = 10
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.t_local < 1:
            raise ValueError("t_local must be >= 1")
        if self.local_lr <= 0 or self.global_lr <= 0:
            raise ValueError("learning rates must be positive")


def train_config_from_entries(entries: dict) -> TrainConfig:
    known = {f for f in TrainConfig.__dataclass_fields__}
    kwargs = {k.replace("-", "_"): v for k, v in entries.items() if k.replace("-", "_") in known}
    return TrainConfig(**kwargs)


@dataclass
class EpochLog:
    epoch: int
    elbo: float
    kl: float
    nll: float
    wall_s: float


def _traj_seed(traj, base_seed: int) -> int:
    """Content-derived seed: identical trajectories share their noise stream."""
    h = zlib.crc32(traj.obs.tobytes())
    h = zlib.crc32(traj.act.tobytes(), h)
    return (h ^ (base_seed * 0x9E3779B1)) & 0xFFFFFFFF


def _epoch_rng(*entropy) -> np.random.Generator:
    """Stateless per-epoch stream so interrupted runs resume bitwise."""
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _pad_batch(batch: list):
    """Stack trajectories, zero-padding to the longest; returns obs, act, mask."""
    S = max(len(t) for t in batch)
    B = len(batch)
    obs = np.zeros((B, S, batch[0].obs.shape[1]))
    act = np.zeros((B, S, batch[0].act.shape[1]))
    mask = np.zeros((B, S))
    for i, t in enumerate(batch):
        obs[i, :len(t)] = t.obs
        act[i, :len(t)] = t.act
        mask[i, :len(t)] = 1.0
    return obs, act, mask


class _LocalBank:
    """Warm-started per-trajectory posterior arrays."""

    def __init__(self, n: int, shape, init_std: float, rng: np.random.Generator):
        self.mu = rng.normal(0.0, init_std, size=(n, *shape)) if init_std > 0 \
            else np.zeros((n, *shape))
        self.log_sigma = np.zeros((n, *shape))

    def posterior(self, i: int) -> LatentPosterior:
        return LatentPosterior(self.mu[i].copy(), self.log_sigma[i].copy())


def _local_phase(params, prefix, mu0, ls0, steps, lr, eps_draws):
    """Batched local ascent; eps_draws has shape (steps, B, *z)."""
    mu = Tensor(mu0, requires_grad=True)
    ls = Tensor(ls0, requires_grad=True)
    opt = AdamW([mu, ls], lr=lr, weight_decay=0.0)
    last = (np.nan, np.nan)
    for s in range(steps):
        with Tape() as tape:
            z = _reparam_tensor(mu, ls, eps_draws[s])
            ll = model_mod.likelihood_from_prefix(params, prefix, z)
            kl = _kl_tensor(mu, ls)
            objective = ll - kl
            if not np.isfinite(objective.data):
                raise TrainingError(f"non-finite ELBO in local phase (step {s})")
            last = (float(ll.data), float(kl.data))
            tape.backward(objective * -1.0)
        opt.step()
        opt.zero_grad()
    return mu.data, ls.data, last


def train(dataset: list, config: TrainConfig, out_dir,
          bc_mode: bool = False, progress=None, resume: bool = False):
    """Alternating local/global optimization; returns (params, posteriors, logs).

    bc_mode trains the identical architecture with z fixed at zero and no KL
    term (the latent-free ablation). With resume=True, training continues from
    the state file in out_dir and reproduces the uninterrupted run bitwise.
    """
    if not dataset:
        raise TrainingError("empty dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    suffix = "_bc" if bc_mode else ""
    log_path = out_dir / f"train{suffix}.csv"
    ckpt_path = out_dir / f"checkpoint{suffix}.ckpt"
    state_path = out_dir / f"train_state{suffix}.ckpt"

    n_joints = dataset[0].n_joints
    cfg = model_mod.ModelConfig(
        n_joints=n_joints, hidden=config.hidden, heads=config.heads,
        blocks=config.blocks, z_tokens=config.z_tokens, z_dim=config.z_dim,
        context_pairs=config.context_pairs,
        max_steps=max(max(len(t) for t in dataset) + 8, 160),
    )
    norm = model_mod.Normalization.from_dataset(dataset)
    N = len(dataset)
    z_shape = (cfg.z_tokens, cfg.z_dim)
    init_rng = _epoch_rng(config.seed, 0xB0B)
    bank = _LocalBank(N, z_shape, config.init_std, init_rng)
    traj_seeds = [_traj_seed(t, config.seed) for t in dataset]

    start_epoch = 0
    if resume and state_path.exists():
        params = model_mod.ModelParams.load(ckpt_path)
        opt = AdamW(params.parameters(), lr=config.global_lr,
                    weight_decay=config.weight_decay)
        state = ng.load_arrays(state_path)
        start_epoch = int(state.pop("epoch")[0])
        bank.mu[...] = state.pop("bank_mu")
        bank.log_sigma[...] = state.pop("bank_log_sigma")
        opt.load_state_arrays(state)
    else:
        params = model_mod.ModelParams.init(cfg, seed=config.seed, norm=norm)
        params.meta["variant"] = "bc" if bc_mode else "lap"
        opt = AdamW(params.parameters(), lr=config.global_lr,
                    weight_decay=config.weight_decay)

    logs: list[EpochLog] = []
    mode = "a" if start_epoch else "w"
    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if not start_epoch:
            writer.writerow(["epoch", "elbo", "kl", "nll", "wall_s"])
        for epoch in range(start_epoch, config.epochs):
            t0 = time.perf_counter()
            order = _epoch_rng(config.seed, 0x5EED, epoch).permutation(N)
            eps_rngs = {i: _epoch_rng(traj_seeds[i], epoch) for i in order} \
                if not bc_mode else {}
            sums = np.zeros(3)  # ll, kl, batch count
            for start in range(0, N, config.batch_size):
                idx = order[start:start + config.batch_size]
                batch = [dataset[i] for i in idx]
                obs, act, mask = _pad_batch(batch)
                B = len(batch)
                if bc_mode:
                    z = np.zeros((B, *z_shape))
                    ll_mean = _global_step(params, opt, obs, act, mask, z, B)
                    kl_mean = 0.0
                else:
                    if config.reinit_local:
                        mu0 = init_rng.normal(0.0, max(config.init_std, 0.01),
                                              size=(B, *z_shape))
                        ls0 = np.zeros((B, *z_shape))
                    else:
                        mu0 = bank.mu[idx].copy()
                        ls0 = bank.log_sigma[idx].copy()
                    eps = np.stack([
                        np.stack([eps_rngs[i].standard_normal(z_shape) for i in idx])
                        for _ in range(config.t_local)])
                    params.set_requires_grad(False)
                    try:
                        prefix = model_mod.training_prefix(params, obs, act, mask)
                        mu1, ls1, _ = _local_phase(params, prefix, mu0, ls0,
                                                   config.t_local, config.local_lr, eps)
                    finally:
                        params.set_requires_grad(True)
                    bank.mu[idx] = mu1
                    bank.log_sigma[idx] = ls1
                    eps_g = np.stack([eps_rngs[i].standard_normal(z_shape) for i in idx])
                    z = mu1 + np.exp(ls1) * eps_g
                    ll_mean = _global_step(params, opt, obs, act, mask, z, B)
                    kl_mean = sum(
                        kl_diag_gaussians(LatentPosterior(mu1[j], ls1[j]))
                        for j in range(B)) / B
                sums += (ll_mean, kl_mean, 1.0)
            ll_e, kl_e = sums[0] / sums[2], sums[1] / sums[2]
            log = EpochLog(epoch, ll_e - kl_e, kl_e, -ll_e, time.perf_counter() - t0)
            logs.append(log)
            writer.writerow([log.epoch, repr(log.elbo), repr(log.kl), repr(log.nll),
                             f"{log.wall_s:.3f}"])
            fh.flush()
            if (epoch + 1) % config.checkpoint_every == 0 or epoch == config.epochs - 1:
                try:
                    params.save(ckpt_path)
                    state = {"epoch": np.array([float(epoch + 1)]),
                             "bank_mu": bank.mu, "bank_log_sigma": bank.log_sigma}
                    state.update(opt.state_arrays())
                    ng.save_arrays(state_path, state)
                except OSError as e:
                    raise TrainingError(f"checkpoint write failed: {e}") from e
            if progress is not None:
                progress(log)
    posteriors = LatentPosterior(bank.mu, bank.log_sigma)
    ng.save_arrays(out_dir / f"posteriors{suffix}.ckpt",
                   {"mu": posteriors.mu, "log_sigma": posteriors.log_sigma})
    return params, posteriors, logs


def _global_step(params, opt, obs, act, mask, z, B) -> float:
    """One AdamW step on theta maximizing the batch-mean log-likelihood."""
    with Tape() as tape:
        ll = model_mod.gaussian_log_likelihood_batch(params, obs, act, Tensor(z), mask)
        if not np.isfinite(ll.data):
            raise TrainingError("non-finite loss in global step")
        tape.backward(ll * (-1.0 / B))
    opt.step()
    opt.zero_grad()
    return float(ll.data) / B
