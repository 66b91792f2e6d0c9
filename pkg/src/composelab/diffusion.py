"""Noise schedules, the denoising training objective, and guided samplers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import model as md
from .autodiff import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)


def make_schedule(T: int = 200, beta_start: float = 1e-4,
                  beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule."""
    if T <= 0:
        raise ValueError("T must be positive")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, "
                         f"got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas,
                         alpha_bars=np.cumprod(alphas))


@dataclass(frozen=True)
class SampleConfig:
    num_steps: int = 50
    guidance_scale: float = 6.0
    sampler: str = "ddim"
    seed: int = 0

    def __post_init__(self):
        if self.sampler not in ("ddpm", "ddim"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")
        if self.num_steps <= 0:
            raise ValueError("num_steps must be positive")


def q_sample(schedule: NoiseSchedule, x0: np.ndarray, t: int,
             eps: np.ndarray) -> np.ndarray:
    """Noise a clean sample forward to step ``t``."""
    if not 0 <= t < schedule.T:
        raise ValueError(f"t={t} outside [0, {schedule.T})")
    if eps.shape != x0.shape:
        raise ValueError("eps must match x0 shape")
    abar = schedule.alpha_bars[t]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def recover_eps(schedule: NoiseSchedule, z_t: np.ndarray, t: int,
                x0: np.ndarray) -> np.ndarray:
    """Invert q_sample for the noise term."""
    abar = schedule.alpha_bars[t]
    return (z_t - np.sqrt(abar) * x0) / np.sqrt(1.0 - abar)


def ddpm_loss(params: dict[str, Tensor], config: md.ModelConfig,
              schedule: NoiseSchedule, x0_batch: np.ndarray,
              cond_batch, t_batch: Sequence[int],
              eps_batch: np.ndarray,
              forward_fn: Callable = md.forward) -> Tensor:
    """Mean squared error between true and predicted noise over the batch.

    ``cond_batch`` may be a graph Tensor (embedding training) or an array.
    """
    t_batch = np.asarray(t_batch, dtype=np.int64)
    if not isinstance(cond_batch, Tensor):
        cond_batch = Tensor(np.asarray(cond_batch))
    if not (len(x0_batch) == cond_batch.shape[0] == len(t_batch) == len(eps_batch)):
        raise ValueError("batch lengths differ")
    z = np.stack([q_sample(schedule, x0_batch[i], int(t_batch[i]), eps_batch[i])
                  for i in range(len(x0_batch))])
    eps_pred, _ = forward_fn(params, config, Tensor(z), t_batch, cond_batch)
    err = ad.sub(eps_pred, Tensor(eps_batch))
    loss = ad.rmean(ad.mul(err, err))
    if np.isnan(loss.data):
        raise FloatingPointError("NaN in denoising loss")
    return loss


def cfg_eps(params: dict[str, Tensor], config: md.ModelConfig, z_t: Tensor,
            t, cond: Tensor, uncond: Tensor, w: float):
    """Classifier-free-guided noise prediction.

    Written as eps_c + (w-1)*(eps_c - eps_u) so w=1 returns the conditional
    prediction bit-exactly; w=0 short-circuits to the unconditional one.
    """
    if w == 0.0:
        eps_u, _ = md.forward(params, config, z_t, t, uncond)
        return eps_u
    eps_c, _ = md.forward(params, config, z_t, t, cond)
    if w == 1.0:
        return eps_c
    eps_u, _ = md.forward(params, config, z_t, t, uncond)
    return ad.add(eps_c, ad.scale(ad.sub(eps_c, eps_u), w - 1.0))


def timestep_sequence(T: int, num_steps: int) -> list[int]:
    """Descending sampling timesteps, evenly spread over the schedule."""
    if num_steps > T:
        raise ValueError(f"num_steps {num_steps} exceeds schedule length {T}")
    ts = np.unique(np.round(np.linspace(0, T - 1, num_steps)).astype(int))
    return [int(t) for t in ts[::-1]]


def denoise_step(schedule: NoiseSchedule, z: np.ndarray, eps: np.ndarray,
                 t: int, t_prev: int | None, eta: float,
                 noise: np.ndarray | None) -> np.ndarray:
    """One reverse step t -> t_prev (DDIM when eta=0, ancestral when eta=1)."""
    abar_t = schedule.alpha_bars[t]
    abar_prev = schedule.alpha_bars[t_prev] if t_prev is not None else 1.0
    x0 = (z - np.sqrt(1.0 - abar_t) * eps) / np.sqrt(abar_t)
    x0 = np.clip(x0, -1.0, 1.0)
    if t_prev is None:
        return x0
    sigma = eta * np.sqrt((1.0 - abar_prev) / (1.0 - abar_t)) \
        * np.sqrt(1.0 - abar_t / abar_prev)
    z_prev = np.sqrt(abar_prev) * x0 \
        + np.sqrt(max(1.0 - abar_prev - sigma ** 2, 0.0)) * eps
    if sigma > 0:
        if noise is None:
            raise ValueError("ancestral step needs noise")
        z_prev = z_prev + sigma * noise
    return z_prev


def sample_batch(params: dict[str, Tensor], config: md.ModelConfig,
                 schedule: NoiseSchedule, conds: np.ndarray,
                 uncond: np.ndarray, sample_config: SampleConfig,
                 seeds: Sequence[int], record: bool = False):
    """Sample one image per conditioning row, deterministically per seed.

    Each sample draws its initial latent (and any ancestral noise) from its
    own generator, so results are identical no matter how prompts are
    chunked into batches. Returns (images in [-1, 1], traces or None); the
    trace per sample is an AttentionStack with maps recorded at every step
    of the conditional pass.
    """
    b = len(conds)
    if len(seeds) != b:
        raise ValueError("one seed per conditioning row required")
    gens = [np.random.Generator(np.random.PCG64(int(s))) for s in seeds]
    shape = (config.image_size, config.image_size, config.channels)
    z = np.stack([g.standard_normal(shape) for g in gens])
    ts = timestep_sequence(schedule.T, sample_config.num_steps)
    eta = 1.0 if sample_config.sampler == "ddpm" else 0.0
    w = sample_config.guidance_scale
    traces = [md.AttentionStack() for _ in range(b)] if record else None

    cond_t = Tensor(np.asarray(conds))
    uncond_t = Tensor(np.repeat(uncond[None], b, axis=0))
    with ad.no_grad():
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else None
            if record:
                eps_c, stack = md.forward(params, config, Tensor(z), t, cond_t,
                                          record=True)
                for rec in stack.records:
                    for s in range(b):
                        traces[s].add(rec.layer, t, Tensor(rec.map.data[s]))
                if w == 1.0:
                    eps = eps_c
                else:
                    eps_u, _ = md.forward(params, config, Tensor(z), t, uncond_t)
                    eps = ad.add(eps_c, ad.scale(ad.sub(eps_c, eps_u), w - 1.0)) \
                        if w != 0.0 else eps_u
            else:
                eps = cfg_eps(params, config, Tensor(z), t, cond_t, uncond_t, w)
            noise = None
            if eta > 0 and t_prev is not None:
                noise = np.stack([g.standard_normal(shape) for g in gens])
            z = denoise_step(schedule, z, eps.data, t, t_prev, eta, noise)
            if np.any(np.isnan(z)):
                raise FloatingPointError(f"NaN in sampling trajectory at t={t}")
    return z, traces


def sample(params: dict[str, Tensor], config: md.ModelConfig,
           schedule: NoiseSchedule, cond: np.ndarray, uncond: np.ndarray,
           sample_config: SampleConfig, record: bool = True):
    """Single-prompt convenience wrapper around sample_batch."""
    images, traces = sample_batch(params, config, schedule, cond[None],
                                  uncond, sample_config,
                                  [sample_config.seed], record=record)
    return images[0], (traces[0] if traces else None)


@dataclass
class TrainConfig:
    steps: int = 1500
    batch_size: int = 8
    lr: float = 2e-3
    warmup: int = 50
    min_lr_frac: float = 0.05
    p_uncond: float = 0.1
    seed: int = 0
    log_every: int = 50


def lr_at(step: int, config: TrainConfig) -> float:
    """Warmup then cosine decay down to min_lr_frac of the peak."""
    if step < config.warmup:
        return config.lr * (step + 1) / config.warmup
    span = max(config.steps - config.warmup, 1)
    frac = (step - config.warmup) / span
    lo = config.lr * config.min_lr_frac
    return lo + 0.5 * (config.lr - lo) * (1.0 + np.cos(np.pi * frac))


def train_base(dataset: Sequence, config: md.ModelConfig,
               schedule: NoiseSchedule, vocab, train_config: TrainConfig,
               params: dict[str, Tensor] | None = None,
               progress: Callable[[int, float], None] | None = None):
    """Train the denoiser (and its token embeddings) from scratch on scene
    items carrying an image in [0, 1] and a PromptSpec.

    Timesteps are uniform per sample; the prompt is dropped to the null
    token sequence with probability p_uncond so guided sampling works
    later. Returns (params, per-step log records).
    """
    from . import scenes as sc

    if not dataset:
        raise ValueError("empty dataset")
    if params is None:
        params = md.init_model(config, seed=train_config.seed)
    table = params["text_embed.table"]
    null_ids = sc.null_prompt(vocab)
    gen = np.random.Generator(np.random.PCG64(train_config.seed + 0x5EED))
    state = ad.AdamState()
    log: list[dict] = []
    n = len(dataset)
    for step in range(train_config.steps):
        idx = gen.integers(0, n, size=train_config.batch_size)
        x0 = np.stack([sc.to_model_space(dataset[i].image) for i in idx])
        drop = gen.random(train_config.batch_size) < train_config.p_uncond
        cond = ad.stack([
            sc.encode_tokens(null_ids if drop[j] else dataset[i].prompt.token_ids,
                             table, config.text_dim)
            for j, i in enumerate(idx)])
        t_batch = gen.integers(0, schedule.T, size=train_config.batch_size)
        eps = gen.standard_normal(x0.shape)
        loss = ddpm_loss(params, config, schedule, x0, cond, t_batch, eps)
        loss.backward()
        lr = lr_at(step, train_config)
        ad.adam_step(params, state, lr=lr)
        ad.zero_grad(params.values())
        if np.isnan(loss.data):
            raise FloatingPointError(f"training diverged at step {step}")
        if step % train_config.log_every == 0 or step == train_config.steps - 1:
            log.append({"step": step, "loss": float(loss.data), "lr": lr})
            if progress is not None:
                progress(step, float(loss.data))
    return params, log
