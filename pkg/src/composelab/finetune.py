"""Compositional finetuning of the cross-attention key projections, and the
test-time-adaptation variant that refines latents with frozen weights.

Each finetune step samples a concept pair and a timestep per batch element,
obtains that element's noisy latent (by rolling the model's own guided
trajectory down to t, or by forward-noising a frozen-model sample), runs one
recording forward, and descends the weighted mask objectives through the
selected parameter group only.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import diffusion as df
from . import model as md
from . import objectives as ob
from . import scenes as sc
from .autodiff import Tensor


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 200
    batch_size: int = 4
    lr_schedule: str = "fixed"      # fixed | cosine
    lr: float = 5e-6                # fixed schedule (single-pair runs)
    peak_lr: float = 1e-6           # cosine schedule (large-scale runs)
    warmup: int = 300
    weights: ob.LossWeights = field(default_factory=ob.LossWeights)
    selector: str = "to_k"
    t_range: tuple[float, float] = (0.1, 0.9)  # fraction of sampler steps
    latent_source: str = "trajectory"          # trajectory | q_sample
    x0_pool: int = 4                # frozen-model samples cached per pair
    norm_batch: int = 4
    kernel_size: int = 3
    sigma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if self.lr_schedule not in ("fixed", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.lr_schedule == "cosine" and self.warmup >= self.steps:
            raise ValueError("cosine schedule needs warmup < steps")
        if self.latent_source not in ("trajectory", "q_sample"):
            raise ValueError(f"unknown latent source {self.latent_source!r}")
        if not (0.0 <= self.t_range[0] < self.t_range[1] <= 1.0):
            raise ValueError("t_range must satisfy 0 <= lo < hi <= 1")

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "fixed":
            return self.lr
        if step < self.warmup:
            return self.peak_lr * (step + 1) / self.warmup
        frac = (step - self.warmup) / max(self.steps - self.warmup, 1)
        return 0.5 * self.peak_lr * (1.0 + np.cos(np.pi * frac))


@dataclass(frozen=True)
class TTAConfig:
    refine_steps: int = 25
    step_size: float = 0.2
    weights: ob.LossWeights = field(default_factory=lambda: ob.LossWeights(lambda_norm=0.0))
    kernel_size: int = 3
    sigma: float = 0.5

    def __post_init__(self):
        if self.refine_steps < 0 or self.step_size < 0:
            raise ValueError("refine_steps and step_size must be nonnegative")


@dataclass(frozen=True)
class PairSchedule:
    """Concept tuples iterated during finetuning; seen concepts only."""

    pairs: tuple[tuple[str, ...], ...]
    policy: str = "uniform"  # uniform | cycle

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("empty pair schedule")
        if self.policy not in ("uniform", "cycle"):
            raise ValueError(f"unknown policy {self.policy!r}")
        for p in self.pairs:
            if not 2 <= len(p) <= 3:
                raise ValueError("pairs must have 2 or 3 concepts")

    def pick(self, gen: np.random.Generator, step: int) -> tuple[str, ...]:
        if self.policy == "cycle":
            return self.pairs[step % len(self.pairs)]
        return self.pairs[int(gen.integers(0, len(self.pairs)))]


def make_pair_schedule(pairs, seen: list[str] | None = None,
                       policy: str = "uniform") -> PairSchedule:
    pairs = tuple(tuple(p) for p in pairs)
    if seen is not None:
        allowed = set(seen)
        for p in pairs:
            bad = [c for c in p if c not in allowed]
            if bad:
                raise ValueError(f"pair {p} uses held-out concepts {bad}")
    return PairSchedule(pairs, policy)


def _spawn_gen(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed,) + key)))


# ---------------------------------------------------------------------------
# norm data

def generate_norm_data(params: dict[str, Tensor], config: md.ModelConfig,
                       schedule: df.NoiseSchedule, vocab: sc.ConceptVocab,
                       single_concepts: list[str], n: int, seed: int,
                       sample_config: df.SampleConfig
                       ) -> list[tuple[np.ndarray, sc.PromptSpec]]:
    """Sample n single-concept (image, prompt) pairs from the frozen model."""
    if n <= 0:
        raise ValueError("n must be positive")
    table = params["text_embed.table"].data
    uncond = sc.encode_uncond_np(vocab, table)
    gen = _spawn_gen(seed, 0xA0)
    prompts = [sc.make_prompt(vocab, [single_concepts[int(gen.integers(0, len(single_concepts)))]])
               for _ in range(n)]
    conds = np.stack([sc.encode_prompt_np(p, table) for p in prompts])
    seeds = [int(s) for s in gen.integers(0, 2 ** 31, size=n)]
    images, _ = df.sample_batch(params, config, schedule, conds, uncond,
                                sample_config, seeds, record=False)
    return [(sc.to_unit(images[i]), prompts[i]) for i in range(n)]


# ---------------------------------------------------------------------------
# latent provenance

def _trajectory_latents(params, config, schedule, cond_np, uncond_np,
                        sample_config, step_indices, seed, step):
    """Roll the guided trajectory down to each element's own timestep.

    Gradients stay disabled; element b stops after step_indices[b] denoise
    steps so its latent sits at timestep seq[step_indices[b]].
    """
    ts = df.timestep_sequence(schedule.T, sample_config.num_steps)
    b = len(step_indices)
    gens = [_spawn_gen(seed, 0xB0, step, i) for i in range(b)]
    shape = (config.image_size, config.image_size, config.channels)
    z = np.stack([g.standard_normal(shape) for g in gens])
    eta = 1.0 if sample_config.sampler == "ddpm" else 0.0
    w = sample_config.guidance_scale
    cond_t = Tensor(cond_np)
    uncond_t = Tensor(np.repeat(uncond_np[None], b, axis=0)
                      if uncond_np.ndim == 2 else uncond_np)
    max_idx = int(max(step_indices))
    with ad.no_grad():
        for i in range(max_idx):
            t, t_prev = ts[i], ts[i + 1]
            eps = df.cfg_eps(params, config, Tensor(z), t, cond_t, uncond_t, w)
            noise = np.stack([g.standard_normal(shape) for g in gens]) if eta else None
            z_next = df.denoise_step(schedule, z, eps.data, t, t_prev, eta, noise)
            active = np.array([i < step_indices[j] for j in range(b)])
            z[active] = z_next[active]
    return z, [ts[i] for i in step_indices]


def attention_at_t(params: dict[str, Tensor], config: md.ModelConfig,
                   schedule: df.NoiseSchedule, vocab: sc.ConceptVocab,
                   prompt: sc.PromptSpec, t: int, seed: int,
                   sample_config: df.SampleConfig) -> ob.ConceptMasks:
    """Concept masks for one prompt at timestep t of the guided trajectory."""
    ts = df.timestep_sequence(schedule.T, sample_config.num_steps)
    if t not in ts:
        raise ValueError(f"t={t} is not on the sampler's timestep grid")
    table = params["text_embed.table"].data
    cond = sc.encode_prompt_np(prompt, table)[None]
    uncond = sc.encode_uncond_np(vocab, table)[None]
    z, t_list = _trajectory_latents(params, config, schedule, cond, uncond,
                                    sample_config, [ts.index(t)], seed, 0)
    _, stack = md.forward(params, config, Tensor(z), [t], Tensor(cond), record=True)
    return ob.aggregate_masks(stack, prompt.concept_indices, config.grid,
                              sample=0, prompt_id=prompt.text)


# ---------------------------------------------------------------------------
# the finetune loop

def compositional_finetune(params: dict[str, Tensor], config: md.ModelConfig,
                           schedule: df.NoiseSchedule, vocab: sc.ConceptVocab,
                           pairs: PairSchedule,
                           norm_pairs: list[tuple[np.ndarray, sc.PromptSpec]],
                           ft: FinetuneConfig,
                           sample_config: df.SampleConfig | None = None):
    """Separate-and-enhance finetuning of the selector-matched parameters.

    Only parameters matched by ``ft.selector`` are ever updated; everything
    else (including the token embeddings) stays bit-identical. Returns
    (params, log records). Mutates ``params`` in place.
    """
    if sample_config is None:
        sample_config = df.SampleConfig()
    selector = md.ParamSelector(ft.selector)
    trainable = md.select_params(params, selector)
    if ft.weights.lambda_norm > 0 and not norm_pairs:
        raise ValueError("norm weight is positive but no norm pairs supplied")

    table = params["text_embed.table"].data
    uncond_np = sc.encode_uncond_np(vocab, table)
    ts_seq = df.timestep_sequence(schedule.T, sample_config.num_steps)
    lo = int(np.floor(ft.t_range[0] * (len(ts_seq) - 1)))
    hi = int(np.ceil(ft.t_range[1] * (len(ts_seq) - 1)))
    gen = _spawn_gen(ft.seed, 0xC0)
    state = ad.AdamState()
    log: list[dict] = []

    # frozen-model reference samples, drawn once before any update
    x0_pool: dict[tuple[str, ...], np.ndarray] = {}
    if ft.latent_source == "q_sample":
        for pair in dict.fromkeys(pairs.pairs):
            prompt = sc.make_prompt(vocab, list(pair))
            conds = np.repeat(sc.encode_prompt_np(prompt, table)[None],
                              ft.x0_pool, axis=0)
            pool_gen = _spawn_gen(ft.seed, 0xD0, *sorted(vocab.token_id(c) for c in pair))
            seeds = [int(s) for s in pool_gen.integers(0, 2 ** 31, size=ft.x0_pool)]
            images, _ = df.sample_batch(params, config, schedule, conds,
                                        uncond_np, sample_config, seeds,
                                        record=False)
            x0_pool[pair] = images

    for step in range(ft.steps):
        pair = pairs.pick(gen, step)
        prompt = sc.make_prompt(vocab, list(pair))
        cond_np = np.repeat(sc.encode_prompt_np(prompt, table)[None],
                            ft.batch_size, axis=0)
        step_indices = [int(i) for i in gen.integers(lo, hi + 1, size=ft.batch_size)]

        if ft.latent_source == "trajectory":
            z, t_list = _trajectory_latents(params, config, schedule, cond_np,
                                            uncond_np, sample_config,
                                            step_indices, ft.seed, step)
        else:
            pool = x0_pool[pair]
            t_list = [ts_seq[i] for i in step_indices]
            z = np.empty((ft.batch_size,) + pool.shape[1:])
            for b in range(ft.batch_size):
                x0 = pool[int(gen.integers(0, len(pool)))]
                eps = gen.standard_normal(x0.shape)
                z[b] = df.q_sample(schedule, x0, t_list[b], eps)

        _, stack = md.forward(params, config, Tensor(z), t_list,
                              Tensor(cond_np), record=True)
        sep_terms, en_terms = [], []
        for b in range(ft.batch_size):
            masks = ob.aggregate_masks(stack, prompt.concept_indices,
                                       config.grid, sample=b,
                                       prompt_id=prompt.text)
            sep_terms.append(ob.separate_loss(masks))
            smoothed = ob.gaussian_smooth(masks, ft.kernel_size, ft.sigma)
            en_terms.append(ob.enhance_loss(smoothed))
        sep = ad.rmean(ad.stack(sep_terms))
        en = ad.rmean(ad.stack(en_terms))

        norm = None
        if ft.weights.lambda_norm > 0:
            nb = min(ft.norm_batch, len(norm_pairs))
            picks = [norm_pairs[int(i)] for i in gen.integers(0, len(norm_pairs), size=nb)]
            t_batch = gen.integers(0, schedule.T, size=nb)
            eps_batch = gen.standard_normal((nb, config.image_size,
                                             config.image_size, config.channels))
            norm = ob.norm_loss(params, config, schedule, picks, t_batch, eps_batch)

        total = ob.total_loss(sep, en, norm, ft.weights)
        if np.isnan(total.data):
            raise FloatingPointError(
                f"finetune diverged at step {step}: sep={sep.data} en={en.data} "
                f"norm={None if norm is None else norm.data}")
        total.backward()
        ad.adam_step(trainable, state, lr=ft.lr_at(step))
        ad.zero_grad(params.values())

        log.append({"step": step, "pair": list(pair), "t": t_list,
                    "lr": ft.lr_at(step),
                    "loss_sep": float(sep.data), "loss_en": float(en.data),
                    "loss_norm": None if norm is None else float(norm.data),
                    "loss_total": float(total.data)})
    return params, log


def ablate_selectors(base_params: dict[str, Tensor], config: md.ModelConfig,
                     schedule: df.NoiseSchedule, vocab: sc.ConceptVocab,
                     pairs: PairSchedule, norm_pairs, ft: FinetuneConfig,
                     selectors: list[str],
                     sample_config: df.SampleConfig | None = None):
    """Rerun the same finetune from identical initial state per selector."""
    if not selectors:
        raise ValueError("no selectors given")
    out = []
    for pattern in selectors:
        fresh = {n: Tensor(t.data.copy(), requires_grad=True)
                 for n, t in base_params.items()}
        tuned, log = compositional_finetune(
            fresh, config, schedule, vocab, pairs, norm_pairs,
            replace(ft, selector=pattern), sample_config)
        out.append({"selector": pattern, "params": tuned, "log": log})
    return out


# ---------------------------------------------------------------------------
# test-time adaptation

def tta_refine_batch(params: dict[str, Tensor], config: md.ModelConfig,
                     schedule: df.NoiseSchedule, vocab: sc.ConceptVocab,
                     prompts: list[sc.PromptSpec],
                     sample_config: df.SampleConfig, tta: TTAConfig,
                     seeds: list[int]):
    """Guided sampling with per-step latent refinement on the first
    ``tta.refine_steps`` steps; model weights are never touched.

    Returns (images, per-step loss log). With refine_steps=0 or
    step_size=0 the trajectory coincides with plain recorded sampling.
    """
    ts = df.timestep_sequence(schedule.T, sample_config.num_steps)
    if tta.refine_steps > len(ts):
        raise ValueError("refine_steps exceeds the number of denoising steps")
    b = len(prompts)
    table = params["text_embed.table"].data
    conds = np.stack([sc.encode_prompt_np(p, table) for p in prompts])
    uncond = np.repeat(sc.encode_uncond_np(vocab, table)[None], b, axis=0)
    gens = [np.random.Generator(np.random.PCG64(int(s))) for s in seeds]
    shape = (config.image_size, config.image_size, config.channels)
    z = np.stack([g.standard_normal(shape) for g in gens])
    eta = 1.0 if sample_config.sampler == "ddpm" else 0.0
    w = sample_config.guidance_scale
    cond_t, uncond_t = Tensor(conds), Tensor(uncond)
    log: list[dict] = []

    # freeze the tree: refinement differentiates with respect to z only
    flags = {n: p.requires_grad for n, p in params.items()}
    for p in params.values():
        p.requires_grad = False
    try:
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else None
            if i < tta.refine_steps and tta.step_size > 0:
                z_t = Tensor(z, requires_grad=True)
                _, stack = md.forward(params, config, z_t, t, cond_t, record=True)
                terms = []
                for s, prompt in enumerate(prompts):
                    masks = ob.aggregate_masks(stack, prompt.concept_indices,
                                               config.grid, sample=s)
                    sep = ob.separate_loss(masks) if masks.k >= 2 else None
                    en = ob.enhance_loss(ob.gaussian_smooth(
                        masks, tta.kernel_size, tta.sigma))
                    terms.append(ob.total_loss(sep, en, None, tta.weights))
                total = ad.rsum(ad.stack(terms))
                total.backward()
                grad = z_t.grad
                norms = np.max(np.abs(grad).reshape(b, -1), axis=1) + 1e-12
                z = z - tta.step_size * grad / norms[:, None, None, None]
                log.append({"step": i, "t": int(t),
                            "loss": float(total.data) / b})
            with ad.no_grad():
                eps_c, _ = md.forward(params, config, Tensor(z), t, cond_t)
                if w == 1.0:
                    eps = eps_c
                elif w == 0.0:
                    eps, _ = md.forward(params, config, Tensor(z), t, uncond_t)
                else:
                    eps_u, _ = md.forward(params, config, Tensor(z), t, uncond_t)
                    eps = ad.add(eps_c, ad.scale(ad.sub(eps_c, eps_u), w - 1.0))
                noise = np.stack([g.standard_normal(shape) for g in gens]) \
                    if (eta and t_prev is not None) else None
                z = df.denoise_step(schedule, z, eps.data, t, t_prev, eta, noise)
            if np.any(np.isnan(z)):
                raise FloatingPointError(f"NaN during TTA refinement at t={t}")
    finally:
        for n, p in params.items():
            p.requires_grad = flags[n]
        ad.zero_grad(params.values())
    return z, log


def tta_refine(params: dict[str, Tensor], config: md.ModelConfig,
               schedule: df.NoiseSchedule, vocab: sc.ConceptVocab,
               prompt: sc.PromptSpec, sample_config: df.SampleConfig,
               tta: TTAConfig):
    images, log = tta_refine_batch(params, config, schedule, vocab, [prompt],
                                   sample_config, tta, [sample_config.seed])
    return images[0], log
