"""Attention-mask objectives: aggregation, smoothing, and the two losses
that drive compositional finetuning (plus the anchoring denoising term).

The separate loss penalizes the worst pixel-level overlap between concept
masks; the enhance loss penalizes the weakest concept's peak activation
after Gaussian smoothing. Both are pure functions of the masks and safe to
evaluate concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import diffusion as df
from . import model as md
from . import scenes as sc
from .autodiff import Tensor


@dataclass
class ConceptMasks:
    """One [grid, grid] attention mask per prompted concept."""

    masks: list[Tensor]
    timestep: int = -1
    prompt_id: str = ""

    def __post_init__(self):
        if len(self.masks) < 1:
            raise ValueError("at least one concept mask required")
        shape = self.masks[0].shape
        for m in self.masks:
            if m.ndim != 2 or m.shape != shape:
                raise ValueError("masks must share one square 2-D shape")
            if np.any(m.data < -1e-9) or np.any(m.data > 1.0 + 1e-9):
                raise ValueError("mask values must lie in [0, 1]")

    @property
    def k(self) -> int:
        return len(self.masks)


@dataclass(frozen=True)
class LossWeights:
    lambda_norm: float = 0.0
    lambda_sep: float = 1.0
    lambda_en: float = 2.0

    def __post_init__(self):
        # all-zero is legal (it must express the no-op finetune) but useless
        if min(self.lambda_norm, self.lambda_sep, self.lambda_en) < 0:
            raise ValueError("loss weights must be nonnegative")


def aggregate_masks(stack: md.AttentionStack, concept_indices,
                    grid: int, sample: int | None = None,
                    timestep: int | None = None,
                    prompt_id: str = "") -> ConceptMasks:
    """Average each concept token's attention column over all recorded
    layers (heads were already averaged inside the attention op) and fold
    the patch axis onto the square grid."""
    records = stack.records if timestep is None \
        else [r for r in stack.records if r.timestep == timestep]
    if not records:
        raise ValueError("empty attention stack")
    masks = []
    for idx in concept_indices:
        cols = []
        for rec in records:
            amap = rec.map
            if sample is not None and amap.ndim == 3:
                amap = ad.take(amap, sample, axis=0)
            cols.append(ad.take(amap, int(idx), axis=1))
        mask = ad.rmean(ad.stack(cols, axis=0), axis=0)
        masks.append(ad.reshape(mask, (grid, grid)))
    t = records[0].timestep if timestep is None else timestep
    return ConceptMasks(masks, timestep=t, prompt_id=prompt_id)


def gaussian_kernel(size: int = 3, sigma: float = 0.5) -> np.ndarray:
    """Unit-sum isotropic Gaussian; sigma -> 0 degenerates to a delta."""
    if size % 2 == 0:
        raise ValueError("kernel size must be odd")
    r = size // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    k = np.exp(-(yy * yy + xx * xx) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_smooth(masks: ConceptMasks, kernel_size: int = 3,
                    sigma: float = 0.5) -> ConceptMasks:
    kernel = gaussian_kernel(kernel_size, sigma)
    smoothed = [ad.conv2d_fixed(m, kernel) for m in masks.masks]
    return ConceptMasks(smoothed, timestep=masks.timestep,
                        prompt_id=masks.prompt_id)


def _canonical_order(masks: list[Tensor]) -> list[Tensor]:
    # reduce in a byte-canonical order so any permutation of the concept
    # list produces bit-identical sums and products
    return sorted(masks, key=lambda m: m.data.tobytes())


def separate_loss(masks: ConceptMasks, eps_div: float = 1e-8) -> Tensor:
    """Worst-pixel overlap: max over pixels of prod(M_i) / (sum(M_i) + eps).

    The epsilon keeps the all-zero pixel at zero instead of 0/0; gradient
    flows through the single witness pixel via the max reduction.
    """
    if masks.k < 2:
        raise ValueError("separate loss needs at least two concepts")
    ordered = _canonical_order(masks.masks)
    prod = ordered[0]
    total = ordered[0]
    for m in ordered[1:]:
        prod = ad.mul(prod, m)
        total = ad.add(total, m)
    ratio = ad.div(prod, ad.add(total, eps_div))
    return ad.rmax(ratio)


def enhance_loss(smoothed: ConceptMasks) -> Tensor:
    """One minus the weakest concept's peak activation."""
    peaks = [ad.rmax(m) for m in smoothed.masks]
    return ad.sub(1.0, ad.rmin(ad.stack(peaks, axis=0)))


def norm_loss(params: dict[str, Tensor], config: md.ModelConfig,
              schedule: df.NoiseSchedule,
              norm_pairs: list[tuple[np.ndarray, sc.PromptSpec]],
              t_batch, eps_batch: np.ndarray) -> Tensor:
    """Plain denoising loss on frozen-model (image, prompt) pairs; anchors
    the tuned model's output distribution."""
    if not norm_pairs:
        raise ValueError("norm pairs required when the norm weight is positive")
    table = params["text_embed.table"]
    x0 = np.stack([sc.to_model_space(img) for img, _ in norm_pairs])
    cond = ad.stack([sc.encode_prompt(p, table, config.text_dim)
                     for _, p in norm_pairs])
    return df.ddpm_loss(params, config, schedule, x0, cond, t_batch, eps_batch)


def total_loss(sep, en, norm, weights: LossWeights) -> Tensor:
    """Weighted sum lambda_norm*norm + lambda_en*en + lambda_sep*sep."""
    parts = []
    for term, w in ((norm, weights.lambda_norm), (en, weights.lambda_en),
                    (sep, weights.lambda_sep)):
        if w == 0.0 or term is None:
            continue
        parts.append(ad.scale(term if isinstance(term, Tensor) else Tensor(term), w))
    if not parts:
        return Tensor(0.0)
    out = parts[0]
    for p in parts[1:]:
        out = ad.add(out, p)
    return out
