"""Quantitative evaluation: a template detector over the shape vocabulary,
success rate, an alignment proxy, Gaussian-Fréchet distance over hand-made
image features, attention-mask diagnostics, and the seen/unseen protocols.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffusion as df
from . import finetune as fi
from . import model as md
from . import objectives as ob
from . import scenes as sc
from .autodiff import Tensor


# ---------------------------------------------------------------------------
# detector

TEMPLATE_RADII = (4.0, 4.75, 5.5, 6.25, 7.0)
COLOR_TOLERANCE = 0.45      # mean RGB distance inside the shape core
RING_TOLERANCE = 0.30       # mean RGB distance required just outside it


@dataclass
class DetectionResult:
    confidences: dict[str, float]
    locations: dict[str, tuple[int, int]]

    def __post_init__(self):
        for name, c in self.confidences.items():
            if not 0.0 <= c <= 1.0:
                raise ValueError(f"confidence for {name} outside [0, 1]")


def _binary_dilate(mask: np.ndarray, iterations: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(iterations):
        padded = np.pad(out, 1)
        acc = np.zeros_like(out)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                acc |= padded[1 + dy: 1 + dy + out.shape[0],
                              1 + dx: 1 + dx + out.shape[1]]
        out = acc
    return out


def _template(shape: str, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """(core, ring) boolean masks for one shape at one radius."""
    w = 2 * int(np.ceil(radius)) + 5
    s = 4
    coords = (np.arange(w * s) + 0.5) / s
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    c = w / 2.0
    alpha = sc._shape_mask(shape, yy, xx, c, c, radius).astype(np.float64)
    alpha = alpha.reshape(w, s, w, s).mean(axis=(1, 3))
    support = alpha > 0.05
    core = alpha > 0.95
    ring = _binary_dilate(support, 2) & ~support
    return core, ring


def _window_means(dist: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Sliding-window mean of ``dist`` under ``mask`` at every position."""
    w = mask.shape[0]
    windows = np.lib.stride_tricks.sliding_window_view(dist, (w, w))
    return np.einsum("ijkl,kl->ij", windows, mask) / mask.sum()


class Detector:
    """Color-and-footprint template matcher over the concept vocabulary.

    Confidence is (color match inside the shape core) x (background
    contrast on a ring just outside), maximized over positions and a few
    template radii. Scores live in [0, 1]; object multiplicity is ignored
    (only the best location counts).
    """

    def __init__(self, vocab: sc.ConceptVocab, radii=TEMPLATE_RADII,
                 color_tol: float = COLOR_TOLERANCE,
                 ring_tol: float = RING_TOLERANCE):
        self.vocab = vocab
        self.color_tol = color_tol
        self.ring_tol = ring_tol
        self._templates = {}
        for concept in vocab.concepts:
            self._templates[concept.name] = [
                _template(concept.shape, r) for r in radii]

    def score_concept(self, image: np.ndarray, name: str
                      ) -> tuple[float, tuple[int, int]]:
        concept = self.vocab.concepts[self.vocab.token_id(name) - sc.NUM_SPECIALS]
        dist = np.linalg.norm(image - np.asarray(concept.color), axis=-1)
        best, best_loc = 0.0, (0, 0)
        for core, ring in self._templates[name]:
            if core.shape[0] > image.shape[0]:
                continue
            d_in = _window_means(dist, core)
            d_ring = _window_means(dist, ring)
            score = np.clip(1.0 - d_in / self.color_tol, 0.0, 1.0) \
                * np.clip(d_ring / self.ring_tol, 0.0, 1.0)
            idx = np.unravel_index(np.argmax(score), score.shape)
            if score[idx] > best:
                half = core.shape[0] // 2
                best = float(score[idx])
                best_loc = (int(idx[0]) + half, int(idx[1]) + half)
        return best, best_loc

    def detect(self, image: np.ndarray) -> DetectionResult:
        confidences, locations = {}, {}
        for name in self.vocab.names():
            confidences[name], locations[name] = self.score_concept(image, name)
        return DetectionResult(confidences, locations)


def detect_concepts(image: np.ndarray, vocab: sc.ConceptVocab,
                    detector: Detector | None = None) -> DetectionResult:
    if detector is None:
        detector = Detector(vocab)
    return detector.detect(image)


def success_rate(results: list[DetectionResult],
                 prompts: list[sc.PromptSpec], vocab: sc.ConceptVocab,
                 threshold: float) -> float:
    """Fraction of images whose prompted concepts all clear the threshold."""
    if not results:
        raise ValueError("no detection results")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    wins = 0
    for res, prompt in zip(results, prompts):
        names = [vocab.concept_at(prompt.token_ids[i]).name
                 for i in prompt.concept_indices]
        if all(res.confidences[n] >= threshold for n in names):
            wins += 1
    return wins / len(results)


def alignment_proxy(results: list[DetectionResult],
                    prompts: list[sc.PromptSpec],
                    vocab: sc.ConceptVocab) -> tuple[float, float]:
    """Mean over prompts of the mean prompted-concept confidence."""
    per_prompt = []
    for res, prompt in zip(results, prompts):
        names = [vocab.concept_at(prompt.token_ids[i]).name
                 for i in prompt.concept_indices]
        per_prompt.append(np.mean([res.confidences[n] for n in names]))
    return float(np.mean(per_prompt)), float(np.std(per_prompt))


# ---------------------------------------------------------------------------
# image features and Frechet distance

FEATURE_DIM = 16
_NONBG_THRESHOLD = 0.25


def image_features(image: np.ndarray) -> np.ndarray:
    """16-dim hand-crafted descriptor: color moments + edge statistics."""
    f = np.empty(FEATURE_DIM)
    f[0:3] = image.mean(axis=(0, 1))
    f[3:6] = image.std(axis=(0, 1))
    off = np.linalg.norm(image - sc.BACKGROUND, axis=-1)
    nonbg = off > _NONBG_THRESHOLD
    if nonbg.any():
        f[6:9] = image[nonbg].mean(axis=0)
    else:
        f[6:9] = sc.BACKGROUND
    f[9] = nonbg.mean()
    lum = image @ np.array([0.299, 0.587, 0.114])
    gy = np.diff(lum, axis=0)[:, :-1]
    gx = np.diff(lum, axis=1)[:-1, :]
    mag = np.hypot(gy, gx)
    f[10] = mag.mean()
    f[11] = mag.std()
    ang = np.mod(np.arctan2(gy, gx), np.pi)
    hist, _ = np.histogram(ang, bins=4, range=(0.0, np.pi), weights=mag)
    f[12:16] = hist / (mag.sum() + 1e-12)
    return f


@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    count: int
    jittered: bool = False

    def __post_init__(self):
        if self.sigma.shape != (len(self.mu), len(self.mu)):
            raise ValueError("sigma shape does not match mu")
        if np.max(np.abs(self.sigma - self.sigma.T)) > 1e-12:
            raise ValueError("sigma must be symmetric")


def feature_stats(images: list[np.ndarray]) -> FeatureStats:
    feats = np.stack([image_features(img) for img in images])
    d = feats.shape[1]
    if len(images) < d + 1:
        raise ValueError(f"need at least {d + 1} images for {d}-dim features")
    mu = feats.mean(axis=0)
    sigma = np.cov(feats, rowvar=False)
    sigma = (sigma + sigma.T) / 2.0
    jittered = False
    if np.min(np.linalg.eigvalsh(sigma)) < 1e-10:
        sigma = sigma + 1e-6 * np.eye(d)
        jittered = True
    return FeatureStats(mu=mu, sigma=sigma, count=len(images), jittered=jittered)


def _psd_sqrt(m: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    if np.min(vals) < -tol:
        raise ValueError(f"matrix is not PSD (min eigenvalue {np.min(vals):.3e})")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)).

    The cross term uses the symmetric form Tr((Sa^(1/2) Sb Sa^(1/2))^(1/2))
    computed by eigendecomposition, which keeps everything real and
    symmetric in the inputs.
    """
    if a.mu.shape != b.mu.shape:
        raise ValueError("feature dimensions differ")
    root_a = _psd_sqrt(a.sigma)
    inner = root_a @ b.sigma @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    if np.min(vals) < -1e-8:
        raise ValueError("cross-covariance is not PSD beyond jitter tolerance")
    tr_cross = np.sum(np.sqrt(np.clip(vals, 0.0, None)))
    diff = a.mu - b.mu
    return float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma)
                 - 2.0 * tr_cross)


# ---------------------------------------------------------------------------
# attention diagnostics

@dataclass(frozen=True)
class OverlapResult:
    mean: float   # Eq.-style integrand averaged over pixels
    peak: float   # its max, the separate-loss value itself


def mask_overlap(masks: ob.ConceptMasks, eps: float = 1e-8) -> OverlapResult:
    if masks.k < 2:
        raise ValueError("overlap needs at least two concepts")
    arrays = [m.data for m in masks.masks]
    ratio = np.prod(arrays, axis=0) / (np.sum(arrays, axis=0) + eps)
    return OverlapResult(mean=float(ratio.mean()), peak=float(ratio.max()))


def min_max_activation(masks: ob.ConceptMasks, kernel_size: int = 3,
                       sigma: float = 0.5) -> float:
    """Complement of the enhance loss under the same smoothing config."""
    smoothed = ob.gaussian_smooth(masks, kernel_size, sigma)
    return 1.0 - ob.enhance_loss(smoothed).item()


def trace_diagnostics(trace: md.AttentionStack, prompt: sc.PromptSpec,
                      grid: int, kernel_size: int = 3,
                      sigma: float = 0.5) -> dict:
    """Per-trajectory means of overlap and weakest-peak activation."""
    overlaps, peaks, minmax = [], [], []
    for t in trace.timesteps():
        masks = ob.aggregate_masks(trace, prompt.concept_indices, grid,
                                   timestep=t, prompt_id=prompt.text)
        if masks.k >= 2:
            res = mask_overlap(masks)
            overlaps.append(res.mean)
            peaks.append(res.peak)
        minmax.append(min_max_activation(masks, kernel_size, sigma))
    return {
        "mask_overlap_mean": float(np.mean(overlaps)) if overlaps else None,
        "mask_overlap_peak": float(np.mean(peaks)) if peaks else None,
        "min_max_activation": float(np.mean(minmax)),
    }


# ---------------------------------------------------------------------------
# protocol runner

@dataclass
class EvalReport:
    protocol: str
    n_prompts: int
    threshold: float
    success_rate: float
    alignment_mean: float
    alignment_std: float
    frechet: float | None = None
    mask_overlap_mean: float | None = None
    mask_overlap_peak: float | None = None
    min_max_activation: float | None = None
    prompts: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.success_rate <= 1.0:
            raise ValueError("success rate outside [0, 1]")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "protocol", "n_prompts", "threshold", "success_rate",
            "alignment_mean", "alignment_std", "frechet",
            "mask_overlap_mean", "mask_overlap_peak", "min_max_activation")}


def sample_prompts(params, config: md.ModelConfig, schedule, vocab,
                   prompts: list[sc.PromptSpec], seeds: list[int],
                   sample_config: df.SampleConfig, record: bool = False,
                   chunk: int = 16, tta: "fi.TTAConfig | None" = None):
    """Sample one image per (prompt, seed), chunked; returns unit-space
    images plus traces when recording."""
    table = params["text_embed.table"].data
    uncond = sc.encode_uncond_np(vocab, table)
    images, traces = [], []
    for lo in range(0, len(prompts), chunk):
        hi = min(lo + chunk, len(prompts))
        batch_prompts = prompts[lo:hi]
        batch_seeds = seeds[lo:hi]
        if tta is not None:
            imgs, _ = fi.tta_refine_batch(params, config, schedule, vocab,
                                          batch_prompts, sample_config, tta,
                                          batch_seeds)
            tr = None
        else:
            conds = np.stack([sc.encode_prompt_np(p, table) for p in batch_prompts])
            imgs, tr = df.sample_batch(params, config, schedule, conds, uncond,
                                       sample_config, batch_seeds, record=record)
        images.extend(sc.to_unit(img) for img in imgs)
        if record and tr is not None:
            traces.extend(tr)
    return images, (traces if record else None)


def protocol_prompts(vocab: sc.ConceptVocab, protocol: str, n_prompts: int,
                     seed: int, seen: list[str], unseen: list[str]
                     ) -> list[sc.PromptSpec]:
    """Deterministic per-protocol prompt sets (pairs cycle when exhausted)."""
    gen = np.random.Generator(np.random.PCG64(seed))
    if protocol == "single":
        names = seen if seen else vocab.names()
        return [sc.make_prompt(vocab, [names[i % len(names)]])
                for i in range(n_prompts)]
    if protocol == "seen-seen":
        pool = [(a, b) for i, a in enumerate(seen) for b in seen[i + 1:]]
    elif protocol == "seen-unseen":
        if not unseen:
            raise ValueError("protocol needs a nonempty unseen split")
        pool = [(u, s) for u in unseen for s in seen]
    elif protocol == "unseen-unseen":
        if not unseen:
            raise ValueError("protocol needs a nonempty unseen split")
        pool = [(a, b) for i, a in enumerate(unseen) for b in unseen[i + 1:]]
        if not pool:
            raise ValueError("need at least two unseen concepts")
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    order = gen.permutation(len(pool))
    prompts = []
    for i in range(n_prompts):
        a, b = pool[order[i % len(pool)]]
        prompts.append(sc.make_prompt(vocab, [a, b] if gen.random() < 0.5 else [b, a]))
    return prompts


def evaluate_prompts(params, config, schedule, vocab,
                     prompts: list[sc.PromptSpec], seeds: list[int],
                     sample_config: df.SampleConfig, threshold: float,
                     detector: Detector | None = None,
                     reference: FeatureStats | None = None,
                     record_masks: bool = True, protocol: str = "custom",
                     chunk: int = 16,
                     tta: "fi.TTAConfig | None" = None) -> EvalReport:
    """Sample every prompt and compute the full metric block."""
    if not prompts:
        raise ValueError("no prompts to evaluate")
    if detector is None:
        detector = Detector(vocab)
    record = record_masks and tta is None
    images, traces = sample_prompts(params, config, schedule, vocab, prompts,
                                    seeds, sample_config, record=record,
                                    chunk=chunk, tta=tta)
    results = [detector.detect(img) for img in images]
    rate = success_rate(results, prompts, vocab, threshold)
    align_mean, align_std = alignment_proxy(results, prompts, vocab)
    report = EvalReport(protocol=protocol, n_prompts=len(prompts),
                        threshold=threshold, success_rate=rate,
                        alignment_mean=align_mean, alignment_std=align_std,
                        prompts=[p.text for p in prompts])
    if reference is not None and len(images) >= FEATURE_DIM + 1:
        report.frechet = frechet_distance(feature_stats(images), reference)
    if record:
        diags = [trace_diagnostics(tr, p, config.grid)
                 for tr, p in zip(traces, prompts)]
        overlaps = [d["mask_overlap_mean"] for d in diags
                    if d["mask_overlap_mean"] is not None]
        peaks = [d["mask_overlap_peak"] for d in diags
                 if d["mask_overlap_peak"] is not None]
        if overlaps:
            report.mask_overlap_mean = float(np.mean(overlaps))
            report.mask_overlap_peak = float(np.mean(peaks))
        report.min_max_activation = float(
            np.mean([d["min_max_activation"] for d in diags]))
    return report


def run_protocol(params, config, schedule, vocab, protocol: str,
                 n_prompts: int, seed: int, seen: list[str],
                 unseen: list[str], sample_config: df.SampleConfig,
                 threshold: float, detector: Detector | None = None,
                 reference: FeatureStats | None = None,
                 chunk: int = 16) -> EvalReport:
    prompts = protocol_prompts(vocab, protocol, n_prompts, seed, seen, unseen)
    gen = np.random.Generator(np.random.PCG64(seed + 0xE7A1))
    seeds = [int(s) for s in gen.integers(0, 2 ** 31, size=len(prompts))]
    return evaluate_prompts(params, config, schedule, vocab, prompts, seeds,
                            sample_config, threshold, detector=detector,
                            reference=reference, protocol=protocol, chunk=chunk)


def reference_stats(params, config, schedule, vocab, concepts: list[str],
                    n: int, seed: int, sample_config: df.SampleConfig,
                    chunk: int = 16) -> FeatureStats:
    """Feature Gaussian of frozen-model single-object samples; the source
    distribution all Frechet numbers are measured against."""
    prompts = [sc.make_prompt(vocab, [concepts[i % len(concepts)]])
               for i in range(n)]
    gen = np.random.Generator(np.random.PCG64(seed + 0xF00D))
    seeds = [int(s) for s in gen.integers(0, 2 ** 31, size=n)]
    images, _ = sample_prompts(params, config, schedule, vocab, prompts, seeds,
                               sample_config, record=False, chunk=chunk)
    return feature_stats(images)
