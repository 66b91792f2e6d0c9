"""Synthetic compositional domain: concepts, prompts, scenes, biased datasets.

A concept is a colored shape on a gray canvas. Prompts follow the fixed
grammar "a <c1> [and a <c2> [and a <c3>]]"; the token stream is
[BOS, c1, AND, c2, ...] padded with the null token, so concept tokens are
single tokens by construction. Dataset bias (dominant concepts, a sparse
co-occurrence matrix) is what induces the compositional failures that
finetuning is later asked to repair.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import autodiff as ad
from .autodiff import Tensor

BOS, NULL, AND = 0, 1, 2
NUM_SPECIALS = 3

SHAPES = ("circle", "square", "triangle", "cross", "diamond", "ring")

_DEFAULT_CONCEPTS = [
    ("red-circle", "circle", (0.92, 0.12, 0.12)),
    ("blue-square", "square", (0.15, 0.25, 0.92)),
    ("green-triangle", "triangle", (0.10, 0.78, 0.16)),
    ("yellow-cross", "cross", (0.95, 0.86, 0.10)),
    ("magenta-diamond", "diamond", (0.88, 0.15, 0.80)),
    ("cyan-circle", "circle", (0.10, 0.80, 0.86)),
    ("orange-square", "square", (0.96, 0.55, 0.08)),
    ("purple-circle", "circle", (0.52, 0.14, 0.86)),
    ("pink-triangle", "triangle", (0.97, 0.48, 0.66)),
    ("lime-cross", "cross", (0.62, 0.92, 0.14)),
    ("navy-diamond", "diamond", (0.08, 0.12, 0.55)),
    ("white-square", "square", (0.97, 0.97, 0.97)),
]

BACKGROUND = np.array([0.5, 0.5, 0.5])


@dataclass(frozen=True)
class Concept:
    name: str
    shape: str
    color: tuple[float, float, float]


@dataclass(frozen=True)
class ConceptVocab:
    concepts: tuple[Concept, ...]
    max_tokens: int = 8

    def __post_init__(self):
        names = [c.name for c in self.concepts]
        if len(set(names)) != len(names):
            raise ValueError("concept names must be unique")
        for c in self.concepts:
            if c.shape not in SHAPES:
                raise ValueError(f"unknown shape {c.shape!r}")

    @property
    def size(self) -> int:
        return NUM_SPECIALS + len(self.concepts)

    def token_id(self, name: str) -> int:
        for i, c in enumerate(self.concepts):
            if c.name == name:
                return NUM_SPECIALS + i
        raise KeyError(f"unknown concept {name!r}")

    def concept_at(self, token_id: int) -> Concept:
        idx = token_id - NUM_SPECIALS
        if not 0 <= idx < len(self.concepts):
            raise KeyError(f"token {token_id} is not a concept token")
        return self.concepts[idx]

    def names(self) -> list[str]:
        return [c.name for c in self.concepts]

    def to_dict(self) -> dict:
        return {"max_tokens": self.max_tokens,
                "concepts": [[c.name, c.shape, list(c.color)] for c in self.concepts]}

    @classmethod
    def from_dict(cls, d: dict) -> "ConceptVocab":
        return cls(tuple(Concept(n, s, tuple(col)) for n, s, col in d["concepts"]),
                   max_tokens=d["max_tokens"])


def default_vocab(max_tokens: int = 8) -> ConceptVocab:
    return ConceptVocab(tuple(Concept(n, s, c) for n, s, c in _DEFAULT_CONCEPTS),
                        max_tokens=max_tokens)


# ---------------------------------------------------------------------------
# prompts

@dataclass(frozen=True)
class PromptSpec:
    token_ids: tuple[int, ...]
    concept_indices: tuple[int, ...]
    text: str

    def __post_init__(self):
        n = len(self.token_ids)
        k = len(self.concept_indices)
        if not 1 <= k <= n - 1:
            raise ValueError(f"need 1 <= K <= N-1 concepts, got K={k}, N={n}")
        for i in self.concept_indices:
            if self.token_ids[i] < NUM_SPECIALS:
                raise ValueError(f"concept index {i} points at a special token")


def make_prompt(vocab: ConceptVocab, names: list[str]) -> PromptSpec:
    """Build the [BOS, c1, AND, c2, ...] token stream, null-padded to N."""
    if not names:
        raise ValueError("at least one concept required")
    tokens = [BOS]
    indices = []
    for j, name in enumerate(names):
        if j > 0:
            tokens.append(AND)
        indices.append(len(tokens))
        tokens.append(vocab.token_id(name))
    if len(tokens) > vocab.max_tokens:
        raise ValueError(f"{len(names)} concepts exceed {vocab.max_tokens} tokens")
    tokens += [NULL] * (vocab.max_tokens - len(tokens))
    text = " and ".join(f"a {n}" for n in names)
    return PromptSpec(tuple(tokens), tuple(indices), text)


def null_prompt(vocab: ConceptVocab) -> tuple[int, ...]:
    return (BOS,) + (NULL,) * (vocab.max_tokens - 1)


def parse_prompt_line(vocab: ConceptVocab, line: str) -> PromptSpec:
    words = [w for w in line.strip().split() if w not in ("a", "and")]
    return make_prompt(vocab, words)


def _positional_code(n: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(100.0) * np.arange(half) / half)
    angles = np.arange(n)[:, None] * freqs[None, :]
    return 0.5 * np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def encode_tokens(token_ids, table: Tensor, text_dim: int) -> Tensor:
    """Embedding lookup plus a fixed positional code; differentiable into
    the table (gradients flow during base training, never during finetuning
    because only selector-matched parameters reach the optimizer)."""
    rows = [ad.take(table, tid, axis=0) for tid in token_ids]
    emb = ad.stack(rows, axis=0)
    return ad.add(emb, Tensor(_positional_code(len(token_ids), text_dim)))


def encode_prompt(prompt: PromptSpec, table: Tensor, text_dim: int) -> Tensor:
    return encode_tokens(prompt.token_ids, table, text_dim)


def encode_uncond(vocab: ConceptVocab, table: Tensor, text_dim: int) -> Tensor:
    return encode_tokens(null_prompt(vocab), table, text_dim)


def encode_tokens_np(token_ids, table_data: np.ndarray) -> np.ndarray:
    """Gradient-free lookup for sampling and evaluation."""
    ids = np.asarray(token_ids, dtype=np.int64)
    return table_data[ids] + _positional_code(len(ids), table_data.shape[1])


def encode_prompt_np(prompt: PromptSpec, table_data: np.ndarray) -> np.ndarray:
    return encode_tokens_np(prompt.token_ids, table_data)


def encode_uncond_np(vocab: ConceptVocab, table_data: np.ndarray) -> np.ndarray:
    return encode_tokens_np(null_prompt(vocab), table_data)


# ---------------------------------------------------------------------------
# rendering

@dataclass(frozen=True)
class Placement:
    concept: str
    center: tuple[float, float]  # (row, col) in canvas pixels
    radius: float


@dataclass(frozen=True)
class SceneSpec:
    placements: tuple[Placement, ...]
    canvas: int = 32


_SUPERSAMPLE = 4


def _shape_mask(shape: str, yy: np.ndarray, xx: np.ndarray,
                cy: float, cx: float, r: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= 0.88 * r
    if shape == "triangle":
        return (np.abs(dy) <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    if shape == "cross":
        arm = 0.36 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | \
               ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= 1.2 * r
    if shape == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(f"unknown shape {shape!r}")


def shape_area(shape: str, r: float) -> float:
    """Analytic area of a rendered shape, the oracle for coverage tests."""
    if shape == "circle":
        return np.pi * r * r
    if shape == "square":
        return (2 * 0.88 * r) ** 2
    if shape == "triangle":
        return 2.0 * r * r  # integral of width (dy + r) over dy in [-r, r]
    if shape == "cross":
        arm = 0.36 * r
        return 2 * (2 * arm * 2 * r) - (2 * arm) ** 2
    if shape == "diamond":
        return 2 * (1.2 * r) ** 2
    if shape == "ring":
        return np.pi * r * r * (1 - 0.55 ** 2)
    raise ValueError(shape)


def render_scene(spec: SceneSpec, vocab: ConceptVocab) -> np.ndarray:
    """Anti-aliased raster in [0, 1], gray background; deterministic."""
    s = _SUPERSAMPLE
    hi = spec.canvas * s
    img = np.tile(BACKGROUND, (hi, hi, 1)).astype(np.float64)
    coords = (np.arange(hi) + 0.5) / s
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    for pl in spec.placements:
        cy, cx = pl.center
        if not (pl.radius <= cy <= spec.canvas - pl.radius
                and pl.radius <= cx <= spec.canvas - pl.radius):
            raise ValueError(f"placement {pl} leaves the canvas")
        concept = vocab.concepts[vocab.token_id(pl.concept) - NUM_SPECIALS]
        mask = _shape_mask(concept.shape, yy, xx, cy, cx, pl.radius)
        img[mask] = concept.color
    # box-filter downsample performs the anti-aliasing
    img = img.reshape(spec.canvas, s, spec.canvas, s, 3).mean(axis=(1, 3))
    return img


def to_model_space(img: np.ndarray) -> np.ndarray:
    return img * 2.0 - 1.0


def to_unit(img: np.ndarray) -> np.ndarray:
    return np.clip((img + 1.0) / 2.0, 0.0, 1.0)


def save_png(path, img_unit: np.ndarray) -> None:
    arr = np.clip(np.round(img_unit * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


# ---------------------------------------------------------------------------
# biased dataset

@dataclass(frozen=True)
class BiasConfig:
    """Operationalizes the failure preconditions: class dominance and rare
    concept combinations."""

    fraction_single: float = 0.7
    dominance: tuple[float, ...] | None = None   # per-concept draw weight
    pair_weights: tuple[tuple[float, ...], ...] | None = None  # symmetric, 0 diag

    def concept_weights(self, n: int) -> np.ndarray:
        if self.dominance is None:
            w = np.ones(n)
            w[: max(n // 4, 1)] = 5.0  # a few dominant classes
        else:
            w = np.asarray(self.dominance, dtype=np.float64)
            if len(w) != n:
                raise ValueError("dominance length must match concept count")
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("dominance weights must be nonnegative, not all zero")
        return w / w.sum()

    def pair_matrix(self, n: int) -> np.ndarray:
        if self.pair_weights is None:
            m = np.zeros((n, n))
            for i in range(n):  # ring adjacency: most pairs never co-occur
                m[i, (i + 1) % n] = m[(i + 1) % n, i] = 1.0
        else:
            m = np.asarray(self.pair_weights, dtype=np.float64)
            if m.shape != (n, n) or not np.allclose(m, m.T):
                raise ValueError("pair_weights must be a symmetric n x n matrix")
        np.fill_diagonal(m, 0.0)
        if self.fraction_single < 1.0 and m.sum() <= 0:
            raise ValueError("degenerate bias: all-zero co-occurrence")
        return m


def trained_pairs(bias: BiasConfig, vocab: ConceptVocab) -> set[tuple[str, str]]:
    names = vocab.names()
    m = bias.pair_matrix(len(names))
    out = set()
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            if m[i, j] > 0:
                out.add(tuple(sorted((names[i], names[j]))))
    return out


def held_pairs(bias: BiasConfig, vocab: ConceptVocab) -> list[tuple[str, str]]:
    """Concept pairs that never co-occur in training, sorted for determinism."""
    names = vocab.names()
    seen = trained_pairs(bias, vocab)
    out = [tuple(sorted((a, b)))
           for i, a in enumerate(names) for b in names[i + 1:]]
    return sorted(p for p in out if p not in seen)


@dataclass(frozen=True)
class SceneItem:
    image: np.ndarray       # [canvas, canvas, 3] in [0, 1]
    prompt: PromptSpec
    scene: SceneSpec


def _sample_placements(gen, vocab, names, canvas):
    # near-canonical layouts: position entropy is kept deliberately small so
    # a desk-scale denoiser commits to a scene instead of averaging over
    # placements; composition difficulty lives in WHICH concepts appear
    jit = canvas / 16.0
    placements = []
    if len(names) == 1:
        r = gen.uniform(0.165, 0.185) * canvas
        cy = np.clip(canvas / 2 + gen.uniform(-jit, jit), r + 1, canvas - r - 1)
        cx = np.clip(canvas / 2 + gen.uniform(-jit, jit), r + 1, canvas - r - 1)
        placements.append(Placement(names[0], (cy, cx), r))
    else:
        # one object per horizontal half keeps training scenes disjoint
        for name, fx in zip(names, (0.27, 0.73)):
            r = gen.uniform(0.14, 0.155) * canvas
            cy = np.clip(canvas / 2 + gen.uniform(-jit, jit) * 0.5,
                         r + 1, canvas - r - 1)
            cx = np.clip(canvas * fx + gen.uniform(-jit, jit) * 0.5,
                         r + 1, canvas - r - 1)
            placements.append(Placement(name, (cy, cx), r))
    return tuple(placements)


def make_dataset(vocab: ConceptVocab, bias: BiasConfig, n: int,
                 seed: int, canvas: int = 32) -> list[SceneItem]:
    """Mixture of single-concept and biased pair scenes, reproducible."""
    if n <= 0:
        raise ValueError("n must be positive")
    gen = np.random.Generator(np.random.PCG64(seed))
    names = vocab.names()
    cw = bias.concept_weights(len(names))
    pm = bias.pair_matrix(len(names))
    flat = pm[np.triu_indices(len(names), k=1)]
    pair_idx = np.transpose(np.triu_indices(len(names), k=1))
    pair_p = flat / flat.sum() if flat.sum() > 0 else None

    items = []
    for _ in range(n):
        if gen.random() < bias.fraction_single or pair_p is None:
            chosen = [names[gen.choice(len(names), p=cw)]]
        else:
            i, j = pair_idx[gen.choice(len(pair_idx), p=pair_p)]
            chosen = [names[i], names[j]]
            if gen.random() < 0.5:
                chosen.reverse()
        scene = SceneSpec(_sample_placements(gen, vocab, chosen, canvas), canvas)
        items.append(SceneItem(render_scene(scene, vocab),
                               make_prompt(vocab, chosen), scene))
    return items


def split_concepts(vocab: ConceptVocab, held_out_fraction: float,
                   seed: int) -> tuple[list[str], list[str]]:
    """Deterministic disjoint (seen, unseen) split of the concept names."""
    if not 0.0 <= held_out_fraction < 1.0:
        raise ValueError("held_out_fraction must be in [0, 1)")
    names = vocab.names()
    n_unseen = int(round(len(names) * held_out_fraction))
    if held_out_fraction > 0 and n_unseen == 0:
        n_unseen = 1
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(names))
    unseen = sorted(names[i] for i in order[:n_unseen])
    seen = sorted(set(names) - set(unseen))
    return seen, unseen


# ---------------------------------------------------------------------------
# dataset directory format

def save_dataset(out_dir, items: list[SceneItem], vocab: ConceptVocab) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"vocab": vocab.to_dict(), "items": []}
    for i, item in enumerate(items):
        fname = f"scene_{i:05d}.png"
        save_png(out / fname, item.image)
        manifest["items"].append({
            "file": fname,
            "text": item.prompt.text,
            "token_ids": list(item.prompt.token_ids),
            "concept_indices": list(item.prompt.concept_indices),
            "canvas": item.scene.canvas,
            "placements": [[p.concept, list(p.center), p.radius]
                           for p in item.scene.placements],
        })
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    with open(out / "prompts.txt", "w") as fh:
        for item in items:
            fh.write(item.prompt.text + "\n")


def load_dataset(in_dir) -> tuple[list[SceneItem], ConceptVocab]:
    root = Path(in_dir)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    vocab = ConceptVocab.from_dict(manifest["vocab"])
    items = []
    for rec in manifest["items"]:
        prompt = PromptSpec(tuple(rec["token_ids"]),
                            tuple(rec["concept_indices"]), rec["text"])
        scene = SceneSpec(tuple(Placement(c, tuple(ctr), r)
                                for c, ctr, r in rec["placements"]),
                          rec["canvas"])
        items.append(SceneItem(load_png(root / rec["file"]), prompt, scene))
    return items, vocab
