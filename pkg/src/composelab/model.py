"""Conditional patch-transformer denoiser with recordable cross-attention.

The image is cut into patch tokens (2 px patches on a 32 px canvas give a
16x16 token grid), each transformer block runs self-attention, then
cross-attention over the prompt embeddings, then an MLP. Cross-attention
softmax weights, averaged over heads, are the per-layer attention maps that
the mask objectives operate on.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"CLCK"
CHECKPOINT_VERSION = 1

ATTN_GROUPS = ("to_q", "to_k", "to_v", "to_out")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 2
    hidden_dim: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    text_dim: int = 32
    max_tokens: int = 8
    timesteps: int = 200
    channels: int = 3
    vocab_size: int = 15

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError("hidden_dim must be divisible by num_heads")
        for name in ("image_size", "patch_size", "hidden_dim", "num_blocks",
                     "num_heads", "text_dim", "max_tokens", "timesteps",
                     "channels", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size, "patch_size": self.patch_size,
            "hidden_dim": self.hidden_dim, "num_blocks": self.num_blocks,
            "num_heads": self.num_heads, "text_dim": self.text_dim,
            "max_tokens": self.max_tokens, "timesteps": self.timesteps,
            "channels": self.channels, "vocab_size": self.vocab_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class AttentionRecord:
    layer: int
    timestep: int
    map: Tensor  # [..., num_patches, N], softmax rows, head-averaged
    head: int | None = None  # None: averaged over heads


@dataclass
class AttentionStack:
    """All cross-attention maps recorded during one or more forward passes."""

    records: list[AttentionRecord] = field(default_factory=list)

    def add(self, layer: int, timestep: int, amap: Tensor) -> None:
        self.records.append(AttentionRecord(layer=layer, timestep=timestep, map=amap))

    def at_timestep(self, t: int) -> "AttentionStack":
        return AttentionStack([r for r in self.records if r.timestep == t])

    def timesteps(self) -> list[int]:
        return sorted({r.timestep for r in self.records})

    def __len__(self) -> int:
        return len(self.records)


# ---------------------------------------------------------------------------
# parameters

def _param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, dt = config.hidden_dim, config.text_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (config.patch_dim, d),
        "patch_embed.bias": (d,),
        "pos_embed": (config.num_patches, d),
        "time_embed.w1": (d, d),
        "time_embed.b1": (d,),
        "time_embed.w2": (d, d),
        "time_embed.b2": (d,),
        "unpatch.weight": (d, config.patch_dim),
        "unpatch.bias": (config.patch_dim,),
        # token-embedding table: trained with the base model, then frozen
        # (finetuning only ever optimizes selector-matched projections)
        "text_embed.table": (config.vocab_size, dt),
    }
    for i in range(config.num_blocks):
        for g in ATTN_GROUPS:
            shapes[f"block.{i}.self_attn.{g}.weight"] = (d, d)
        shapes[f"block.{i}.cross_attn.to_q.weight"] = (d, d)
        shapes[f"block.{i}.cross_attn.to_k.weight"] = (dt, d)
        shapes[f"block.{i}.cross_attn.to_v.weight"] = (dt, d)
        shapes[f"block.{i}.cross_attn.to_out.weight"] = (d, d)
        shapes[f"block.{i}.time.weight"] = (d, d)
        shapes[f"block.{i}.time.bias"] = (d,)
        shapes[f"block.{i}.mlp.w1"] = (d, 4 * d)
        shapes[f"block.{i}.mlp.b1"] = (4 * d,)
        shapes[f"block.{i}.mlp.w2"] = (4 * d, d)
        shapes[f"block.{i}.mlp.b2"] = (d,)
    return shapes


def init_model(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Deterministic scaled-normal init (variance 1/fan_in), biases zero."""
    gen = np.random.Generator(np.random.PCG64(seed))
    params: dict[str, Tensor] = {}
    for name, shape in _param_shapes(config).items():
        if name.endswith((".bias", ".b1", ".b2")) or name == "unpatch.weight":
            # zero output head: the initial noise prediction is exactly 0,
            # which keeps the first optimizer steps on-distribution
            data = np.zeros(shape)
        elif name in ("text_embed.table", "pos_embed"):
            # embeddings carry identity/location, not a projection: unit
            # variance so they are not drowned out after normalization
            data = gen.standard_normal(shape)
        else:
            fan_in = shape[0]
            data = gen.standard_normal(shape) / np.sqrt(fan_in)
        params[name] = Tensor(data, requires_grad=True)
    return params


@dataclass(frozen=True)
class ParamSelector:
    """Names cross-attention projection groups to finetune, e.g. "to_k" or
    "to_q|to_k". Matching is reproducible from the pattern string alone."""

    pattern: str

    @property
    def groups(self) -> tuple[str, ...]:
        parts = tuple(p.strip() for p in self.pattern.split("|"))
        for p in parts:
            if p not in ATTN_GROUPS:
                raise ValueError(f"unknown projection group {p!r}")
        return parts

    def matches(self, name: str) -> bool:
        return any(f".cross_attn.{g}." in f".{name}" for g in self.groups)


def select_params(params: dict[str, Tensor], selector: ParamSelector) -> dict[str, Tensor]:
    """Subset view of the tree; tensors are shared, not copied."""
    subset = {n: t for n, t in params.items() if selector.matches(n)}
    if not subset:
        raise ValueError(f"selector {selector.pattern!r} matched nothing")
    return subset


def cross_attn_param_names(params: dict[str, Tensor]) -> list[str]:
    return sorted(n for n in params if ".cross_attn." in n)


# ---------------------------------------------------------------------------
# building blocks

def timestep_embedding(t: int, dim: int, timesteps: int) -> Tensor:
    """Sinusoidal embedding of an integer timestep."""
    if not 0 <= t < timesteps:
        raise ValueError(f"timestep {t} outside [0, {timesteps})")
    return Tensor(_sinusoid(np.array([t]), dim)[0])


def _sinusoid(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = t[:, None].astype(np.float64) * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _rmsnorm(x: Tensor) -> Tensor:
    ms = ad.rmean(ad.mul(x, x), axis=-1)
    denom = ad.expand(ad.sqrt(ad.add(ms, 1e-6)), x.ndim - 1, x.shape[-1])
    return ad.div(x, denom)


def _heads(x: Tensor, num_heads: int) -> Tensor:
    b, p, d = x.shape
    return ad.transpose(ad.reshape(x, (b, p, num_heads, d // num_heads)), (0, 2, 1, 3))


def _unheads(x: Tensor) -> Tensor:
    b, h, p, hd = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, p, h * hd))


def _attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int) -> tuple[Tensor, Tensor]:
    """Multi-head scaled dot-product; returns (tokens, head-averaged weights)."""
    head_dim = q.shape[-1] // num_heads
    # scaling q (small) instead of the scores (huge) saves full passes
    # over the [B, H, P, P] arrays in both directions
    qh = _heads(ad.scale(q, 1.0 / np.sqrt(head_dim)), num_heads)
    kh = _heads(k, num_heads)
    vh = _heads(v, num_heads)
    scores = ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2)))
    attn = ad.softmax(scores, axis=-1)
    out = _unheads(ad.matmul(attn, vh))
    return out, ad.rmean(attn, axis=1)


def cross_attention(x_tokens: Tensor, cond: Tensor, weights: dict[str, Tensor],
                    num_heads: int) -> tuple[Tensor, Tensor]:
    """One cross-attention layer: image tokens query the prompt embeddings.

    ``x_tokens`` is [..., P, hidden]; ``cond`` is [..., N, text_dim]; the
    returned map is the post-softmax attention averaged over heads,
    [..., P, N].
    """
    squeeze = x_tokens.ndim == 2
    if squeeze:
        x_tokens = ad.reshape(x_tokens, (1,) + x_tokens.shape)
        cond = ad.reshape(cond, (1,) + cond.shape)
    q = ad.matmul(x_tokens, weights["to_q"])
    k = ad.matmul(cond, weights["to_k"])
    v = ad.matmul(cond, weights["to_v"])
    out, amap = _attention(q, k, v, num_heads)
    out = ad.matmul(out, weights["to_out"])
    if squeeze:
        out = ad.reshape(out, out.shape[1:])
        amap = ad.reshape(amap, amap.shape[1:])
    return out, amap


def _patchify(z: Tensor, config: ModelConfig) -> Tensor:
    b = z.shape[0]
    g, p, c = config.grid, config.patch_size, config.channels
    z = ad.reshape(z, (b, g, p, g, p, c))
    z = ad.transpose(z, (0, 1, 3, 2, 4, 5))
    return ad.reshape(z, (b, g * g, p * p * c))


def _unpatchify(tokens: Tensor, config: ModelConfig) -> Tensor:
    b = tokens.shape[0]
    g, p, c = config.grid, config.patch_size, config.channels
    z = ad.reshape(tokens, (b, g, g, p, p, c))
    z = ad.transpose(z, (0, 1, 3, 2, 4, 5))
    return ad.reshape(z, (b, g * p, g * p, c))


def forward(params: dict[str, Tensor], config: ModelConfig, z_t: Tensor,
            t, cond: Tensor, record: bool = False,
            stack: AttentionStack | None = None):
    """Predict the noise in ``z_t`` given timestep ``t`` and conditioning.

    Accepts a single sample ([H, W, C] with scalar ``t`` and [N, text_dim]
    cond) or a batch with leading dim B and per-sample timesteps. When
    ``record`` is set, every cross-attention layer appends its head-averaged
    map to the returned AttentionStack; recording never changes the output.
    """
    single = z_t.ndim == 3
    if single:
        z_t = ad.reshape(z_t, (1,) + z_t.shape)
        cond = ad.reshape(cond, (1,) + cond.shape)
        t_arr = np.array([int(t)])
    else:
        t_arr = np.asarray(t, dtype=np.int64)
        if t_arr.ndim == 0:
            t_arr = np.full(z_t.shape[0], int(t_arr))
    if np.any(t_arr < 0) or np.any(t_arr >= config.timesteps):
        raise ValueError(f"timestep outside [0, {config.timesteps})")
    b = z_t.shape[0]

    x = _patchify(z_t, config)
    x = ad.bias_add(ad.matmul(x, params["patch_embed.weight"]), params["patch_embed.bias"])
    x = ad.add(x, ad.expand(params["pos_embed"], 0, b))

    temb = Tensor(_sinusoid(t_arr, config.hidden_dim))
    temb = ad.bias_add(ad.matmul(temb, params["time_embed.w1"]), params["time_embed.b1"])
    temb = ad.silu(ad.bias_add(ad.matmul(ad.silu(temb), params["time_embed.w2"]),
                               params["time_embed.b2"]))

    if record and stack is None:
        stack = AttentionStack()
    rec_t = int(t_arr[0])

    for i in range(config.num_blocks):
        # every block re-reads the noise level
        tb = ad.bias_add(ad.matmul(temb, params[f"block.{i}.time.weight"]),
                         params[f"block.{i}.time.bias"])
        x = ad.add(x, ad.expand(tb, 1, config.num_patches))

        h = _rmsnorm(x)
        q = ad.matmul(h, params[f"block.{i}.self_attn.to_q.weight"])
        k = ad.matmul(h, params[f"block.{i}.self_attn.to_k.weight"])
        v = ad.matmul(h, params[f"block.{i}.self_attn.to_v.weight"])
        sa, _ = _attention(q, k, v, config.num_heads)
        x = ad.add(x, ad.matmul(sa, params[f"block.{i}.self_attn.to_out.weight"]))

        h = _rmsnorm(x)
        ca_weights = {g: params[f"block.{i}.cross_attn.{g}.weight"] for g in ATTN_GROUPS}
        ca, amap = cross_attention(h, cond, ca_weights, config.num_heads)
        x = ad.add(x, ca)
        if record:
            stack.add(layer=i, timestep=rec_t, amap=amap)

        h = _rmsnorm(x)
        h = ad.silu(ad.bias_add(ad.matmul(h, params[f"block.{i}.mlp.w1"]),
                                params[f"block.{i}.mlp.b1"]))
        x = ad.add(x, ad.bias_add(ad.matmul(h, params[f"block.{i}.mlp.w2"]),
                                  params[f"block.{i}.mlp.b2"]))

    x = _rmsnorm(x)
    eps = ad.bias_add(ad.matmul(x, params["unpatch.weight"]), params["unpatch.bias"])
    eps = _unpatchify(eps, config)
    if np.any(np.isnan(eps.data)):
        raise FloatingPointError("NaN in denoiser output")
    if single:
        eps = ad.reshape(eps, eps.shape[1:])
        if record:
            for rec in stack.records[-config.num_blocks:]:
                rec.map = ad.reshape(rec.map, rec.map.shape[1:])
    return (eps, stack) if record else (eps, None)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, params: dict[str, Tensor], config: ModelConfig) -> None:
    """Write magic + version + config JSON + named float64 arrays (LE)."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg = json.dumps(config.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    names = sorted(params)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        raw = name.encode()
        data = params[name].data
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", data.ndim))
        for s in data.shape:
            buf.write(struct.pack("<I", s))
        buf.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, Tensor], ModelConfig]:
    with open(path, "rb") as fh:
        raw = fh.read()
    buf = io.BytesIO(raw)
    if buf.read(4) != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", buf.read(4))
    config = ModelConfig.from_dict(json.loads(buf.read(cfg_len).decode()))
    expected = _param_shapes(config)
    (count,) = struct.unpack("<I", buf.read(4))
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", buf.read(2))
        name = buf.read(name_len).decode()
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = tuple(struct.unpack("<I", buf.read(4))[0] for _ in range(ndim))
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(buf.read(8 * n), dtype="<f8").reshape(shape).copy()
        if name not in expected or expected[name] != shape:
            raise ValueError(f"checkpoint entry {name} has shape {shape}, "
                             f"expected {expected.get(name)}")
        params[name] = Tensor(data, requires_grad=True)
    missing = set(expected) - set(params)
    if missing:
        raise ValueError(f"checkpoint missing parameters: {sorted(missing)[:3]}...")
    return params, config


def checkpoint_digest(params: dict[str, Tensor]) -> str:
    import hashlib
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data, dtype="<f8").tobytes())
    return h.hexdigest()


def param_delta_report(params_a: dict[str, Tensor], params_b: dict[str, Tensor]
                       ) -> list[tuple[str, float]]:
    """Per logical unit, sum|b-a| / sum|a|, sorted by relative change."""
    if set(params_a) != set(params_b):
        raise ValueError("parameter trees have different structure")
    groups: dict[str, list[str]] = {}
    for name in params_a:
        unit = name
        for suffix in (".weight", ".bias"):
            if unit.endswith(suffix):
                unit = unit[: -len(suffix)]
        groups.setdefault(unit, []).append(name)
    rows = []
    for unit, names in groups.items():
        delta = sum(np.abs(params_b[n].data - params_a[n].data).sum() for n in names)
        base = sum(np.abs(params_a[n].data).sum() for n in names)
        rows.append((unit, float(delta / base) if base > 0 else 0.0))
    rows.sort(key=lambda r: (-r[1], r[0]))
    return rows
