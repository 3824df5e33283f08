"""3D patch tokenizer, image/text encoders and the dual-encoder wrapper."""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import asdict, dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

DTYPES = {"float64": torch.float64, "float32": torch.float32}


@dataclass(frozen=True)
class ModelConfig:
    name: str = "desk"
    crop: tuple[int, int, int] = (192, 192, 32)
    channels: int = 3
    # fixed average-pool stem applied before patching; (1, 1, 1) disables it
    input_pool: tuple[int, int, int] = (4, 4, 2)
    patch: tuple[int, int, int] = (8, 8, 4)
    depth: int = 4
    width: int = 192
    heads: int = 4
    mlp_ratio: float = 4.0
    embed_dim: int = 64
    text_vocab: int = 4096
    text_width: int = 128
    text_depth: int = 2
    text_heads: int = 4
    max_text_len: int = 512
    dtype: str = "float64"
    # standardize tokens with training-set statistics (per-slot mean, one global scale)
    input_norm: bool = True

    def __post_init__(self):
        for name in ("crop", "input_pool", "patch"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.width % self.heads or self.text_width % self.text_heads:
            raise ValueError("width must be divisible by the number of heads")
        for c, p, q in zip(self.crop, self.input_pool, self.patch):
            if c % p or (c // p) % q:
                raise ValueError(f"crop {self.crop} not divisible by pool {self.input_pool} and patch {self.patch}")

    @property
    def pooled(self) -> tuple[int, int, int]:
        return tuple(c // p for c, p in zip(self.crop, self.input_pool))

    @property
    def grid(self) -> tuple[int, int, int]:
        return tuple(s // q for s, q in zip(self.pooled, self.patch))

    @property
    def n_tokens(self) -> int:
        return math.prod(self.grid)

    @property
    def token_len(self) -> int:
        return math.prod(self.patch) * self.channels

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        return cls(**d)


PRESETS = {
    "desk": ModelConfig(),
    "paper": ModelConfig(
        name="paper",
        input_pool=(1, 1, 1),
        patch=(16, 16, 4),
        depth=18,
        width=768,
        heads=12,
        embed_dim=768,
        input_norm=False,
        text_vocab=4096,
        text_width=256,
        text_depth=2,
        text_heads=4,
    ),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


# ------------------------------------------------------------------ patches

_PATCHIFY = "... (gx px) (gy py) (gz pz) c -> ... (gz gy gx) (pz py px c)"
_UNPATCHIFY = "... (gz gy gx) (pz py px c) -> ... (gx px) (gy py) (gz pz) c"


def patchify(x, patch: tuple[int, int, int]):
    """(..., X, Y, Z, C) -> (..., tokens, token_len); tokens ordered x-fastest, then y, then z."""
    X, Y, Z = x.shape[-4:-1]
    px, py, pz = patch
    if X % px or Y % py or Z % pz:
        raise ValueError(f"volume {(X, Y, Z)} not divisible by patch {patch}")
    return rearrange(x, _PATCHIFY, px=px, py=py, pz=pz)


def unpatchify(tokens, patch: tuple[int, int, int], grid: tuple[int, int, int], channels: int = 3):
    px, py, pz = patch
    gx, gy, gz = grid
    if tokens.shape[-2] != gx * gy * gz or tokens.shape[-1] != px * py * pz * channels:
        raise ValueError(f"token array {tuple(tokens.shape[-2:])} does not match grid {grid} / patch {patch}")
    return rearrange(tokens, _UNPATCHIFY, gx=gx, gy=gy, gz=gz, px=px, py=py, pz=pz, c=channels)


def pool_input(x: torch.Tensor, pool: tuple[int, int, int]) -> torch.Tensor:
    """Average-pool (B, X, Y, Z, C) by ``pool`` along the spatial axes."""
    if tuple(pool) == (1, 1, 1):
        return x
    y = F.avg_pool3d(x.permute(0, 4, 1, 2, 3), kernel_size=tuple(pool))
    return y.permute(0, 2, 3, 4, 1)


def tokenize_crops(windowed, config: ModelConfig) -> torch.Tensor:
    """Windowed crops (B, 192, 192, 32, 3) -> patch tokens (B, n_tokens, token_len)."""
    x = torch.as_tensor(np.asarray(windowed) if not torch.is_tensor(windowed) else windowed)
    if x.ndim == 4:
        x = x[None]
    if tuple(x.shape[1:4]) == config.crop:
        x = pool_input(x.to(config.torch_dtype), config.input_pool)
    elif tuple(x.shape[1:4]) != config.pooled:
        raise ValueError(f"crop shape {tuple(x.shape[1:4])} matches neither {config.crop} nor {config.pooled}")
    return patchify(x.to(config.torch_dtype), config.patch)


def sample_mask(total: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted indices of a uniformly random subset of size round(ratio * total)."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    k = int(round(ratio * total))
    return np.sort(rng.permutation(total)[:k])


def visible_indices(total: int, masked: np.ndarray) -> np.ndarray:
    keep = np.ones(total, dtype=bool)
    keep[masked] = False
    return np.flatnonzero(keep)


# ------------------------------------------------------------------ blocks


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x, key_mask=None):
        B, N, W = x.shape
        q, k, v = rearrange(self.qkv(x), "b n (three h d) -> three b h n d", three=3, h=self.heads)
        logits = q @ k.transpose(-1, -2) / math.sqrt(W // self.heads)
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        out = logits.softmax(-1) @ v
        return self.proj(rearrange(out, "b h n d -> b n (h d)"))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, width: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(width * mlp_ratio)
        self.norm1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, width))

    def forward(self, x, key_mask=None):
        x = x + self.attn(self.norm1(x), key_mask)
        return x + self.mlp(self.norm2(x))


class AttentionPool(nn.Module):
    """One learned query attending over every token; keys and values are bias-free maps."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.query = nn.Parameter(torch.zeros(width))
        self.k_map = nn.Linear(width, width, bias=False)
        self.v_map = nn.Linear(width, width, bias=False)

    def forward(self, x):
        W = x.shape[-1]
        q = self.query.view(self.heads, 1, W // self.heads)
        k = rearrange(self.k_map(x), "b n (h d) -> b h n d", h=self.heads)
        v = rearrange(self.v_map(x), "b n (h d) -> b h n d", h=self.heads)
        attn = (q @ k.transpose(-1, -2) / math.sqrt(W // self.heads)).softmax(-1)
        return rearrange(attn @ v, "b h 1 d -> b (h d)")


class AxisPositions(nn.Module):
    """Learned positional embedding factorized as a sum of per-axis tables."""

    def __init__(self, grid: tuple[int, int, int], width: int):
        super().__init__()
        self.grid = grid
        self.x = nn.Parameter(torch.zeros(grid[0], width))
        self.y = nn.Parameter(torch.zeros(grid[1], width))
        self.z = nn.Parameter(torch.zeros(grid[2], width))

    def table(self) -> torch.Tensor:
        full = self.z[:, None, None, :] + self.y[None, :, None, :] + self.x[None, None, :, :]
        return full.reshape(-1, full.shape[-1])


def gather_tokens(x: torch.Tensor, index: torch.Tensor | None) -> torch.Tensor:
    if index is None:
        return x
    return torch.gather(x, 1, index[..., None].expand(-1, -1, x.shape[-1]))


class ImageEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        W = config.width
        self.patch_embed = nn.Linear(config.token_len, W)
        self.pos = AxisPositions(config.grid, W)
        self.cls = nn.Parameter(torch.zeros(W))
        self.cls_pos = nn.Parameter(torch.zeros(W))
        self.blocks = nn.ModuleList(Block(W, config.heads, config.mlp_ratio) for _ in range(config.depth))
        self.norm = nn.LayerNorm(W)
        self.pool = AttentionPool(W, config.heads)
        # identity until fit_input_norm is called; saved with the weights
        self.register_buffer("input_mean", torch.zeros(config.n_tokens, config.token_len))
        self.register_buffer("input_scale", torch.ones(()))

    @torch.no_grad()
    def fit_input_norm(self, batches) -> None:
        """Set the per-slot mean and the global spread from full-grid tokens.

        ``batches`` is one (N, n_tokens, token_len) tensor or an iterable of them;
        sums are accumulated in float64 so the whole set never sits in memory.
        """
        if not self.config.input_norm:
            raise ValueError("input_norm is disabled for this model config")
        if torch.is_tensor(batches):
            batches = [batches]
        total = torch.zeros(self.input_mean.shape, dtype=torch.float64)
        sq, n = 0.0, 0
        for b in batches:
            t = torch.as_tensor(b).to(torch.float64)
            if t.ndim != 3 or t.shape[1:] != self.input_mean.shape:
                raise ValueError(f"expected (N, {self.config.n_tokens}, {self.config.token_len}) tokens, got {tuple(t.shape)}")
            total += t.sum(0)
            sq += float(t.square().sum())
            n += t.shape[0]
        if n == 0:
            raise ValueError("no tokens to fit the input statistics on")
        mean = total / n
        spread = math.sqrt(max(sq / (n * mean.numel()) - float(mean.square().mean()), 0.0))
        self.input_mean.copy_(mean)
        self.input_scale.fill_(spread if spread > 0 else 1.0)

    def forward(self, tokens: torch.Tensor, token_index: torch.Tensor | None = None):
        """Encode patch tokens.

        ``token_index`` (B, K) names the grid slot of each supplied token; it is
        used both for masked encoding (only visible tokens passed) and for
        arbitrary token orders. Without it tokens must be the full grid in order.
        Returns (token states (B, 1+K, W), pooled (B, W)).
        """
        if tokens.shape[-1] != self.config.token_len:
            raise ValueError(f"token length {tokens.shape[-1]} != {self.config.token_len}")
        B, K, _ = tokens.shape
        pos = self.pos.table()
        if token_index is None:
            if K != self.config.n_tokens:
                raise ValueError(f"expected {self.config.n_tokens} tokens, got {K}")
            pos = pos.expand(B, -1, -1)
        else:
            pos = gather_tokens(pos.expand(B, -1, -1), token_index)
        if self.config.input_norm:
            mean = self.input_mean.expand(B, -1, -1)
            if token_index is not None:
                mean = gather_tokens(mean, token_index)
            tokens = (tokens - mean) / self.input_scale
        x = self.patch_embed(tokens) + pos
        cls = (self.cls + self.cls_pos).expand(B, 1, -1)
        x = torch.cat([cls, x], dim=1)
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return x, self.pool(x)


# -------------------------------------------------------------------- text

_WORD = re.compile(r"\w+|[^\w\s]")
EMPTY_TOKEN = 0


@lru_cache(maxsize=1 << 16)
def _hash_token(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


def text_token_ids(text: str, vocab: int, max_len: int = 512) -> list[int]:
    """Lowercased word/punctuation tokens hashed into rows 1..vocab-1 (row 0 marks empty text)."""
    words = _WORD.findall(text.lower())[:max_len]
    if not words:
        return [EMPTY_TOKEN]
    return [1 + _hash_token(w) % (vocab - 1) for w in words]


class TextEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        W = config.text_width
        self.embed = nn.Embedding(config.text_vocab, W)
        self.pos = nn.Parameter(torch.zeros(config.max_text_len, W))
        self.blocks = nn.ModuleList(Block(W, config.text_heads) for _ in range(config.text_depth))
        self.norm = nn.LayerNorm(W)

    def batch_ids(self, texts: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
        ids = [text_token_ids(t, self.config.text_vocab, self.config.max_text_len) for t in texts]
        L = max(len(i) for i in ids)
        out = torch.zeros(len(ids), L, dtype=torch.long)
        valid = torch.zeros(len(ids), L, dtype=torch.bool)
        for r, row in enumerate(ids):
            out[r, : len(row)] = torch.tensor(row)
            valid[r, : len(row)] = True
        return out, valid

    def forward(self, texts: list[str]) -> torch.Tensor:
        ids, valid = self.batch_ids(texts)
        x = self.embed(ids) + self.pos[: ids.shape[1]]
        for block in self.blocks:
            x = block(x, key_mask=valid)
        x = self.norm(x)
        w = valid.to(x.dtype)[..., None]
        return (x * w).sum(1) / w.sum(1)


# ------------------------------------------------------------- dual encoder


def project_normalize(raw: torch.Tensor, projection: nn.Module | None = None) -> torch.Tensor:
    """Project then scale each row to unit L2 norm."""
    y = raw if projection is None else projection(raw)
    norm = torch.linalg.vector_norm(y, dim=-1, keepdim=True)
    if bool((norm == 0).any()):
        raise ValueError("cannot normalize a zero vector")
    return y / norm


LOGIT_SCALE_INIT = math.log(1 / 0.07)
LOGIT_SCALE_MAX = math.log(100.0)


class DualEncoder(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        with torch.random.fork_rng(devices=[]):
            self.image = ImageEncoder(config)
            self.text = TextEncoder(config)
            self.image_proj = nn.Linear(config.width, config.embed_dim, bias=False)
            self.text_proj = nn.Linear(config.text_width, config.embed_dim, bias=False)
        self.logit_scale = nn.Parameter(torch.tensor(LOGIT_SCALE_INIT))
        self.logit_bias = nn.Parameter(torch.tensor(-10.0))
        init_parameters(self, seed)
        self.to(config.torch_dtype)

    def scale(self) -> torch.Tensor:
        return self.logit_scale.clamp(max=LOGIT_SCALE_MAX).exp()

    def encode_image(self, tokens, token_index=None):
        return self.image(tokens, token_index)

    def embed_image(self, tokens: torch.Tensor) -> torch.Tensor:
        _, pooled = self.image(tokens)
        return project_normalize(pooled, self.image_proj)

    def embed_text(self, texts: list[str]) -> torch.Tensor:
        return project_normalize(self.text(texts), self.text_proj)


def init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministic initialization from a private generator (global RNG untouched)."""
    g = torch.Generator().manual_seed(int(seed))
    norms = {id(p) for m in module.modules() if isinstance(m, nn.LayerNorm) for p in m.parameters()}
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name in ("logit_scale", "logit_bias"):
                continue
            if id(p) in norms:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * 0.02)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def image_tower_parameters(model: DualEncoder) -> int:
    return count_parameters(model.image) + count_parameters(model.image_proj)


def parameter_count(config: ModelConfig) -> dict[str, int]:
    """Parameter counts by part, computed without allocating the model."""
    W, T = config.width, config.text_width
    hidden = int(W * config.mlp_ratio)
    block = lambda w, h: 4 * w + (3 * w * w + 3 * w) + (w * w + w) + (w * h + h) + (h * w + w)  # noqa: E731
    image = (
        config.token_len * W + W
        + sum(config.grid) * W
        + 2 * W
        + config.depth * block(W, hidden)
        + 2 * W
        + W + 2 * W * W
    )
    text = config.text_vocab * T + config.max_text_len * T + config.text_depth * block(T, int(T * 4.0)) + 2 * T
    proj = W * config.embed_dim + T * config.embed_dim
    return {
        "image": image,
        "text": text,
        "projection": proj,
        "logit": 2,
        "total": image + text + proj + 2,
    }


# -------------------------------------------------------------- checkpoints


def save_checkpoint(directory: str | Path, modules: dict[str, nn.Module], metadata: dict) -> None:
    """Write ``checkpoint.json`` (metadata + tensor manifest) and ``params.bin`` (LE float64)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest, chunks, offset = [], [], 0
    for prefix in sorted(modules):
        state = modules[prefix].state_dict()
        for name in sorted(state):
            arr = state[name].detach().cpu().to(torch.float64).numpy()
            blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            manifest.append({"name": f"{prefix}.{name}", "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
            chunks.append(blob)
            offset += len(blob)
    (directory / "params.bin").write_bytes(b"".join(chunks))
    meta = {**metadata, "tensors": manifest, "format": "le-float64"}
    (directory / "checkpoint.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def read_checkpoint(directory: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    directory = Path(directory)
    meta = json.loads((directory / "checkpoint.json").read_text())
    blob = (directory / "params.bin").read_bytes()
    tensors = {}
    for t in meta["tensors"]:
        arr = np.frombuffer(blob, dtype="<f8", count=t["nbytes"] // 8, offset=t["offset"])
        tensors[t["name"]] = arr.reshape(t["shape"])
    return meta, tensors


def load_into(module: nn.Module, tensors: dict[str, np.ndarray], prefix: str, strict: bool = True) -> None:
    state = module.state_dict()
    incoming = {k[len(prefix) + 1 :]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
    missing = sorted(set(state) - set(incoming))
    if strict and missing:
        raise KeyError(f"checkpoint lacks {missing[:3]} for {prefix!r}")
    with torch.no_grad():
        for name, value in incoming.items():
            if name in state:
                state[name].copy_(torch.from_numpy(np.array(value)).to(state[name].dtype))


def load_model(directory: str | Path, dtype: str | None = None) -> tuple[DualEncoder, dict]:
    meta, tensors = read_checkpoint(directory)
    config = ModelConfig.from_json(meta["model"])
    if dtype:
        config = replace(config, dtype=dtype)
    model = DualEncoder(config, seed=meta.get("seed", 0))
    load_into(model, tensors, "model")
    return model, meta
