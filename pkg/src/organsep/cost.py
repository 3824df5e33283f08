"""Analytic compute and activation-memory estimates for the image encoder."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

from .assets import read_json
from .model import ModelConfig

# "mac": one multiply-accumulate counted as one FLOP (the convention of common
# layer-wise profilers); "2mac": multiply and add counted separately.
CONVENTIONS = {"mac": 1, "2mac": 2}


@dataclass(frozen=True)
class EncoderCostConfig:
    input_dims: tuple[int, int, int] = (192, 192, 32)
    patch_dims: tuple[int, int, int] = (16, 16, 4)
    channels: int = 3
    depth: int = 18
    width: int = 768
    heads: int = 12
    mlp_ratio: float = 4.0
    batch_size: int = 1
    bytes_per_value: int = 4
    name: str = "organ-separated"

    def __post_init__(self):
        vals = (*self.input_dims, *self.patch_dims, self.channels, self.width, self.heads, self.batch_size, self.bytes_per_value)
        if min(vals) <= 0 or self.depth < 0 or self.mlp_ratio <= 0:
            raise ValueError("cost config values must be positive")
        if any(i % p for i, p in zip(self.input_dims, self.patch_dims)):
            raise ValueError(f"input {self.input_dims} not divisible by patch {self.patch_dims}")

    @property
    def tokens(self) -> int:
        return math.prod(i // p for i, p in zip(self.input_dims, self.patch_dims))

    @property
    def token_len(self) -> int:
        return math.prod(self.patch_dims) * self.channels

    @classmethod
    def from_model(cls, config: ModelConfig, batch_size: int = 1, bytes_per_value: int = 4) -> "EncoderCostConfig":
        return cls(
            input_dims=config.pooled,
            patch_dims=config.patch,
            channels=config.channels,
            depth=config.depth,
            width=config.width,
            heads=config.heads,
            mlp_ratio=config.mlp_ratio,
            batch_size=batch_size,
            bytes_per_value=bytes_per_value,
            name=config.name,
        )


def mac_terms(cfg: EncoderCostConfig) -> dict[str, int]:
    """Multiply-accumulate counts per sample, by component.

    The class token adds one position to a sequence of ``tokens`` and is left
    out; norms, softmax and activations are excluded.
    """
    N, W, L = cfg.tokens, cfg.width, cfg.token_len
    hidden = int(cfg.width * cfg.mlp_ratio)
    return {
        "patch_embed": N * L * W,
        "qkv_out": cfg.depth * 4 * N * W * W,
        "attention": cfg.depth * 2 * N * N * W,
        "mlp": cfg.depth * 2 * N * W * hidden,
        # key and value maps, one query's scores and weighted sum
        "pooling": 2 * N * W * W + 2 * N * W,
    }


def vit_flops(cfg: EncoderCostConfig, convention: str = "mac") -> float:
    """GFLOPs of one forward pass for one sample."""
    if convention not in CONVENTIONS:
        raise ValueError(f"convention must be one of {sorted(CONVENTIONS)}")
    return CONVENTIONS[convention] * sum(mac_terms(cfg).values()) / 1e9


def memory_terms(cfg: EncoderCostConfig, batch: int | None = None) -> dict[str, int]:
    """Bytes of activations kept for the backward pass, by component.

    Per block: the two norm outputs, q/k/v, attention output, projection
    output, MLP input/hidden pre- and post-activation and output; plus the
    attention logits and probabilities per head.
    """
    b = cfg.batch_size if batch is None else batch
    N, W, L = cfg.tokens, cfg.width, cfg.token_len
    hidden = int(cfg.width * cfg.mlp_ratio)
    per_value = b * cfg.bytes_per_value
    return {
        "patch": per_value * N * (L + W),
        "linear": per_value * cfg.depth * N * (8 * W + 2 * hidden),
        "attention": per_value * cfg.depth * 2 * cfg.heads * N * N,
    }


def memory_estimate(cfg: EncoderCostConfig, batch: int | None = None) -> int:
    return sum(memory_terms(cfg, batch).values())


# ------------------------------------------------------------------ report

COLUMNS = ("Model", "Input Resolution", "GFLOPs", "GPU Type", "GPUs", "Batch Size", "Batches Per GPU")


def _resolution(dims) -> str:
    return " x ".join(str(d) for d in dims)


def reference_rows(assets_dir=None) -> list[list[str]]:
    rows = []
    for r in read_json("table1_reference.json", assets_dir):
        rows.append([
            r["model"], _resolution(r["input_resolution"]), f"{r['gflops']:,}", r["gpu_type"],
            str(r["gpus"]), str(r["batch_size"]), str(r["batch_per_gpu"]),
        ])
    return rows


def config_row(cfg: EncoderCostConfig, crop_dims=None, convention="mac", device="CPU", devices=1, batch_size=64) -> list[str]:
    return [
        cfg.name,
        _resolution(crop_dims or cfg.input_dims),
        f"{vit_flops(cfg, convention):.1f}",
        device,
        str(devices),
        str(batch_size),
        str(batch_size // devices),
    ]


def render_table(rows: list[list[str]], fmt: str = "markdown") -> str:
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        writer.writerows(rows)
        return buf.getvalue()
    lines = ["| " + " | ".join(COLUMNS) + " |", "|" + "---|" * len(COLUMNS)]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"
