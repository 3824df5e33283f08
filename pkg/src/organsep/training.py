"""Masked-reconstruction pretraining and contrastive volume-text training."""

from __future__ import annotations

import json
import math
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable

import numpy as np
import torch
from torch import nn

from .model import AxisPositions, Block, DualEncoder, ImageEncoder, ModelConfig, gather_tokens

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, batch_id, value):
        super().__init__(f"non-finite loss {value} at batch {batch_id}")
        self.batch_id = batch_id


# ------------------------------------------------------------------- config

_STAGE_DEFAULTS = {
    "mae": {"base_lr": 1.5e-4, "weight_decay": 0.05, "epochs": 20},
    "contrastive": {"base_lr": 1.0e-4, "weight_decay": 1e-4, "epochs": 24},
}


@dataclass
class TrainConfig:
    stage: str = "contrastive"
    base_lr: float | None = None
    weight_decay: float | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 64
    epochs: int | None = None
    schedule: str = "cosine"
    warmup_frac: float = 0.05
    grad_accum: int = 2
    grad_clip: float = 1.0
    mask_ratio: float = 0.75
    seed: int = 0
    loss: str = "infonce"  # or "sigmoid"
    mask_duplicate_texts: bool = False

    def __post_init__(self):
        if self.stage not in _STAGE_DEFAULTS:
            raise ValueError(f"unknown stage {self.stage!r}")
        for k, v in _STAGE_DEFAULTS[self.stage].items():
            if getattr(self, k) is None:
                setattr(self, k, v)
        self.betas = tuple(float(b) for b in self.betas)
        if self.schedule != "cosine":
            raise ValueError("only the cosine schedule is supported")
        if self.loss not in ("infonce", "sigmoid"):
            raise ValueError(f"unknown loss {self.loss!r}")
        positive = ("base_lr", "batch_size", "epochs", "grad_accum", "grad_clip")
        if any(getattr(self, k) <= 0 for k in positive) or self.weight_decay < 0:
            raise ValueError("training hyperparameters must be positive")
        if not 0 < self.mask_ratio < 1:
            raise ValueError("mask_ratio must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> dict:
        return asdict(self)


def cosine_lr(step: int, total: int, base_lr: float, warmup_frac: float = 0.05) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to 0 at ``total``."""
    warm = int(round(warmup_frac * total))
    if step < warm:
        return base_lr * (step + 1) / warm
    if total <= warm:
        return 0.0
    t = min(step, total) - warm
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / (total - warm)))


# -------------------------------------------------------------------- losses


def _check_pairs(image_embs: torch.Tensor, text_embs: torch.Tensor, min_n: int) -> None:
    if image_embs.shape != text_embs.shape or image_embs.ndim != 2:
        raise ValueError(f"embedding shapes differ: {tuple(image_embs.shape)} vs {tuple(text_embs.shape)}")
    if image_embs.shape[0] < min_n:
        raise ValueError(f"need at least {min_n} pairs, got {image_embs.shape[0]}")
    for name, e in (("image", image_embs), ("text", text_embs)):
        dev = (torch.linalg.vector_norm(e.detach(), dim=-1) - 1).abs().max()
        if dev > 1e-4:
            raise ValueError(f"{name} embeddings are not unit-norm (max deviation {float(dev):.2e})")


def duplicate_text_mask(texts: list[str]) -> torch.Tensor:
    """True at (i, j), i != j, when texts i and j are identical."""
    codes = {t: i for i, t in enumerate(dict.fromkeys(texts))}
    ids = torch.tensor([codes[t] for t in texts])
    same = ids[:, None] == ids[None, :]
    return same & ~torch.eye(len(texts), dtype=torch.bool)


def infonce_loss(image_embs, text_embs, logit_scale, ignore: torch.Tensor | None = None) -> torch.Tensor:
    """Symmetric cross-entropy over cosine logits with diagonal targets.

    ``logit_scale`` multiplies the similarities directly. ``ignore`` marks
    off-diagonal logits to exclude (for example duplicate texts).
    """
    _check_pairs(image_embs, text_embs, 2)
    logits = logit_scale * (image_embs @ text_embs.T)
    if ignore is not None:
        logits = logits.masked_fill(ignore, float("-inf"))
    target = torch.arange(logits.shape[0])
    rows = nn.functional.cross_entropy(logits, target)
    cols = nn.functional.cross_entropy(logits.T, target)
    return 0.5 * (rows + cols)


def sigmoid_pair_loss(image_embs, text_embs, logit_scale, bias) -> torch.Tensor:
    """Mean over all N^2 pairs of log(1 + exp(-z (s sim + b))), z = +1 on the diagonal."""
    _check_pairs(image_embs, text_embs, 1)
    n = image_embs.shape[0]
    z = 2 * torch.eye(n, dtype=image_embs.dtype) - 1
    logits = logit_scale * (image_embs @ text_embs.T) + bias
    return nn.functional.softplus(-z * logits).mean()


def mae_loss_from_prediction(pred: torch.Tensor, target: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
    """Mean squared error over the values of masked tokens only.

    ``masked`` is a boolean (B, N) token mask.
    """
    if not bool(masked.any()):
        raise ValueError("mask selects no tokens")
    sq = (pred - target) ** 2
    w = masked.to(sq.dtype)[..., None]
    return (sq * w).sum() / (w.sum() * sq.shape[-1])


class MaeDecoder(nn.Module):
    """Light decoder: mask tokens fill hidden slots, two blocks, linear head to patch values."""

    def __init__(self, config: ModelConfig, depth: int = 2, seed: int = 1):
        super().__init__()
        from .model import init_parameters

        dw = config.width // 2
        heads = config.heads if dw % config.heads == 0 else 1
        self.n_tokens = config.n_tokens
        with torch.random.fork_rng(devices=[]):
            self.embed = nn.Linear(config.width, dw)
            self.mask_token = nn.Parameter(torch.zeros(dw))
            self.pos = AxisPositions(config.grid, dw)
            self.blocks = nn.ModuleList(Block(dw, heads) for _ in range(depth))
            self.norm = nn.LayerNorm(dw)
            self.head = nn.Linear(dw, config.token_len)
        init_parameters(self, seed)
        self.to(config.torch_dtype)

    def forward(self, states: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
        """states (B, 1+K, W) from the encoder, visible (B, K) grid indices -> (B, N, token_len)."""
        x = self.embed(states)
        cls, vis = x[:, :1], x[:, 1:]
        B, _, D = x.shape
        full = self.mask_token.expand(B, self.n_tokens, D).clone()
        full = full.scatter(1, visible[..., None].expand(-1, -1, D), vis)
        full = torch.cat([cls, full + self.pos.table()], dim=1)
        for block in self.blocks:
            full = block(full)
        return self.head(self.norm(full))[:, 1:]


def mae_loss(tokens: torch.Tensor, masked_idx: torch.Tensor, encoder: ImageEncoder, decoder: MaeDecoder) -> torch.Tensor:
    """Reconstruction loss of masked patches given only the visible ones.

    ``masked_idx`` is (B, M) with the same M for every sample.
    """
    B, N, _ = tokens.shape
    if masked_idx.numel() == 0:
        raise ValueError("mask selects no tokens")
    masked = torch.zeros(B, N, dtype=torch.bool)
    masked.scatter_(1, masked_idx, True)
    visible = torch.stack([torch.nonzero(~m).squeeze(1) for m in masked])
    states, _ = encoder(gather_tokens(tokens, visible), visible)
    pred = decoder(states, visible)
    return mae_loss_from_prediction(pred, tokens, masked)


def batch_masks(batch: int, total: int, ratio: float, rng: np.random.Generator) -> torch.Tensor:
    from .model import sample_mask

    return torch.from_numpy(np.stack([sample_mask(total, ratio, rng) for _ in range(batch)]))


# ------------------------------------------------------------------ optimizer


def clip_grad_norm(params: Iterable[torch.Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g.double()) for g in grads])))
    if total > max_norm:
        coef = max_norm / total
        for g in grads:
            g.mul_(coef)
    return total


def make_optimizer(modules: list[nn.Module], config: TrainConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for m in modules:
        for p in m.parameters():
            if p.requires_grad:
                (decay if p.ndim >= 2 else no_decay).append(p)
    groups = [
        {"params": decay, "weight_decay": config.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=config.base_lr, betas=config.betas, eps=1e-8, foreach=False)


def train_step(
    micro_batches: list,
    loss_fn: Callable[[object], torch.Tensor],
    params: list[torch.Tensor],
    optimizer: torch.optim.Optimizer,
    config: TrainConfig,
    lr: float,
    batch_id=None,
) -> dict:
    """Accumulate gradients over micro-batches, clip, and apply one AdamW update."""
    optimizer.zero_grad(set_to_none=True)
    total = 0.0
    for k, mb in enumerate(micro_batches):
        loss = loss_fn(mb)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NonFiniteLossError(batch_id if batch_id is not None else k, value)
        (loss / len(micro_batches)).backward()
        total += value / len(micro_batches)
    grad_norm = clip_grad_norm(params, config.grad_clip)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    return {"loss": total, "grad_norm": grad_norm, "lr": lr}


def epoch_plan(n_items: int, config: TrainConfig, epoch: int, min_batch: int = 1) -> list[list[np.ndarray]]:
    """Optimizer steps of one epoch, each a list of micro-batch index arrays."""
    order = np.random.default_rng([config.seed, 7919, epoch]).permutation(n_items)
    micro = [order[i : i + config.batch_size] for i in range(0, n_items, config.batch_size)]
    micro = [m for m in micro if len(m) >= min_batch]
    return [micro[i : i + config.grad_accum] for i in range(0, len(micro), config.grad_accum)]


@dataclass
class MetricsLog:
    path: str | None = None
    rows: list[dict] = field(default_factory=list)

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


# ---------------------------------------------------------------- stage loops


def run_mae(
    model: DualEncoder,
    decoder: MaeDecoder,
    tokens_for: Callable[[np.ndarray], torch.Tensor],
    n_items: int,
    config: TrainConfig,
    metrics: MetricsLog | None = None,
    eval_tokens: torch.Tensor | None = None,
) -> dict:
    """Masked-reconstruction pretraining of the image encoder.

    ``tokens_for(indices)`` returns the patch tokens of those items. When
    ``eval_tokens`` is given, the loss on that fixed batch under fixed masks is
    recorded before training and after every epoch.
    """
    metrics = metrics or MetricsLog()
    cfg = model.config
    modules = [model.image, decoder]
    params = [p for m in modules for p in m.parameters()]
    opt = make_optimizer(modules, config)
    plans = [epoch_plan(n_items, config, e) for e in range(config.epochs)]
    total_steps = sum(len(p) for p in plans)
    eval_masks = None
    curve = []
    if eval_tokens is not None:
        eval_masks = batch_masks(eval_tokens.shape[0], cfg.n_tokens, config.mask_ratio, np.random.default_rng([config.seed, 4242]))
        curve.append(_eval_mae(model, decoder, eval_tokens, eval_masks))
    step = 0
    for epoch, plan in enumerate(plans):
        rng = np.random.default_rng([config.seed, 31, epoch])
        for micro in plan:
            def loss_fn(idx):
                toks = tokens_for(idx)
                return mae_loss(toks, batch_masks(len(idx), cfg.n_tokens, config.mask_ratio, rng), model.image, decoder)

            lr = cosine_lr(step, total_steps, config.base_lr, config.warmup_frac)
            row = train_step(micro, loss_fn, params, opt, config, lr, batch_id=f"epoch {epoch} step {step}")
            metrics.write({"stage": "mae", "epoch": epoch, "step": step, **row})
            step += 1
        if eval_tokens is not None:
            curve.append(_eval_mae(model, decoder, eval_tokens, eval_masks))
            metrics.write({"stage": "mae", "epoch": epoch, "eval_loss": curve[-1]})
    return {"steps": step, "eval_curve": curve}


def _eval_mae(model, decoder, tokens, masks) -> float:
    with torch.no_grad():
        return float(mae_loss(tokens, masks, model.image, decoder))


def contrastive_loss(model: DualEncoder, tokens: torch.Tensor, texts: list[str], config: TrainConfig) -> torch.Tensor:
    img = model.embed_image(tokens)
    txt = model.embed_text(texts)
    if config.loss == "sigmoid":
        return sigmoid_pair_loss(img, txt, model.scale(), model.logit_bias)
    ignore = duplicate_text_mask(texts) if config.mask_duplicate_texts else None
    return infonce_loss(img, txt, model.scale(), ignore)


def run_contrastive(
    model: DualEncoder,
    batch_for: Callable[[np.ndarray, np.random.Generator], tuple[torch.Tensor, list[str]]],
    n_items: int,
    config: TrainConfig,
    metrics: MetricsLog | None = None,
) -> dict:
    """Volume-text contrastive training of both towers.

    ``batch_for(indices, rng)`` returns (patch tokens, texts) of those pairs.
    """
    metrics = metrics or MetricsLog()
    params = [p for p in model.parameters()]
    opt = make_optimizer([model], config)
    min_batch = 2 if config.loss == "infonce" else 1
    plans = [epoch_plan(n_items, config, e, min_batch) for e in range(config.epochs)]
    total_steps = sum(len(p) for p in plans)
    step = 0
    for epoch, plan in enumerate(plans):
        rng = np.random.default_rng([config.seed, 53, epoch])
        for micro in plan:
            def loss_fn(idx):
                toks, texts = batch_for(idx, rng)
                return contrastive_loss(model, toks, texts, config)

            lr = cosine_lr(step, total_steps, config.base_lr, config.warmup_frac)
            row = train_step(micro, loss_fn, params, opt, config, lr, batch_id=f"epoch {epoch} step {step}")
            metrics.write({"stage": "contrastive", "epoch": epoch, "step": step, **row})
            step += 1
    return {"steps": step}


# ---------------------------------------------------------------- grad check


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: list[torch.Tensor],
    epsilon: float = 1e-3,
    n_samples: int = 24,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Max relative error between autograd and finite differences on sampled entries.

    Entries are drawn uniformly over the concatenation of ``params``. The
    relative error is |a - n| / max(|a|, |n|, floor).
    """
    for p in params:
        if p.dtype != torch.float64:
            raise TypeError("gradient checks require float64 parameters")
    analytic = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g for p, g in zip(params, analytic)]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(n_samples, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    with torch.no_grad():
        for f in flat:
            k = int(np.searchsorted(bounds, f, side="right"))
            i = int(f - (bounds[k - 1] if k else 0))
            view = params[k].view(-1)
            orig = view[i].item()
            values = []
            for step in (2, 1, -1, -2):
                view[i] = orig + step * epsilon
                values.append(float(loss_fn()))
            view[i] = orig
            # five-point central difference, truncation error O(epsilon^4)
            num = (-values[0] + 8 * values[1] - 8 * values[2] + values[3]) / (12 * epsilon)
            a = float(analytic[k].view(-1)[i])
            denom = max(abs(a), abs(num), floor)
            if denom > 0:
                worst = max(worst, abs(a - num) / denom)
    return worst
