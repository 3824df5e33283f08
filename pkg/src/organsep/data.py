"""Corpus access for training and evaluation: organ crops as cached patch tokens."""

from __future__ import annotations

import ctypes
import functools
import logging
import sys
from collections import defaultdict
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, tokenize_crops
from .volume import CROP_Z, SegMask, Volume, apply_windowing, extract_organ_crops, load_mask, load_volume, organ_bbox

log = logging.getLogger(__name__)

CropKey = tuple[str, str, str]  # (case_id, series_id, organ)


@functools.cache
def _libc():
    if not sys.platform.startswith("linux"):
        return None
    try:
        return ctypes.CDLL("libc.so.6")
    except OSError:
        return None


def release_heap() -> None:
    """Hand freed heap pages back to the OS.

    The multi-megabyte per-crop temporaries otherwise fragment the glibc heap,
    and resident memory grows by many times the size of the token cache.
    """
    libc = _libc()
    if libc is not None and hasattr(libc, "malloc_trim"):
        libc.malloc_trim(0)


def pair_key(record: dict) -> CropKey:
    return (record["case_id"], record["series_id"], record["organ"])


def _slab(volume: Volume, mask: SegMask, organ: str) -> tuple[Volume, SegMask]:
    """The organ's z-range as a small volume and single-organ mask; crops cut from it
    match crops cut from the full series, since slices beyond the organ are padding."""
    box = organ_bbox(mask, organ)
    lid = mask.label_id(organ)
    z = slice(box.z0, box.z1 + 1)
    labels = np.where(mask.labels[:, :, z] == lid, lid, 0).astype(np.uint16)
    return Volume(volume.voxels[:, :, z].copy(), volume.spacing), SegMask(labels, mask.spacing, {lid: organ})


class CropStore:
    """Inference-mode crop windows per (case, series, organ), tokenized once and kept in memory.

    Tokens are stored as float32 and cast to the model dtype on access. Organs
    taller than one window also keep their z-slab of HU so that random training
    windows are cut without rereading the series.
    """

    def __init__(self, corpus_root: str | Path, config: ModelConfig, stride: int = CROP_Z):
        self.root = Path(corpus_root)
        self.config = config
        self.stride = stride
        self._cache: dict[CropKey, torch.Tensor] = {}
        self._present: dict[tuple[str, str], frozenset[str]] = {}
        self._slabs: dict[CropKey, tuple[Volume, SegMask]] = {}

    def __len__(self) -> int:
        return len(self._cache)

    def _load(self, case_id: str, series_id: str):
        sdir = self.root / case_id / "series" / series_id
        mask = load_mask(sdir / "mask.vvol")
        self._present[(case_id, series_id)] = frozenset(mask.present_organs())
        return load_volume(sdir / "image.vvol"), mask

    def _tokens(self, crops) -> torch.Tensor:
        windowed = np.stack([apply_windowing(c, dtype=np.float32) for c in crops])
        return tokenize_crops(torch.from_numpy(windowed), replace(self.config, dtype="float32"))

    def prefetch(self, keys) -> None:
        """Extract every missing key, loading each series once."""
        by_series = defaultdict(list)
        for key in sorted(set(keys)):
            if key not in self._cache:
                by_series[key[:2]].append(key[2])
        for (case_id, series_id), organs in sorted(by_series.items()):
            volume, mask = self._load(case_id, series_id)
            for organ in organs:
                crops = extract_organ_crops(volume, mask, organ, mode="infer", stride=self.stride)
                self._cache[(case_id, series_id, organ)] = self._tokens(crops)
                if len(crops) > 1:
                    self._slabs[(case_id, series_id, organ)] = _slab(volume, mask, organ)
            del volume, mask
            release_heap()

    def windows(self, key: CropKey) -> torch.Tensor:
        """(windows, tokens, token_len) in the model dtype."""
        if key not in self._cache:
            self.prefetch([key])
        return self._cache[key].to(self.config.torch_dtype)

    def train_tokens(self, key: CropKey, rng: np.random.Generator) -> torch.Tensor:
        """One training crop; organs taller than a window get a random z start."""
        cached = self.windows(key)
        if cached.shape[0] == 1:
            return cached[0]
        volume, mask = self._slabs[key] if key in self._slabs else self._load(key[0], key[1])
        crops = extract_organ_crops(volume, mask, key[2], mode="train", rng=rng)
        tokens = self._tokens(crops)[0].to(self.config.torch_dtype)
        del volume, mask, crops
        release_heap()
        return tokens

    def present_organs(self, case_id: str, series_id: str) -> frozenset[str]:
        key = (case_id, series_id)
        if key not in self._present:
            sdir = self.root / case_id / "series" / series_id
            self._present[key] = frozenset(load_mask(sdir / "mask.vvol").present_organs())
        return self._present[key]
