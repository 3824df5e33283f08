"""Imaging-region classifier over organ volume fractions.

One-vs-rest gradient boosting of depth-2 regression trees on the logistic loss,
with exact split search over presorted feature columns.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from ..assets import organ_regions, organ_vocabulary
from .types import REGIONS


class UntrainedModelError(RuntimeError):
    pass


def _leaf(g: float, h: float, lam: float) -> float:
    return -g / (h + lam)


@dataclass
class _Split:
    gain: float
    feature: int
    threshold: float


def _best_split(order, X, g, h, member, lam, min_hess) -> _Split | None:
    """Exact best split for rows where ``member`` is true.

    ``order`` holds the column-wise argsort of ``X`` for the full training set.
    """
    n_feat = X.shape[1]
    k = int(member.sum())
    if k < 2:
        return None
    # member rows of each column in sorted order, shape (k, F)
    rows = order.T[member[order.T]].reshape(n_feat, k).T
    xs = X[rows, np.arange(n_feat)]
    GL = np.cumsum(g[rows], axis=0)[:-1]
    HL = np.cumsum(h[rows], axis=0)[:-1]
    G, H = float(g[member].sum()), float(h[member].sum())
    GR, HR = G - GL, H - HL
    valid = (xs[1:] > xs[:-1]) & (HL >= min_hess) & (HR >= min_hess)
    gain = GL**2 / (HL + lam) + GR**2 / (HR + lam) - G**2 / (H + lam)
    gain = np.where(valid, gain, -np.inf)
    i, f = divmod(int(np.argmax(gain)), n_feat)
    if not np.isfinite(gain[i, f]) or gain[i, f] <= 1e-12:
        return None
    return _Split(float(gain[i, f]), int(f), float((xs[i, f] + xs[i + 1, f]) / 2))


def _fit_tree(order, X, g, h, lam, min_hess, depth=2) -> dict:
    def grow(member, d):
        G, H = float(g[member].sum()), float(h[member].sum())
        if d == depth or member.sum() < 2:
            return _leaf(G, H, lam)
        split = _best_split(order, X, g, h, member, lam, min_hess)
        if split is None:
            return _leaf(G, H, lam)
        go_left = X[:, split.feature] <= split.threshold
        return {
            "f": split.feature,
            "t": split.threshold,
            "l": grow(member & go_left, d + 1),
            "r": grow(member & ~go_left, d + 1),
        }

    return grow(np.ones(X.shape[0], dtype=bool), 0)


def _predict_tree(tree, X: np.ndarray) -> np.ndarray:
    if not isinstance(tree, dict):
        return np.full(X.shape[0], tree)
    left = X[:, tree["f"]] <= tree["t"]
    out = np.empty(X.shape[0])
    out[left] = _predict_tree(tree["l"], X[left])
    out[~left] = _predict_tree(tree["r"], X[~left])
    return out


@dataclass
class RegionModel:
    regions: tuple[str, ...] = REGIONS
    n_rounds: int = 80
    learning_rate: float = 0.3
    reg_lambda: float = 1.0
    min_hess: float = 1.0
    base: dict[str, float] = field(default_factory=dict)
    trees: dict[str, list] = field(default_factory=dict)

    @property
    def trained(self) -> bool:
        return bool(self.trees)

    def fit(self, X: np.ndarray, Y: np.ndarray) -> "RegionModel":
        X = np.asarray(X, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64)
        order = np.argsort(X, axis=0, kind="stable")
        for j, region in enumerate(self.regions):
            y = Y[:, j]
            p0 = min(max(y.mean(), 1e-3), 1 - 1e-3)
            base = math.log(p0 / (1 - p0))
            F = np.full(len(y), base)
            trees = []
            for _ in range(self.n_rounds):
                p = 1.0 / (1.0 + np.exp(-F))
                g, h = p - y, p * (1 - p)
                tree = _fit_tree(order, X, g, h, self.reg_lambda, self.min_hess)
                tree = _scale(tree, self.learning_rate)
                trees.append(tree)
                F += _predict_tree(tree, X)
            self.base[region] = base
            self.trees[region] = trees
        return self

    def predict_proba(self, features: np.ndarray) -> dict[str, float] | np.ndarray:
        if not self.trained:
            raise UntrainedModelError("region model has not been trained")
        X = np.atleast_2d(np.asarray(features, dtype=np.float64))
        out = np.empty((X.shape[0], len(self.regions)))
        for j, region in enumerate(self.regions):
            F = np.full(X.shape[0], self.base[region])
            for tree in self.trees[region]:
                F += _predict_tree(tree, X)
            out[:, j] = 1.0 / (1.0 + np.exp(-F))
        if np.ndim(features) == 1:
            return dict(zip(self.regions, out[0].tolist()))
        return out

    def to_json(self) -> str:
        return json.dumps({"regions": list(self.regions), "base": self.base, "trees": self.trees}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RegionModel":
        d = json.loads(text)
        return cls(regions=tuple(d["regions"]), base=d["base"], trees=d["trees"])


def _scale(tree, lr):
    if not isinstance(tree, dict):
        return tree * lr
    return {**tree, "l": _scale(tree["l"], lr), "r": _scale(tree["r"], lr)}


def classify_region(features: np.ndarray, model: RegionModel) -> set[str]:
    """Regions whose one-vs-rest probability exceeds 0.5."""
    proba = model.predict_proba(np.asarray(features))
    if not np.any(features):
        return set()
    return {r for r, p in proba.items() if p > 0.5}


# scan coverages seen in practice: contiguous runs of the head-to-pelvis axis
COVERAGES = (
    ("head",),
    ("neck",),
    ("head", "neck"),
    ("chest",),
    ("neck", "chest"),
    ("chest", "abdomen"),
    ("abdomen",),
    ("abdomen", "pelvis"),
    ("pelvis",),
    ("chest", "abdomen", "pelvis"),
    ("neck", "chest", "abdomen", "pelvis"),
    ("head", "neck", "chest", "abdomen", "pelvis"),
)


def synthetic_region_dataset(n: int, seed: int, vocabulary=None, regions_of=None):
    """Labelled (features, region indicators) drawn from an anatomical prior.

    Each sample covers a contiguous run of regions; organs of covered regions are
    kept with a per-sample density, and organs of the adjacent regions leak in with
    small volumes (partial coverage at the scan edges).
    """
    vocab = vocabulary or organ_vocabulary()
    regions_of = regions_of or organ_regions()
    rng = np.random.default_rng(seed)
    by_region = {r: [i for i, o in enumerate(vocab) if regions_of.get(o) == r] for r in REGIONS}
    X = np.zeros((n, len(vocab)))
    Y = np.zeros((n, len(REGIONS)))
    for k in range(n):
        if rng.random() < 0.03:
            continue  # empty foreground, no region
        cov = COVERAGES[rng.integers(len(COVERAGES))]
        density = rng.uniform(0.0, 1.0) ** 2
        vols = np.zeros(len(vocab))
        for r in cov:
            idx = np.array(by_region[r])
            keep = idx[rng.random(len(idx)) < density]
            if keep.size == 0:
                keep = idx[rng.integers(len(idx), size=1)]
            vols[keep] = rng.lognormal(0.0, 0.7, size=keep.size)
        lo, hi = REGIONS.index(cov[0]), REGIONS.index(cov[-1])
        for adj in (lo - 1, hi + 1):
            if 0 <= adj < len(REGIONS) and rng.random() < 0.6:
                idx = np.array(by_region[REGIONS[adj]])
                leak = idx[rng.random(len(idx)) < 0.15]
                vols[leak] = 0.02 * rng.lognormal(0.0, 0.5, size=leak.size)
        X[k] = vols / vols.sum()
        Y[k, [REGIONS.index(r) for r in cov]] = 1.0
    return X, Y


@lru_cache(maxsize=4)
def default_region_model(seed: int = 0, n: int = 1000) -> RegionModel:
    X, Y = synthetic_region_dataset(n, seed)
    return RegionModel().fit(X, Y)
