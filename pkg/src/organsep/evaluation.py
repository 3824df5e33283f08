"""Zero-shot evaluation: organ-wise paired classification (F1) and finding-wise ranking (AUROC)."""

from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.stats import rankdata

from .assets import display_name, organ_vocabulary, negative_templates, positive_prompt_template
from .data import CropKey, CropStore
from .model import DualEncoder

log = logging.getLogger(__name__)

POSITIVE, NEGATIVE = "positive", "negative"


# ------------------------------------------------------------------ metrics


def _as_bool(values) -> np.ndarray:
    out = []
    for v in values:
        if isinstance(v, str):
            if v not in (POSITIVE, NEGATIVE, "pos", "neg"):
                raise ValueError(f"bad label {v!r}")
            out.append(v in (POSITIVE, "pos"))
        else:
            out.append(bool(v))
    return np.array(out, dtype=bool)


def f1_score(predictions, truths) -> float:
    """F1 of the positive class; 0 when there are no true positives."""
    p, t = _as_bool(predictions), _as_bool(truths)
    if len(p) != len(t):
        raise ValueError(f"length mismatch: {len(p)} predictions vs {len(t)} truths")
    if len(p) == 0:
        raise ValueError("no items")
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate of P(score_pos > score_neg), ties counted one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = _as_bool(labels)
    if len(s) != len(y):
        raise ValueError("scores and labels differ in length")
    n1, n0 = int(y.sum()), int((~y).sum())
    if n1 == 0 or n0 == 0:
        raise ValueError("AUROC needs both classes")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n1 * (n1 + 1) / 2
    return float(u / (n1 * n0))


# -------------------------------------------------------------- aggregation


def score_similarity(image_embs: torch.Tensor, text_emb: torch.Tensor, aggregation: str = "mean") -> float:
    """Cosine similarity of each window embedding with the text, aggregated over windows."""
    if image_embs.ndim == 1:
        image_embs = image_embs[None]
    if image_embs.shape[0] == 0:
        raise ValueError("empty crop set")
    sims = image_embs @ text_emb
    if aggregation == "mean":
        return float(sims.mean())
    if aggregation == "max":
        return float(sims.max())
    raise ValueError(f"unknown aggregation {aggregation!r}")


def classify_organwise(pos_score: float, neg_score: float) -> str:
    """Higher similarity wins; exact ties go to negative."""
    return POSITIVE if pos_score > neg_score else NEGATIVE


class AllOrgansAbsentError(ValueError):
    pass


def finding_confidence(organ_embs: dict[str, torch.Tensor], text_emb: torch.Tensor, aggregation: str = "mean") -> float:
    """Window-aggregated similarity per organ, then the mean over organs."""
    if not organ_embs:
        raise AllOrgansAbsentError("none of the task organs is present")
    scores = [score_similarity(organ_embs[o], text_emb, aggregation) for o in sorted(organ_embs)]
    return float(np.mean(scores))


# -------------------------------------------------------------- embeddings


class Embedder:
    """Read-only embedding cache over a model and a crop store."""

    def __init__(self, model: DualEncoder, store: CropStore, batch_size: int = 32):
        self.model = model
        self.store = store
        self.batch_size = batch_size
        self._image: dict[CropKey, torch.Tensor] = {}
        self._text: dict[str, torch.Tensor] = {}

    @torch.no_grad()
    def prepare(self, keys, texts=()) -> None:
        was_training = self.model.training
        self.model.eval()
        todo = sorted(set(k for k in keys if k not in self._image))
        self.store.prefetch(todo)
        flat, owners = [], []
        for key in todo:
            w = self.store.windows(key)
            flat.extend(w)
            owners.extend([key] * w.shape[0])
        embs = []
        for i in range(0, len(flat), self.batch_size):
            embs.append(self.model.embed_image(torch.stack(flat[i : i + self.batch_size])))
        if embs:
            embs = torch.cat(embs)
            grouped = defaultdict(list)
            for key, e in zip(owners, embs):
                grouped[key].append(e)
            for key, rows in grouped.items():
                self._image[key] = torch.stack(rows)
        new_texts = sorted(set(t for t in texts if t not in self._text))
        for i in range(0, len(new_texts), self.batch_size):
            chunk = new_texts[i : i + self.batch_size]
            for t, e in zip(chunk, self.model.embed_text(chunk)):
                self._text[t] = e
        self.model.train(was_training)

    def image(self, key: CropKey) -> torch.Tensor:
        if key not in self._image:
            self.prepare([key])
        return self._image[key]

    def text(self, text: str) -> torch.Tensor:
        if text not in self._text:
            self.prepare([], [text])
        return self._text[text]


# ------------------------------------------------------------- organ-wise


@dataclass(frozen=True)
class OrganWiseItem:
    organ: str
    case_id: str
    series_id: str
    pos_text: str
    neg_text: str
    truth: str

    def __post_init__(self):
        if self.pos_text == self.neg_text:
            raise ValueError("positive and negative texts must differ")
        if self.truth not in (POSITIVE, NEGATIVE):
            raise ValueError(f"bad truth {self.truth!r}")

    @property
    def key(self) -> CropKey:
        return (self.case_id, self.series_id, self.organ)


def build_organwise_tasks(records: list[dict], rng: np.random.Generator, templates=None, assets_dir=None) -> list[OrganWiseItem]:
    """Balanced 1:1 positive/negative items per organ from evaluation pairs."""
    templates = templates or negative_templates(assets_dir)
    by_organ: dict[str, tuple[list, list]] = defaultdict(lambda: ([], []))
    for r in records:
        by_organ[r["organ"]][0 if r["polarity"] == "pos" else 1].append(r)
    items = []
    for organ in sorted(by_organ):
        pos, neg = by_organ[organ]
        if not pos or not neg:
            log.warning("skipping organ %s: %d positive / %d negative pairs", organ, len(pos), len(neg))
            continue
        n = min(len(pos), len(neg))
        keep_pos = np.sort(rng.choice(len(pos), size=n, replace=False))
        keep_neg = np.sort(rng.choice(len(neg), size=n, replace=False))
        sentences = sorted({r["text"] for r in pos})
        name = display_name(organ, assets_dir)
        for i in keep_pos:
            r = pos[i]
            neg_text = templates[int(rng.integers(len(templates)))].replace("{organ_name}", name)
            items.append(OrganWiseItem(organ, r["case_id"], r["series_id"], r["text"], neg_text, POSITIVE))
        for j in keep_neg:
            r = neg[j]
            pos_text = sentences[int(rng.integers(len(sentences)))]
            items.append(OrganWiseItem(organ, r["case_id"], r["series_id"], pos_text, r["text"], NEGATIVE))
    return items


def evaluate_organwise(embedder: Embedder, items: list[OrganWiseItem], aggregation: str = "mean") -> dict:
    embedder.prepare([it.key for it in items], [t for it in items for t in (it.pos_text, it.neg_text)])
    preds = defaultdict(list)
    truths = defaultdict(list)
    for it in items:
        img = embedder.image(it.key)
        p = score_similarity(img, embedder.text(it.pos_text), aggregation)
        q = score_similarity(img, embedder.text(it.neg_text), aggregation)
        preds[it.organ].append(classify_organwise(p, q))
        truths[it.organ].append(it.truth)
    per_organ = {o: {"n": len(preds[o]), "f1": f1_score(preds[o], truths[o])} for o in sorted(preds)}
    all_p = [x for o in sorted(preds) for x in preds[o]]
    all_t = [x for o in sorted(preds) for x in truths[o]]
    return {
        "aggregation": aggregation,
        "n": len(all_p),
        "per_organ": per_organ,
        "macro_f1": float(np.mean([v["f1"] for v in per_organ.values()])) if per_organ else float("nan"),
        "micro_f1": f1_score(all_p, all_t) if all_p else float("nan"),
    }


# ------------------------------------------------------------- finding-wise


@dataclass(frozen=True)
class FindingTask:
    name: str
    lesion: str
    organs: tuple[str, ...]
    prompt: str

    def __post_init__(self):
        if not self.organs:
            raise ValueError(f"finding {self.name!r} names no organ")
        unknown = set(self.organs) - set(organ_vocabulary())
        if unknown:
            raise ValueError(f"finding {self.name!r}: organs outside the vocabulary: {sorted(unknown)}")

    @classmethod
    def from_json(cls, d: dict, assets_dir=None) -> "FindingTask":
        template = d.get("prompt_template") or positive_prompt_template(assets_dir)
        lesion = d["lesion"]
        prompt = d.get("prompt") or template.replace("{lesion}", lesion[:1].upper() + lesion[1:])
        return cls(d["name"], lesion, tuple(d["organs"]), prompt)


def evaluate_findingwise(
    embedder: Embedder,
    tasks: list[FindingTask],
    labels: list[dict],
    aggregation: str = "mean",
) -> dict:
    """``labels`` rows: {case_id, series_id, finding, label (0/1)}."""
    by_task = defaultdict(list)
    for row in labels:
        by_task[row["finding"]].append(row)
    results = {}
    for task in sorted(tasks, key=lambda t: t.name):
        rows = by_task.get(task.name, [])
        usable = []
        for row in rows:
            present = embedder.store.present_organs(row["case_id"], row["series_id"])
            organs = [o for o in task.organs if o in present]
            if organs:
                usable.append((row, organs))
        keys = [(r["case_id"], r["series_id"], o) for r, organs in usable for o in organs]
        embedder.prepare(keys, [task.prompt])
        text = embedder.text(task.prompt)
        scores, ys = [], []
        for row, organs in usable:
            embs = {o: embedder.image((row["case_id"], row["series_id"], o)) for o in organs}
            scores.append(finding_confidence(embs, text, aggregation))
            ys.append(int(row["label"]))
        entry = {"n": len(ys), "n_positive": int(sum(ys)), "prompt": task.prompt}
        if 0 < sum(ys) < len(ys):
            entry["auroc"] = auroc(scores, ys)
        else:
            log.warning("finding %s has a single class among %d volumes; AUROC undefined", task.name, len(ys))
            entry["auroc"] = None
        results[task.name] = entry
    defined = [v["auroc"] for v in results.values() if v["auroc"] is not None]
    return {
        "aggregation": aggregation,
        "per_finding": results,
        "mean_auroc": float(np.mean(defined)) if defined else float("nan"),
    }


# ------------------------------------------------------------------ output


def write_results(out_dir: str | Path, stem: str, results: dict) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.json").write_text(json.dumps(results, indent=1, sort_keys=True) + "\n")
    if "per_organ" in results:
        header, table = ("organ", "n", "f1"), results["per_organ"]
        summary = ("macro", results["n"], results["macro_f1"])
    else:
        header, table = ("finding", "n", "auroc"), results["per_finding"]
        summary = ("mean", sum(v["n"] for v in table.values()), results["mean_auroc"])
    with open(out_dir / f"{stem}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for name, v in table.items():
            w.writerow([name, v["n"], "" if v[header[2]] is None else f"{v[header[2]]:.6f}"])
        w.writerow([summary[0], summary[1], f"{summary[2]:.6f}"])


def items_to_json(items: list[OrganWiseItem]) -> list[dict]:
    return [asdict(it) for it in items]
