import csv
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_auroc, brute_f1
from organsep.assets import display_name, negative_templates
from organsep.evaluation import (
    AllOrgansAbsentError,
    Embedder,
    FindingTask,
    OrganWiseItem,
    auroc,
    build_organwise_tasks,
    classify_organwise,
    evaluate_findingwise,
    evaluate_organwise,
    f1_score,
    finding_confidence,
    score_similarity,
    write_results,
)
from organsep.model import DualEncoder, preset


# ------------------------------------------------------------------ metrics


def test_f1_examples():
    assert f1_score([1, 0, 1], [1, 0, 1]) == 1.0
    assert f1_score([0, 0, 0], [1, 0, 0]) == 0.0
    # tp=2 fp=1 fn=1
    assert f1_score([1, 1, 1, 0, 0], [1, 1, 0, 1, 0]) == pytest.approx(2 / 3, abs=1e-15)
    assert f1_score(["positive", "negative"], ["positive", "positive"]) == pytest.approx(2 / 3)


def test_f1_errors():
    with pytest.raises(ValueError):
        f1_score([1, 0], [1])
    with pytest.raises(ValueError):
        f1_score([], [])
    with pytest.raises(ValueError):
        f1_score(["maybe"], ["positive"])


def test_f1_matches_counting_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        p = rng.random(n) < rng.random()
        t = rng.random(n) < rng.random()
        assert abs(f1_score(p, t) - brute_f1(p, t)) <= 1e-9


def test_auroc_examples():
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75, abs=1e-15)
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.3] * 7, [0, 1, 0, 1, 1, 0, 0]) == 0.5


def test_auroc_single_class():
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [1, 1])


def test_auroc_matches_pair_counting_oracle():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = int(rng.integers(2, 30))
        labels = np.zeros(n, dtype=int)
        labels[: int(rng.integers(1, n))] = 1
        rng.shuffle(labels)
        # coarse grid forces plenty of ties
        scores = rng.integers(0, int(rng.integers(1, 6)), size=n) / 4 if rng.random() < 0.5 else rng.normal(size=n)
        assert abs(auroc(scores, labels) - brute_auroc(scores, labels)) <= 1e-9


def test_auroc_equals_trapezoidal_roc():
    rng = np.random.default_rng(2)
    scores = np.round(rng.normal(size=60), 1)
    labels = (rng.random(60) < 0.4).astype(int)
    thresholds = np.concatenate([[np.inf], np.unique(scores)[::-1]])
    tpr = [np.mean(scores[labels == 1] >= t) for t in thresholds]
    fpr = [np.mean(scores[labels == 0] >= t) for t in thresholds]
    assert auroc(scores, labels) == pytest.approx(np.trapezoid(tpr, fpr), abs=1e-12)


# scores on a dyadic grid so the transforms stay strictly increasing in floating point
GRID = st.integers(-320, 320).map(lambda i: i / 64)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(GRID, st.booleans()), min_size=2, max_size=40))
def test_auroc_monotone_invariance_and_flip(rows):
    scores = np.array([r[0] for r in rows])
    labels = [r[1] for r in rows]
    if all(labels) or not any(labels):
        return
    a = auroc(scores, labels)
    assert auroc(np.exp(scores), labels) == pytest.approx(a, abs=1e-12)
    assert auroc(3 * scores + 1, labels) == pytest.approx(a, abs=1e-12)
    if len(set(scores.tolist())) == len(scores):
        assert auroc(-scores, labels) == pytest.approx(1 - a, abs=1e-12)


# -------------------------------------------------------------- aggregation


def _unit(v):
    v = torch.as_tensor(v, dtype=torch.float64)
    return v / v.norm()


def test_score_similarity_examples():
    e = _unit([1.0, 2.0, 2.0])
    assert score_similarity(e[None], e) == pytest.approx(1.0)
    assert score_similarity(_unit([1.0, 0, 0])[None], _unit([0, 1.0, 0])) == 0.0
    text = _unit([1.0, 0.0])
    windows = torch.stack([_unit([0.2, 0.96**0.5]), _unit([0.8, 0.6])])
    assert score_similarity(windows, text) == pytest.approx(0.5)
    assert score_similarity(windows, text, "max") == pytest.approx(0.8)
    with pytest.raises(ValueError):
        score_similarity(torch.zeros(0, 2, dtype=torch.float64), text)
    with pytest.raises(ValueError):
        score_similarity(windows, text, "median")


def test_classify_examples():
    assert classify_organwise(0.7, 0.3) == "positive"
    assert classify_organwise(0.3, 0.7) == "negative"
    assert classify_organwise(0.5, 0.5) == "negative"


@settings(max_examples=100, deadline=None)
@given(GRID, GRID, st.sampled_from([np.exp, np.arctan, lambda x: 5 * x - 2, lambda x: x**3]))
def test_classify_invariant_to_increasing_maps(a, b, f):
    assert classify_organwise(a, b) == classify_organwise(float(f(a)), float(f(b)))


def test_paired_oracle_gives_perfect_accuracy():
    # image embedding equal to its paired text embedding wins over any other unit vector
    rng = np.random.default_rng(3)
    preds, truths = [], []
    for i in range(50):
        pos, neg = _unit(rng.normal(size=8)), _unit(rng.normal(size=8))
        truth = "positive" if i % 2 else "negative"
        img = (pos if truth == "positive" else neg)[None]
        preds.append(classify_organwise(score_similarity(img, pos), score_similarity(img, neg)))
        truths.append(truth)
    assert preds == truths


def test_finding_confidence_examples():
    text = _unit([1.0, 0.0])
    a = torch.stack([_unit([0.4, 0.84**0.5])])
    b = torch.stack([_unit([0.6, 0.8])])
    assert finding_confidence({"liver": a}, text) == pytest.approx(score_similarity(a, text))
    assert finding_confidence({"kidney_left": a, "kidney_right": b}, text) == pytest.approx(0.5)
    with pytest.raises(AllOrgansAbsentError):
        finding_confidence({}, text)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_finding_confidence_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    text = _unit(rng.normal(size=6))
    organs = {f"o{i}": torch.stack([_unit(rng.normal(size=6)) for _ in range(int(rng.integers(1, 4)))]) for i in range(3)}
    base = finding_confidence(organs, text)
    names = list(organs)
    rng.shuffle(names)
    shuffled = {n: organs[n][torch.as_tensor(rng.permutation(organs[n].shape[0]))] for n in names}
    assert finding_confidence(shuffled, text) == pytest.approx(base, abs=1e-12)


def test_finding_task_validation():
    t = FindingTask.from_json({"name": "kidney_cyst", "lesion": "cyst", "organs": ["kidney_left", "kidney_right"]})
    assert t.prompt == "Cyst is present."
    with pytest.raises(ValueError):
        FindingTask("x", "cyst", ("kidneys",), "Cyst is present.")
    with pytest.raises(ValueError):
        FindingTask("x", "cyst", (), "Cyst is present.")


# ------------------------------------------------------------- task building


def _records(organ, n_pos, n_neg):
    rows = []
    for i in range(n_pos):
        rows.append(dict(case_id=f"p{i}", series_id="s", organ=organ, text=f"Lesion {i} in the {organ}.", polarity="pos"))
    for i in range(n_neg):
        rows.append(dict(case_id=f"n{i}", series_id="s", organ=organ, text=f"Nothing {i} in the {organ}.", polarity="neg"))
    return rows


def test_organwise_balance_and_texts():
    records = _records("liver", 10, 4) + _records("spleen", 0, 3)
    items = build_organwise_tasks(records, np.random.default_rng(0))
    assert len(items) == 8
    assert sum(it.truth == "positive" for it in items) == 4
    templates = {t.replace("{organ_name}", display_name("liver")) for t in negative_templates()}
    pos_sentences = {r["text"] for r in records if r["polarity"] == "pos"}
    for it in items:
        if it.truth == "positive":
            assert it.neg_text in templates
        else:
            assert it.pos_text in pos_sentences
    again = build_organwise_tasks(records, np.random.default_rng(0))
    assert again == items


def test_organwise_item_rejects_identical_texts():
    with pytest.raises(ValueError):
        OrganWiseItem("liver", "c", "s", "same", "same", "positive")


# --------------------------------------------------------- model-backed runs


class FakeStore:
    """In-memory stand-in for CropStore."""

    def __init__(self, config, windows, present):
        self.config = config
        self._windows = windows
        self._present = present

    def prefetch(self, keys):
        pass

    def windows(self, key):
        return self._windows[key]

    def present_organs(self, case_id, series_id):
        return self._present[(case_id, series_id)]


@pytest.fixture(scope="module")
def small_setup():
    cfg = preset("desk", depth=1)
    gen = torch.Generator().manual_seed(0)
    windows = {}
    present = {}
    for c in range(6):
        case = f"c{c}"
        present[(case, "s")] = frozenset({"liver", "kidney_left", "kidney_right"})
        for organ in present[(case, "s")]:
            w = int(1 + (c % 2))
            windows[(case, "s", organ)] = torch.rand(w, cfg.n_tokens, cfg.token_len, generator=gen, dtype=torch.float64)
    return cfg, DualEncoder(cfg, seed=0), FakeStore(cfg, windows, present)


def test_evaluation_is_read_only_and_writes_tables(small_setup, tmp_path):
    cfg, model, store = small_setup
    before = {k: v.clone() for k, v in model.state_dict().items()}
    model.train()
    emb = Embedder(model, store, batch_size=3)
    records = _records("liver", 3, 3)
    for r in records:
        r["case_id"] = "c" + str(int(r["case_id"][1:]) + (0 if r["polarity"] == "pos" else 3))
    items = build_organwise_tasks(records, np.random.default_rng(1))
    organ = evaluate_organwise(emb, items)
    assert organ["per_organ"]["liver"]["n"] == 6
    assert 0.0 <= organ["macro_f1"] <= 1.0
    task = FindingTask.from_json({"name": "kidney_cyst", "lesion": "cyst", "organs": ["kidney_left", "kidney_right"]})
    labels = [dict(case_id=f"c{i}", series_id="s", finding="kidney_cyst", label=i % 2) for i in range(6)]
    finding = evaluate_findingwise(emb, [task], labels)
    entry = finding["per_finding"]["kidney_cyst"]
    assert entry["n"] == 6 and entry["n_positive"] == 3
    # confidence recomputed by hand from embeddings
    text = model.embed_text([task.prompt])[0].detach()
    with torch.no_grad():
        conf = [
            np.mean([float((model.embed_image(store.windows((f"c{i}", "s", o))) @ text).mean()) for o in ("kidney_left", "kidney_right")])
            for i in range(6)
        ]
    assert entry["auroc"] == pytest.approx(brute_auroc(conf, [i % 2 for i in range(6)]))
    assert model.training
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k])
    write_results(tmp_path, "organ", organ)
    write_results(tmp_path, "finding", finding)
    assert json.loads((tmp_path / "organ.json").read_text())["per_organ"]["liver"]["n"] == 6
    rows = list(csv.reader(open(tmp_path / "finding.csv")))
    assert rows[0] == ["finding", "n", "auroc"] and rows[1][0] == "kidney_cyst" and rows[-1][0] == "mean"
