import hashlib
from pathlib import Path

import numpy as np
import pytest

from cxrtrunc.data import EVAL_TASKS, OBSERVATIONS, evaluation_truth, load_image, load_manifest
from cxrtrunc.evaluator import auroc
from cxrtrunc.synth import SynthConfig, load_rules, make_synthetic_dataset


@pytest.fixture(scope="module")
def synth500(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth500")
    return root, make_synthetic_dataset(SynthConfig(500, image_size=64, tasks=6, seed=7), root)


def test_counts_and_positive_rate(synth500):
    root, manifests = synth500
    records = {s: load_manifest(p) for s, p in manifests.items()}
    assert {s: len(r) for s, r in records.items()} == {"train": 300, "valid": 100, "test": 100}
    assert len(list((root / "images").rglob("*.png"))) == 500
    truth = np.concatenate([evaluation_truth(r) for r in records.values()])
    for task in EVAL_TASKS:
        k = truth[:, OBSERVATIONS.index(task)].sum()
        # 4.5 binomial standard deviations around 250
        assert abs(k - 250) <= 4.5 * np.sqrt(500 * 0.25)


def test_planted_cells_are_disjoint(synth500):
    root, _ = synth500
    rules = load_rules(root)
    assert [r.task for r in rules] == list(EVAL_TASKS)
    boxes = {r.box for r in rules}
    assert len(boxes) == 6
    mask = np.zeros((64, 64), int)
    for t, l, b, r in boxes:
        mask[t:b, l:r] += 1
    assert mask.max() == 1


def test_same_seed_gives_identical_bytes(tmp_path):
    def digest(root):
        h = hashlib.sha256()
        for p in sorted(Path(root).rglob("*")):
            if p.is_file():
                h.update(p.relative_to(root).as_posix().encode())
                h.update(p.read_bytes())
        return h.hexdigest()

    cfg = SynthConfig(20, image_size=32, seed=11)
    make_synthetic_dataset(cfg, tmp_path / "a")
    make_synthetic_dataset(cfg, tmp_path / "b")
    assert digest(tmp_path / "a") == digest(tmp_path / "b")


def test_zero_count_writes_empty_manifests(tmp_path):
    manifests = make_synthetic_dataset(SynthConfig(0), tmp_path)
    assert all(load_manifest(p) == [] for p in manifests.values())
    assert not list(tmp_path.rglob("*.png"))


def test_unwritable_output_raises_os_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        make_synthetic_dataset(SynthConfig(4), blocker / "out")


def test_uncertain_rate_produces_uncertain_labels(tmp_path):
    manifests = make_synthetic_dataset(SynthConfig(50, image_size=16, uncertain_rate=0.3, seed=1), tmp_path)
    recs = load_manifest(manifests["train"])
    assert any(lab.value == "uncertain" for r in recs for lab in r.labels)


def _logistic_probe(x, y, steps=500, lr=0.5):
    """Plain batch gradient descent on the logistic loss."""
    w = np.zeros(x.shape[1])
    b = 0.0
    for _ in range(steps):
        p = 1 / (1 + np.exp(-(x @ w + b)))
        g = p - y
        w -= lr * x.T @ g / len(y)
        b -= lr * g.mean()
    return w, b


def test_planted_signal_is_linearly_detectable(synth500):
    root, manifests = synth500
    rules = load_rules(root)
    train, test = load_manifest(manifests["train"]), load_manifest(manifests["test"])
    imgs = {s: np.stack([load_image(r.image_path) for r in recs]) for s, recs in (("train", train), ("test", test))}
    ytr, yte = evaluation_truth(train), evaluation_truth(test)
    for rule in rules:
        t, l, b, r = rule.box
        j = OBSERVATIONS.index(rule.task)
        feats = {s: v[:, t:b, l:r].reshape(len(v), -1) for s, v in imgs.items()}
        mu, sd = feats["train"].mean(0), feats["train"].std(0) + 1e-6
        w, c = _logistic_probe((feats["train"] - mu) / sd, ytr[:, j])
        assert auroc((feats["test"] - mu) / sd @ w + c, yte[:, j]) > 0.99, rule.task
