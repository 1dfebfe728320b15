"""Frozen-feature evaluation: k-NN, linear probe, correspondence and collapse."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .augment import MultiCropConfig, center_crop, make_eval_pair
from .geometry import Matching, apply_geometric, similarity_match, token_centers
from .model import BackboneConfig, forward

REPORT_KEYS = ("knn_top1", "linear_top1", "corr_accuracy", "corr_distance_error_px",
               "collapse_index_mean")


@dataclass
class EmbeddingBank:
    """Anchor embeddings (``M x d``) and their integer labels."""

    anchors: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.anchors.ndim != 2 or len(self.anchors) == 0:
            raise ValueError("embedding bank is empty")
        if len(self.anchors) != len(self.labels):
            raise ValueError("anchors and labels differ in length")
        if not np.isfinite(self.anchors).all():
            raise ValueError("embedding bank holds non-finite values")

    def __len__(self) -> int:
        return len(self.anchors)


@dataclass
class CorrespondenceReport:
    accuracy: float
    distance_error: float
    per_image_accuracy: list[float] = field(default_factory=list)
    per_image_error: list[float] = field(default_factory=list)
    collapse: list[float] = field(default_factory=list)
    matchings: list[Matching] = field(default_factory=list)


# ---------------------------------------------------------------------------
# feature extraction


def extract_global(params, images, cfg: BackboneConfig, size: int = 64,
                   batch: int = 64) -> np.ndarray:
    """Global representations of square centre crops, one row per image."""
    out = []
    for start in range(0, len(images), batch):
        chunk = images[start:start + batch]
        crops = np.stack([apply_geometric(img, center_crop(img.shape[:2], size)) for img in chunk])
        with nx.no_grad():
            zbar, _ = forward(params, crops, cfg)
        out.append(zbar.data)
    return np.concatenate(out, axis=0)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    if (n == 0).any():
        raise ValueError("zero-norm embedding: cosine similarity undefined")
    return x / n


# ---------------------------------------------------------------------------
# k-NN


def knn_predict(bank: EmbeddingBank, queries: np.ndarray, k: int = 20,
                weighted: bool = False, temperature: float = 0.07,
                exclude_self: bool = False) -> np.ndarray:
    """Cosine k-NN vote. Neighbour ties go to the lower anchor index, vote ties
    to the smaller class id. ``exclude_self`` drops anchor ``i`` for query ``i``."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    m = len(bank) - (1 if exclude_self else 0)
    if k < 1 or k > m:
        raise ValueError(f"k={k} needs 1 <= k <= {m} anchors")
    sim = _unit_rows(queries) @ _unit_rows(bank.anchors).T
    if exclude_self:
        if len(queries) != len(bank):
            raise ValueError("exclude_self needs the bank itself as queries")
        np.fill_diagonal(sim, -np.inf)
    n_classes = int(bank.labels.max()) + 1
    preds = np.empty(len(queries), dtype=np.int64)
    for i, row in enumerate(sim):
        nn = np.argsort(-row, kind="stable")[:k]
        if weighted:
            votes = np.bincount(bank.labels[nn], weights=np.exp(row[nn] / temperature),
                                minlength=n_classes)
        else:
            votes = np.bincount(bank.labels[nn], minlength=n_classes)
        preds[i] = int(np.argmax(votes))
    return preds


def knn_eval(bank: EmbeddingBank, queries, labels, k: int = 20, weighted: bool = False,
             exclude_self: bool = False) -> float:
    preds = knn_predict(bank, queries, k, weighted=weighted, exclude_self=exclude_self)
    return float(np.mean(preds == np.asarray(labels)))


# ---------------------------------------------------------------------------
# linear probe


@dataclass
class LinearProbe:
    weight: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    n_iter: int

    def logits(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean) / self.scale) @ self.weight + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)


def fit_linear_probe(x: np.ndarray, y: np.ndarray, l2: float = 1e-4, tol: float = 1e-6,
                     max_iter: int = 20000) -> LinearProbe:
    """Multinomial logistic regression by full-batch gradient descent.

    Features are standardised with training statistics. The step size is
    ``1 / L`` for the Lipschitz bound ``L = ||X||_2^2 / (2n) + l2`` of the
    softmax cross-entropy gradient; iteration stops once the largest gradient
    entry drops below ``tol``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n_classes = int(y.max()) + 1
    if len(np.unique(y)) < 2:
        raise ValueError("linear probe needs at least two classes")
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    xs = (x - mean) / scale
    n, d = xs.shape
    xb = np.hstack([xs, np.ones((n, 1))])
    onehot = np.eye(n_classes)[y]
    lip = np.linalg.norm(xb, 2) ** 2 / (2.0 * n) + l2
    step = 1.0 / lip
    w = np.zeros((d + 1, n_classes))
    it = 0
    for it in range(1, max_iter + 1):
        z = xb @ w
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        grad = xb.T @ (p - onehot) / n
        grad[:-1] += l2 * w[:-1]
        if np.abs(grad).max() < tol:
            break
        w -= step * grad
    return LinearProbe(w[:-1], w[-1], mean, scale, it)


def linear_probe(train_x, train_y, test_x, test_y, l2: float = 1e-4, tol: float = 1e-6,
                 max_iter: int = 20000) -> float:
    probe = fit_linear_probe(train_x, train_y, l2=l2, tol=tol, max_iter=max_iter)
    return float(np.mean(probe.predict(np.asarray(test_x, dtype=np.float64)) == np.asarray(test_y)))


# ---------------------------------------------------------------------------
# correspondence and collapse


def collapse_index(matching: Matching | np.ndarray) -> float:
    """Largest number of sources sharing one target, divided by the source count."""
    target = matching.target if isinstance(matching, Matching) else np.asarray(matching)
    if len(target) == 0:
        raise ValueError("empty matching")
    return float(np.bincount(target).max() / len(target))


def correspondence_eval(params, cfg: BackboneConfig, images, config: MultiCropConfig | None = None,
                        seed: int = 0, keep_matchings: bool = False) -> CorrespondenceReport:
    """Match dense reps of two photometric variants of one crop; the ground
    truth is the identity because the geometry is shared."""
    config = config or MultiCropConfig(patch=cfg.patch)
    accs, errs, coll, kept = [], [], [], []
    for i, image in enumerate(images):
        va, vb = make_eval_pair(image, config, np.random.SeedSequence([seed, i]))
        with nx.no_grad():
            _, z = forward(params, np.stack([va.image, vb.image]), cfg)
        m = similarity_match(z.data[0], z.data[1])
        centers = token_centers(vb.geo, cfg.patch).centers
        k = np.arange(len(m))
        accs.append(float(np.mean(m.target == k)))
        errs.append(float(np.mean(np.linalg.norm(centers[m.target] - centers[k], axis=1))))
        coll.append(collapse_index(m))
        if keep_matchings:
            kept.append(m)
    if not accs:
        raise ValueError("no images to evaluate")
    return CorrespondenceReport(float(np.mean(accs)), float(np.mean(errs)), accs, errs, coll, kept)


# ---------------------------------------------------------------------------
# reports


def holdout_split(labels: np.ndarray, every: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic split: within each class every ``every``-th image is held
    out; classes smaller than ``every`` (but with two or more images) hold out
    their last image."""
    labels = np.asarray(labels)
    held = np.zeros(len(labels), dtype=bool)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) >= every:
            held[idx[every - 1::every]] = True
        elif len(idx) >= 2:
            held[idx[-1]] = True
    return np.flatnonzero(~held), np.flatnonzero(held)


def evaluate(params, cfg: BackboneConfig, train_images, train_labels, query_images=None,
             query_labels=None, which: str = "all", k: int = 20, size: int = 64,
             seed: int = 0, weighted: bool = False, corr_images: int | None = 32) -> dict:
    """Run the requested benchmarks and return a report dict.

    Without a query set, k-NN is leave-one-out over the training bank and the
    linear probe uses :func:`holdout_split`.
    """
    if which not in ("knn", "linear", "correspondence", "all"):
        raise ValueError(f"unknown evaluation {which!r}")
    train_labels = np.asarray(train_labels, dtype=np.int64)
    report: dict = {}
    if which in ("knn", "linear", "all"):
        feats = extract_global(params, train_images, cfg, size)
        qfeats = None if query_images is None else extract_global(params, query_images, cfg, size)
    if which in ("knn", "all"):
        bank = EmbeddingBank(feats, train_labels)
        kk = min(k, len(bank) - (1 if qfeats is None else 0))
        if qfeats is None:
            report["knn_top1"] = knn_eval(bank, feats, train_labels, kk, weighted, exclude_self=True)
        else:
            report["knn_top1"] = knn_eval(bank, qfeats, query_labels, kk, weighted)
    if which in ("linear", "all"):
        if qfeats is None:
            tr, te = holdout_split(train_labels)
            report["linear_top1"] = linear_probe(feats[tr], train_labels[tr], feats[te], train_labels[te])
        else:
            report["linear_top1"] = linear_probe(feats, train_labels, qfeats, query_labels)
    if which in ("correspondence", "all"):
        pool = train_images if query_images is None else query_images
        if corr_images is not None:
            pool = pool[:corr_images]
        mc = MultiCropConfig(global_size=size, local_size=cfg.patch, patch=cfg.patch)
        rep = correspondence_eval(params, cfg, pool, mc, seed)
        report["corr_accuracy"] = rep.accuracy
        report["corr_distance_error_px"] = rep.distance_error
        report["collapse_index_mean"] = float(np.mean(rep.collapse))
    return report


def report_json(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True) + "\n"
