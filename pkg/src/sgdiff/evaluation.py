"""Retrieval accuracy, Inception Score, FID, and the desk-scale metric backbone."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import rel_entr
from torch import nn

from sgdiff.errors import DataValidationError, NumericError

DIRECTIONS = ("graph_to_image", "image_to_graph")


def retrieval_accuracy(graph_embs, image_embs, direction: str = "graph_to_image") -> float:
    """Top-1 accuracy of finding the paired row by inner product.

    Ties go to the lowest candidate index.
    """
    g = np.asarray(graph_embs, dtype=np.float64)
    x = np.asarray(image_embs, dtype=np.float64)
    if g.shape != x.shape or g.ndim != 2:
        raise ValueError(f"embedding shapes differ: {g.shape} vs {x.shape}")
    if g.shape[0] < 2:
        raise ValueError("retrieval needs at least 2 pairs")
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    scores = g @ x.T
    if direction == "image_to_graph":
        scores = scores.T
    return float(np.mean(np.argmax(scores, axis=1) == np.arange(len(scores))))


def inception_score(class_probs, splits: int = 10) -> tuple[float, float]:
    """``exp(E_x KL(p(y|x) || p(y)))`` per split; returns mean and std over splits."""
    p = np.asarray(class_probs, dtype=np.float64)
    if p.ndim != 2 or np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("class_probs rows must be probability vectors")
    if not 1 <= splits <= len(p):
        raise ValueError(f"splits must lie in [1, {len(p)}]")
    scores = []
    for part in np.array_split(p, splits):
        marginal = part.mean(axis=0, keepdims=True)
        kl = rel_entr(part, marginal).sum(axis=1)
        scores.append(np.exp(kl.mean()))
    return float(np.mean(scores)), float(np.std(scores))


@dataclass(frozen=True)
class FeatureSet:
    features: np.ndarray
    source_id: str


@dataclass(frozen=True)
class GaussianSummary:
    mu: np.ndarray
    sigma: np.ndarray

    @classmethod
    def fit(cls, features: FeatureSet | np.ndarray) -> "GaussianSummary":
        f = np.asarray(getattr(features, "features", features), dtype=np.float64)
        if f.ndim != 2 or len(f) < 2:
            raise ValueError("need at least 2 feature rows")
        if not np.all(np.isfinite(f)):
            raise NumericError("non-finite features")
        sigma = np.cov(f, rowvar=False, ddof=1).reshape(f.shape[1], f.shape[1])
        return cls(f.mean(axis=0), (sigma + sigma.T) / 2.0)


def _psd_sqrt(m: np.ndarray, tol: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    if vals.min() < -tol * max(1.0, abs(vals).max()):
        raise NumericError(f"matrix has a negative eigenvalue {vals.min():.3g}")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: GaussianSummary, b: GaussianSummary, tol: float = 1e-6) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the product's square root equals that of
    ``(S_a^(1/2) S_b S_a^(1/2))^(1/2)``, which is symmetric, so both roots come
    from symmetric eigendecompositions with small negative eigenvalues clamped.
    """
    if a.mu.shape != b.mu.shape:
        raise ValueError("feature dimensions differ")
    root_a = _psd_sqrt(a.sigma, tol)
    middle = root_a @ b.sigma @ root_a
    vals = np.linalg.eigvalsh((middle + middle.T) / 2.0)
    if vals.min() < -tol * max(1.0, abs(vals).max()):
        raise NumericError(f"covariance product has a negative eigenvalue {vals.min():.3g}")
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = a.mu - b.mu
    value = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_sqrt)
    if not np.isfinite(value):
        raise NumericError("non-finite FID")
    return max(value, 0.0)


def fid(a: FeatureSet, b: FeatureSet) -> float:
    if a.source_id != b.source_id:
        raise ValueError(f"features from different extractors: {a.source_id!r} vs {b.source_id!r}")
    if a.features.shape[1] != b.features.shape[1]:
        raise ValueError("feature dimensions differ")
    return frechet_distance(GaussianSummary.fit(a), GaussianSummary.fit(b))


# ---------------------------------------------------------------------------
# desk-scale backbone


class ShapeClassifier(nn.Module):
    """Small CNN; penultimate activations serve as FID features."""

    def __init__(self, num_classes: int, width: int = 32, feature_dim: int = 64):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(width, 2 * width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            nn.Linear(2 * width, feature_dim), nn.ReLU(),
        )
        self.head = nn.Linear(feature_dim, num_classes)
        self.feature_dim = feature_dim

    def features(self, x):
        return self.body(x)

    def forward(self, x):
        return self.head(self.body(x))


def single_object_dataset(vocab, palette, image_size: int, count: int, seed: int):
    """Images holding one shape each, labelled by category."""
    from sgdiff.corpus import render
    from sgdiff.scenegraph import SceneGraph

    rng = np.random.default_rng(seed)
    images, labels = [], []
    for _ in range(count):
        cat = int(rng.integers(vocab.num_objects))
        w, h = rng.uniform(0.2, 0.6, size=2)
        x0, y0 = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
        images.append(render(SceneGraph((cat,), ()), [(x0, y0, x0 + w, y0 + h)], vocab, palette, image_size))
        labels.append(cat)
    return np.stack(images), np.asarray(labels)


def train_classifier(model: ShapeClassifier, images: np.ndarray, labels: np.ndarray, steps: int,
                     batch_size: int = 64, lr: float = 1e-3, seed: int = 0) -> list[float]:
    torch.manual_seed(seed)
    x = torch.as_tensor(images).permute(0, 3, 1, 2).float()
    y = torch.as_tensor(labels)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    losses = []
    model.train()
    for step in range(steps):
        idx = torch.as_tensor(np.random.default_rng([seed, step]).choice(len(x), batch_size, replace=False))
        opt.zero_grad(set_to_none=True)
        loss = F.cross_entropy(model(x[idx]), y[idx])
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    return losses


@torch.no_grad()
def classify(images, classifier: ShapeClassifier) -> np.ndarray:
    classifier.eval()
    x = _nchw(images)
    return torch.softmax(classifier(x), dim=-1).double().numpy()


@torch.no_grad()
def extract_features(images, extractor: ShapeClassifier, source_id: str) -> FeatureSet:
    extractor.eval()
    return FeatureSet(extractor.features(_nchw(images)).double().numpy(), source_id)


def _nchw(images) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    if x.ndim != 4:
        raise DataValidationError(f"expected a batch of images, got shape {tuple(x.shape)}")
    if x.shape[-1] == 3:
        x = x.permute(0, 3, 1, 2)
    return x.contiguous()


# ---------------------------------------------------------------------------
# color / position probe


def dominant_colors(image: np.ndarray, palette: dict, min_chroma: float = 0.25):
    """Most frequent palette color in the left and right halves (``None`` if empty).

    Pixels whose max-min channel spread is below ``min_chroma`` count as
    background; the rest vote for their nearest palette color.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.shape[0] == 3 and img.shape[-1] != 3:
        img = img.transpose(1, 2, 0)
    names = list(palette)
    colors = np.asarray([palette[n] for n in names], dtype=np.float64) / 255.0
    dist = ((img[:, :, None, :] - colors[None, None]) ** 2).sum(-1)
    nearest = dist.argmin(-1)
    chroma = img.max(-1) - img.min(-1)
    half = img.shape[1] // 2
    out = []
    for cols in (slice(0, half), slice(half, None)):
        votes = nearest[:, cols][chroma[:, cols] >= min_chroma]
        if votes.size == 0:
            out.append(None)
        else:
            out.append(names[int(np.bincount(votes, minlength=len(names)).argmax())])
    return tuple(out)


def probe_match_rate(images: Sequence, expected: Sequence[tuple[str, str]], palette: dict) -> float:
    """Fraction of images whose (left, right) dominant colors equal the expected pair."""
    hits = [dominant_colors(img, palette) == tuple(exp) for img, exp in zip(images, expected)]
    return float(np.mean(hits))


def left_of_probe_graphs(vocab, palette: dict, count: int, seed: int):
    """Single-triplet graphs ``<A shape> left-of <B shape>`` with distinct colors A, B.

    Returns the graphs and the expected ``(left, right)`` color pairs.
    """
    from sgdiff.corpus import SHAPES
    from sgdiff.scenegraph import SceneGraph

    rng = np.random.default_rng(seed)
    colors = list(palette)
    if len(colors) < 2:
        raise ValueError("the probe needs at least two palette colors")
    rel = vocab.relation_index("left-of")
    graphs, expected = [], []
    for _ in range(count):
        a, b = rng.choice(len(colors), size=2, replace=False)
        sa, sb = rng.integers(len(SHAPES), size=2)
        left = vocab.object_index(f"{colors[a]} {SHAPES[sa]}")
        right = vocab.object_index(f"{colors[b]} {SHAPES[sb]}")
        graphs.append(SceneGraph((left, right), ((0, rel, 1),)))
        expected.append((colors[a], colors[b]))
    return graphs, expected


def derangement(n: int, seed: int) -> np.ndarray:
    """A permutation with no fixed points (``n >= 2``), used for shuffled conditioning."""
    if n < 2:
        raise ValueError("a derangement needs n >= 2")
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(n)
        if np.all(perm != np.arange(n)):
            return perm
