"""Exact t-SNE for desk-scale embedding sets, plus SVG scatter rendering.

The O(N^2) formulation: per-row bandwidths found by binary search against
the target perplexity, symmetrized affinities, Student-t kernel in 2-D,
gradient descent with momentum and early exaggeration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import substream

_EPS = np.finfo(np.float64).eps


class TooFewPointsError(ValueError):
    """Projection needs at least five points."""


class LegendOverflowError(ValueError):
    """More distinct labels than the palette supports."""


@dataclass
class EmbeddingMatrix:
    rows: np.ndarray            # [N, D]
    labels: list[str]
    paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise ValueError("embeddings must be a 2-D matrix")
        if not np.isfinite(self.rows).all():
            raise ValueError("embeddings contain non-finite values")
        if len(self.labels) != self.rows.shape[0]:
            raise ValueError("one label per embedding row required")


@dataclass
class Projection2D:
    points: np.ndarray          # [N, 2]
    final_kl: float
    iterations_run: int
    kl_history: list[float] = field(default_factory=list)


def _pairwise_sq_distances(x: np.ndarray) -> np.ndarray:
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d2, 0.0)
    return np.maximum(d2, 0.0)


def _row_probs(d2_row: np.ndarray, beta: float, row: int) -> np.ndarray:
    p = np.exp(-d2_row * beta)
    p[row] = 0.0
    total = p.sum()
    return p / total if total > 0 else p


def perplexity_calibration(distances: np.ndarray, perplexity: float,
                           tol: float = 1e-4, max_iter: int = 200) -> np.ndarray:
    """Per-row precisions beta such that exp(H(p_row)) matches the perplexity.

    `distances` are squared distances with a zero diagonal. Each row is a
    separate binary search, capped at `max_iter` halvings.
    """
    distances = np.asarray(distances, dtype=np.float64)
    if not np.isfinite(distances).all():
        raise ValueError("distances contain non-finite values")
    n = distances.shape[0]
    if not 1.0 < perplexity < n:
        raise ValueError(f"perplexity must be in (1, {n})")
    betas = np.ones(n)
    for i in range(n):
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            p = _row_probs(distances[i], beta, i)
            nz = p[p > 0]
            entropy = float(-(nz * np.log(nz)).sum())
            current = math.exp(entropy)
            if abs(current - perplexity) <= tol:
                break
            if current > perplexity:   # too spread out: sharpen
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (lo + beta) / 2.0
        betas[i] = beta
    return betas


def conditional_probs(distances: np.ndarray, betas: np.ndarray) -> np.ndarray:
    n = distances.shape[0]
    p = np.exp(-distances * betas[:, None])
    np.fill_diagonal(p, 0.0)
    return p / p.sum(axis=1, keepdims=True)


def joint_affinities(distances: np.ndarray, perplexity: float) -> np.ndarray:
    """Symmetrized affinity matrix summing to one."""
    betas = perplexity_calibration(distances, perplexity)
    cond = conditional_probs(distances, betas)
    n = distances.shape[0]
    return (cond + cond.T) / (2.0 * n)


def tsne(e: EmbeddingMatrix, perplexity: float = 30.0, iters: int = 1000,
         seed: int = 0, learning_rate: float = 200.0,
         exaggeration: float = 12.0, exaggeration_iters: int = 250) -> Projection2D:
    """Project rows to 2-D, deterministically for a given seed."""
    n = e.rows.shape[0]
    if n < 5:
        raise TooFewPointsError(f"need at least 5 points, got {n}")
    if n > 20000:
        raise ValueError("exact method is limited to 20000 points")
    p_true = joint_affinities(_pairwise_sq_distances(e.rows), perplexity)
    p_used = p_true * exaggeration

    rng = substream(seed, "tsne")
    y = rng.normal(scale=1e-4, size=(n, 2))
    update = np.zeros_like(y)
    kl_history = []
    for it in range(iters):
        if it == exaggeration_iters:
            p_used = p_true
        d2y = _pairwise_sq_distances(y)
        num = 1.0 / (1.0 + d2y)
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), _EPS)
        pq = (p_used - q) * num
        grad = 4.0 * ((np.diag(pq.sum(axis=1)) - pq) @ y)
        momentum = 0.5 if it < exaggeration_iters else 0.8
        update = momentum * update - learning_rate * grad
        y = y + update
        mask = p_true > 0
        kl_history.append(float((p_true[mask] * np.log(p_true[mask] / q[mask])).sum()))
    y = y - y.mean(axis=0, keepdims=True)
    return Projection2D(points=y, final_kl=kl_history[-1], iterations_run=iters,
                        kl_history=kl_history)


def silhouette(points: np.ndarray, labels) -> float:
    """Mean silhouette coefficient over all points (O(N^2))."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("silhouette needs at least two labels")
    d = np.sqrt(_pairwise_sq_distances(points))
    scores = []
    for i in range(len(points)):
        same = labels == labels[i]
        n_same = same.sum()
        if n_same < 2:
            scores.append(0.0)
            continue
        a = d[i][same].sum() / (n_same - 1)
        b = min(d[i][labels == c].mean() for c in classes if c != labels[i])
        scores.append((b - a) / max(a, b))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

_PALETTE = [
    "#1f77b4", "#aec7e8", "#ff7f0e", "#ffbb78", "#2ca02c", "#98df8a",
    "#d62728", "#ff9896", "#9467bd", "#c5b0d5", "#8c564b", "#c49c94",
    "#e377c2", "#f7b6d2", "#7f7f7f", "#c7c7c7", "#bcbd22", "#dbdb8d",
    "#17becf", "#9edae5",
]


def render_scatter(p: Projection2D, labels, width: int = 640, height: int = 480) -> str:
    """SVG 1.1 scatter with one palette color per label and a legend."""
    labels = ["unlabeled" if not l else str(l) for l in labels]
    distinct = sorted(set(labels))
    if len(distinct) > len(_PALETTE):
        raise LegendOverflowError(
            f"{len(distinct)} labels exceed the {len(_PALETTE)}-color palette; "
            "export coordinates as CSV instead")
    color = {label: _PALETTE[i] for i, label in enumerate(distinct)}

    pts = p.points
    span = max(float(np.abs(pts).max()), 1e-9)
    margin = 40.0
    scale = (min(width, height) / 2.0 - margin) / span
    cx, cy = width / 2.0, height / 2.0

    parts = [
        f'<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for (x, y), label in zip(pts, labels):
        sx = cx + float(x) * scale
        sy = cy - float(y) * scale
        parts.append(f'<circle cx="{sx:.2f}" cy="{sy:.2f}" r="3" '
                     f'fill="{color[label]}" fill-opacity="0.8"/>')
    for i, label in enumerate(distinct):
        ly = 20 + 18 * i
        parts.append(f'<rect x="{width - 150}" y="{ly - 9}" width="10" height="10" '
                     f'fill="{color[label]}"/>')
        parts.append(f'<text x="{width - 134}" y="{ly}" font-family="sans-serif" '
                     f'font-size="12">{_xml_escape(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def _xml_escape(text: str) -> str:
    return (text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
            .replace('"', "&quot;"))
