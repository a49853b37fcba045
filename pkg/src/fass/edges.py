"""Boundary keypoint extraction, scoring, filtering, and edge losses.

Boundary voxels of the label mask are scored by how far the local
foreground ratio sits from one half inside a spherical window; non-maximum
suppression keeps the locally most irregular points, and dilated balls
around them form the keypoint ground-truth map.  A weighted cross-entropy
matches the predicted boundary probability map against that ground truth,
and a coherence term penalizes probability jumps along the chained
predicted keypoints, weighted by how inconsistently consecutive points sit
relative to the truth keypoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import engine as E
from .engine import Tensor
from .errors import ConfigError

_f32 = np.float32

# cap on distance-matrix elements materialized per row block in the NMS search
_NMS_BLOCK_ELEMS = 4_000_000


@dataclass
class ECConfig:
    radius: int = 10
    nms_k: int = 10
    truth_dilation: int = 2
    epsilon: float = 1e-6
    pred_threshold: float = 0.5
    max_pred_points: int = 512
    edges: str = "mask"          # boundary source: "mask" or "image"
    ce_band: bool = False        # restrict the matching CE to a boundary band
    ce_band_radius: int = 4

    def validate(self) -> None:
        if self.radius < 1 or self.nms_k < 1 or self.truth_dilation < 0:
            raise ConfigError("radius/nms_k must be >= 1 and truth_dilation >= 0")
        if self.edges not in ("mask", "image"):
            raise ConfigError(f"edges must be 'mask' or 'image', got {self.edges!r}")


_BALL_OFFSETS: dict[int, np.ndarray] = {}


def ball_offsets(radius: int) -> np.ndarray:
    """Integer offsets of the discrete ball |v| <= radius, cached per radius."""
    offs = _BALL_OFFSETS.get(radius)
    if offs is None:
        r = int(radius)
        ax = np.arange(-r, r + 1)
        gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
        keep = gx * gx + gy * gy + gz * gz <= r * r
        offs = np.stack([gx[keep], gy[keep], gz[keep]], axis=1).astype(np.int64)
        _BALL_OFFSETS[radius] = offs
    return offs


def extract_boundary(mask: np.ndarray) -> np.ndarray:
    """Inner boundary voxels of a binary mask in lexicographic order.

    A foreground voxel is boundary if any of its six face neighbors is
    background; volume faces count as background, so a full-volume mask
    yields exactly its faces.
    """
    fore = mask > 0
    if not fore.any():
        return np.empty((0, 3), dtype=np.int64)
    padded = np.zeros(tuple(s + 2 for s in fore.shape), dtype=bool)
    padded[1:-1, 1:-1, 1:-1] = fore
    interior = np.ones_like(fore)
    for ax in range(3):
        for step in (1, -1):
            interior &= np.roll(padded, step, axis=ax)[1:-1, 1:-1, 1:-1]
    return np.argwhere(fore & ~interior).astype(np.int64)


def boundary_from_image(intensities: np.ndarray, percentile: float = 95.0) -> np.ndarray:
    """Alternative boundary source: gradient-magnitude thresholding."""
    gx, gy, gz = np.gradient(intensities.astype(np.float64))
    mag = np.sqrt(gx * gx + gy * gy + gz * gz)
    thr = np.percentile(mag, percentile)
    return np.argwhere(mag > thr).astype(np.int64)


def foreground_ratio(points: np.ndarray, fore_mask: np.ndarray, radius: int) -> np.ndarray:
    """Foreground fraction of the spherical window at each point.

    The window is clipped at the volume edges, so the denominator is the
    number of in-bounds ball voxels.  Implemented by zero-padding the mask
    by the radius so every ball voxel has a flat index.
    """
    if points.size == 0:
        return np.empty(0, dtype=np.float64)
    offs = ball_offsets(radius)
    r = int(radius)
    d, h, w = fore_mask.shape
    ps = (d + 2 * r, h + 2 * r, w + 2 * r)
    pad_fore = np.zeros(ps, dtype=bool)
    pad_fore[r : r + d, r : r + h, r : r + w] = fore_mask > 0
    pad_valid = np.zeros(ps, dtype=bool)
    pad_valid[r : r + d, r : r + h, r : r + w] = True
    strides = np.array([ps[1] * ps[2], ps[2], 1], dtype=np.int64)
    idx = ((np.asarray(points, np.int64) + r) @ strides)[:, None] + (offs @ strides)[None, :]
    num = pad_fore.reshape(-1)[idx].sum(axis=1)
    den = pad_valid.reshape(-1)[idx].sum(axis=1)
    return num / den


def irregularity_score(p) -> np.ndarray:
    """s = |p - 0.5|, in [0, 0.5]."""
    return np.abs(np.asarray(p, dtype=np.float64) - 0.5)


def _knn_max_scores_int(points: np.ndarray, scores: np.ndarray, kk: int) -> np.ndarray:
    """Integer-grid fast path: fold (d^2, lex rank) into one exact int64 key.

    Keys are unique per row, so the k nearest under the tie rule are exactly
    the k smallest keys and the whole search vectorizes.
    """
    n = len(points)
    pts = np.asarray(points, dtype=np.int64)
    lex_rank = np.empty(n, dtype=np.int64)
    lex_rank[_lex_order(pts)] = np.arange(n)
    out = np.empty(n)
    big = np.iinfo(np.int64).max
    # |a-b|^2 via the norm expansion: every term is an exact integer in
    # float64 for voxel coordinates, so the cast back to int64 is lossless
    p = pts.astype(np.float64)
    norms = (p * p).sum(axis=1)
    block = max(1, _NMS_BLOCK_ELEMS // n)
    for r0 in range(0, n, block):
        r1 = min(r0 + block, n)
        d2 = norms[r0:r1, None] + norms[None, :] - 2.0 * (p[r0:r1] @ p.T)
        key = d2.astype(np.int64) * n + lex_rank[None, :]
        key[np.arange(r1 - r0), np.arange(r0, r1)] = big
        kth = np.partition(key, kk - 1, axis=1)[:, kk - 1]
        within = key <= kth[:, None]
        out[r0:r1] = np.where(within, scores[None, :], -np.inf).max(axis=1)
    return out


def _knn_max_scores(points: np.ndarray, scores: np.ndarray, k: int) -> np.ndarray:
    """Max neighbor score over each point's k nearest (distance ties: lexicographic).

    Integer coordinates take the exact composite-key path; float coordinates
    compare squared float64 distances with the small boundary tie group
    resolved by lexicographic rank.  Row blocks bound the distance-matrix
    memory.
    """
    n = len(points)
    kk = min(k, n - 1)
    arr = np.asarray(points)
    if np.issubdtype(arr.dtype, np.integer):
        return _knn_max_scores_int(arr, scores, kk)
    p64 = arr.astype(np.float64)
    lex_rank = np.empty(n, dtype=np.int64)
    lex_rank[_lex_order(p64)] = np.arange(n)
    out = np.empty(n)
    block = max(1, _NMS_BLOCK_ELEMS // n)
    for r0 in range(0, n, block):
        r1 = min(r0 + block, n)
        d2 = ((p64[r0:r1, None, :] - p64[None, :, :]) ** 2).sum(-1)
        d2[np.arange(r1 - r0), np.arange(r0, r1)] = np.inf
        kth = np.partition(d2, kk - 1, axis=1)[:, kk - 1]
        within = d2 <= kth[:, None]
        counts = within.sum(axis=1)
        simple = counts == kk
        if simple.any():
            out[r0:r1][simple] = np.where(within[simple], scores[None, :], -np.inf).max(axis=1)
        for i in np.flatnonzero(~simple):
            row = d2[i]
            inside = row < kth[i]
            best = scores[inside].max() if inside.any() else -np.inf
            tied = np.flatnonzero(row == kth[i])
            fill = kk - int(inside.sum())
            pick = tied[np.argsort(lex_rank[tied], kind="stable")[:fill]]
            out[r0 + i] = max(best, scores[pick].max())
    return out


def nms_filter(points: np.ndarray, scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of points whose score strictly exceeds all k nearest neighbors'.

    Neighbor ranking is by Euclidean distance with distance ties broken
    lexicographically on coordinates; equal scores suppress both points
    (strict inequality).  A single point is always retained; with fewer than
    k+1 points every point compares against all others.
    """
    points = np.asarray(points)
    scores = np.asarray(scores, dtype=np.float64)
    n = len(points)
    if n == 0:
        return np.zeros(0, dtype=bool)
    if n == 1:
        return np.ones(1, dtype=bool)
    return scores > _knn_max_scores(points, scores, k)


def build_truth_map(points: np.ndarray, shape: tuple[int, int, int], dilation: int) -> np.ndarray:
    """Union of radius-`dilation` balls around the retained points, clipped."""
    out = np.zeros(shape, dtype=np.uint8)
    if len(points) == 0:
        return out
    offs = ball_offsets(dilation) if dilation > 0 else np.zeros((1, 3), np.int64)
    coords = (points[:, None, :] + offs[None, :, :]).reshape(-1, 3)
    keep = (
        (coords[:, 0] >= 0) & (coords[:, 0] < shape[0])
        & (coords[:, 1] >= 0) & (coords[:, 1] < shape[1])
        & (coords[:, 2] >= 0) & (coords[:, 2] < shape[2])
    )
    coords = coords[keep]
    out[coords[:, 0], coords[:, 1], coords[:, 2]] = 1
    return out


@dataclass
class TruthKeypoints:
    points: np.ndarray                     # retained keypoints [m, 3]
    ratios: np.ndarray = field(default_factory=lambda: np.empty(0))
    scores: np.ndarray = field(default_factory=lambda: np.empty(0))
    truth_map: np.ndarray | None = None

    @property
    def empty(self) -> bool:
        return len(self.points) == 0


def truth_keypoints(label: np.ndarray, cfg: ECConfig, intensities: np.ndarray | None = None) -> TruthKeypoints:
    """Full ground-truth pipeline: boundary, ratios, scores, NMS, truth map.

    Deterministic and cacheable per patch; an empty mask yields an empty
    result and the edge losses are skipped.
    """
    cfg.validate()
    fore = label > 0
    if cfg.edges == "image":
        if intensities is None:
            raise ConfigError("edges='image' needs the intensity volume")
        boundary = boundary_from_image(intensities)
    else:
        boundary = extract_boundary(fore)
    if len(boundary) == 0:
        return TruthKeypoints(np.empty((0, 3), np.int64))
    ratios = foreground_ratio(boundary, fore, cfg.radius)
    scores = irregularity_score(ratios)
    keep = nms_filter(boundary, scores, cfg.nms_k)
    retained = boundary[keep]
    tmap = build_truth_map(retained, label.shape, cfg.truth_dilation)
    return TruthKeypoints(retained, ratios[keep], scores[keep], tmap)


def match_loss(m_pred: Tensor, m_truth: np.ndarray, band: np.ndarray | None = None) -> tuple[Tensor, bool]:
    """Positive-class-weighted binary cross-entropy, mean over voxels.

    Returns (loss, skipped); an all-zero truth map skips the term. The
    positive weight #negatives/#positives counters the extreme sparsity of
    keypoint maps.  `band` optionally restricts the loss to a voxel subset.
    """
    flat_shape = (m_pred.size,)
    pred = E.reshape(m_pred, flat_shape)
    truth = m_truth.reshape(-1).astype(_f32)
    if band is not None:
        sel = np.flatnonzero(band.reshape(-1))
        if sel.size == 0:
            return Tensor(np.zeros((), _f32)), True
        pred = E.gather(pred, sel)
        truth = truth[sel]
    n_pos = float(truth.sum())
    n = truth.size
    if n_pos == 0:
        return Tensor(np.zeros((), _f32)), True
    w_pos = (n - n_pos) / n_pos
    p = E.clamp(pred, 1e-7, 1.0 - 1e-7)
    pos_term = E.mul(E.log(p), Tensor(w_pos * truth))
    neg_term = E.mul(E.log(E.scale(E.sub(p, 1.0), -1.0)), Tensor(1.0 - truth))
    return E.scale(E.mean_(E.add(pos_term, neg_term)), -1.0), False


def _lex_order(points: np.ndarray) -> np.ndarray:
    return np.lexsort((points[:, 2], points[:, 1], points[:, 0]))


def predicted_keypoints(m_pred_data: np.ndarray, cfg: ECConfig) -> np.ndarray:
    """Threshold the probability map, cap, and NMS with probability as score."""
    probs = m_pred_data.reshape(m_pred_data.shape[-3:])
    pts = np.argwhere(probs > cfg.pred_threshold).astype(np.int64)
    if len(pts) == 0:
        return pts
    vals = probs[pts[:, 0], pts[:, 1], pts[:, 2]].astype(np.float64)
    if len(pts) > cfg.max_pred_points:
        order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0], -vals))[: cfg.max_pred_points]
        pts, vals = pts[order], vals[order]
    keep = nms_filter(pts, vals, cfg.nms_k)
    return pts[keep]


def chain_points(points: np.ndarray) -> np.ndarray:
    """Greedy nearest-neighbor ordering from the lexicographically smallest.

    Distance ties pick the lexicographically smallest unvisited point so the
    chain is deterministic.
    """
    n = len(points)
    if n <= 1:
        return np.arange(n)
    p64 = points.astype(np.float64)
    d2 = ((p64[:, None, :] - p64[None, :, :]) ** 2).sum(-1)
    lex = _lex_order(points)
    lex_rank = np.empty(n, dtype=np.int64)
    lex_rank[lex] = np.arange(n)
    order = [int(lex[0])]
    visited = np.zeros(n, dtype=bool)
    visited[order[0]] = True
    for _ in range(n - 1):
        cur = order[-1]
        cand = np.flatnonzero(~visited)
        dist = d2[cur, cand]
        best = dist.min()
        tied = cand[dist == best]
        nxt = tied[np.argmin(lex_rank[tied])]
        order.append(int(nxt))
        visited[nxt] = True
    return np.asarray(order, dtype=np.int64)


def continuity_loss(
    m_pred: Tensor,
    pred_points: np.ndarray,
    truth_points: np.ndarray,
    epsilon: float = 1e-6,
) -> tuple[Tensor, bool]:
    """Coherence penalty along the chained predicted keypoints.

    For consecutive chain points, the weight is the difference of their
    nearest-truth distances over their separation; the penalized quantity is
    the probability jump between them.  Gradients flow only through the
    sampled probabilities (point selection is non-differentiable).
    """
    if len(pred_points) < 2 or len(truth_points) == 0:
        return Tensor(np.zeros((), _f32)), True
    order = chain_points(pred_points)
    chained = pred_points[order]
    tree = cKDTree(truth_points.astype(np.float64))
    d_truth, _ = tree.query(chained.astype(np.float64))
    steps = np.linalg.norm(np.diff(chained.astype(np.float64), axis=0), axis=1)
    rho = np.abs(np.diff(d_truth)) / (steps + epsilon)

    shape = m_pred.data.shape[-3:]
    flat_idx = (
        chained[:, 0] * (shape[1] * shape[2]) + chained[:, 1] * shape[2] + chained[:, 2]
    )
    probs = E.gather(E.reshape(m_pred, (m_pred.size,)), flat_idx)
    m = len(chained)
    jumps = E.abs_(E.sub(E.getitem(probs, slice(0, m - 1)), E.getitem(probs, slice(1, m))))
    weighted = E.mul(jumps, Tensor(rho.astype(_f32)))
    return E.mean_(weighted), False


def ec_loss(l_match: Tensor, l_cont: Tensor) -> Tensor:
    """Half the sum of the matching and coherence terms (skipped terms are 0)."""
    return E.scale(E.add(l_match, l_cont), 0.5)
