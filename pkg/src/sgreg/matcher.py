"""Hierarchical correspondence search.

Node level: a shared linear map, dot-product similarity, dual (row x
column softmax) normalization, then mutual top-k extraction above a
confidence threshold.  Point level: per matched node pair, dot-product
scores between point features go through log-domain Sinkhorn with a
dustbin row/column, and mutual top-k survivors become 3D point
correspondences.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from sgreg.encoder import EncoderWeights, FeatureSet

_MASKED_SCORE = -1.0e9  # finite stand-in for -inf; routes mass to the dustbin


@dataclass
class MatcherConfig:
    node_threshold: float = 0.05
    node_topk: int = 3
    point_topk: int = 3
    point_threshold: float = 0.05
    sinkhorn_iters: int = 100
    dustbin_score: float = 0.5


@dataclass(frozen=True)
class NodeMatch:
    """Matched pair (i in graph A, j in graph B) with assignment confidence."""

    i: int
    j: int
    confidence: float


@dataclass
class CorrespondenceSet:
    """Global 3D point correspondences with scores and source-node tags."""

    p: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    q: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    score: np.ndarray = field(default_factory=lambda: np.zeros(0))
    src_node: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    dst_node: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float).reshape(-1, 3)
        self.q = np.asarray(self.q, dtype=float).reshape(-1, 3)
        self.score = np.asarray(self.score, dtype=float).reshape(-1)
        self.src_node = np.asarray(self.src_node, dtype=np.int64).reshape(-1)
        self.dst_node = np.asarray(self.dst_node, dtype=np.int64).reshape(-1)

    def __len__(self) -> int:
        return self.p.shape[0]

    def subset(self, indices) -> "CorrespondenceSet":
        idx = np.asarray(indices)
        return CorrespondenceSet(self.p[idx], self.q[idx], self.score[idx],
                                 self.src_node[idx], self.dst_node[idx])

    @staticmethod
    def concatenate(parts) -> "CorrespondenceSet":
        parts = [c for c in parts if len(c)]
        if not parts:
            return CorrespondenceSet()
        return CorrespondenceSet(
            np.vstack([c.p for c in parts]), np.vstack([c.q for c in parts]),
            np.concatenate([c.score for c in parts]),
            np.concatenate([c.src_node for c in parts]),
            np.concatenate([c.dst_node for c in parts]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["src_node", "dst_node", "px", "py", "pz",
                             "qx", "qy", "qz", "score"])
            for r in range(len(self)):
                writer.writerow([int(self.src_node[r]), int(self.dst_node[r]),
                                 *(f"{v:.9g}" for v in self.p[r]),
                                 *(f"{v:.9g}" for v in self.q[r]),
                                 f"{self.score[r]:.9g}"])

    @staticmethod
    def from_csv(path) -> "CorrespondenceSet":
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append((int(rec["src_node"]), int(rec["dst_node"]),
                             float(rec["px"]), float(rec["py"]), float(rec["pz"]),
                             float(rec["qx"]), float(rec["qy"]), float(rec["qz"]),
                             float(rec["score"])))
        if not rows:
            return CorrespondenceSet()
        arr = np.asarray(rows, dtype=float)
        return CorrespondenceSet(arr[:, 2:5], arr[:, 5:8], arr[:, 8],
                                 arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64))


def node_similarity(xa: np.ndarray, xb: np.ndarray, linear: np.ndarray) -> np.ndarray:
    """S[i, j] = <L xa_i, L xb_j> with the shared linear map L."""
    if xa.shape[1] != xb.shape[1]:
        raise ValueError(f"feature dims differ: {xa.shape[1]} vs {xb.shape[1]}")
    if linear.shape[1] != xa.shape[1]:
        raise ValueError("linear map does not fit the feature dimension")
    la = xa @ linear.T
    lb = xb @ linear.T
    return la @ lb.T


def _softmax(m: np.ndarray, axis: int) -> np.ndarray:
    shifted = m - m.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def dual_normalize(s: np.ndarray) -> np.ndarray:
    """Elementwise product of column-wise and row-wise softmax of S.

    Suppresses pairs that are not mutually preferred; output entries lie
    in (0, 1) and are bounded by either single softmax.
    """
    return _softmax(s, axis=0) * _softmax(s, axis=1)


def _topk_mask(values: np.ndarray, k: int, axis: int) -> np.ndarray:
    """Boolean mask of the k largest entries along `axis`, ties to lower index."""
    moved = np.moveaxis(values, axis, -1)
    n = moved.shape[-1]
    k = min(k, n)
    # lexsort on (-value, index): stable rank with ascending-index ties
    order = np.lexsort((np.broadcast_to(np.arange(n), moved.shape), -moved), axis=-1)
    mask = np.zeros(moved.shape, dtype=bool)
    np.put_along_axis(mask, order[..., :k], True, axis=-1)
    return np.moveaxis(mask, -1, axis)


def mutual_topk_mask(a: np.ndarray, k: int) -> np.ndarray:
    """Cells that are in the top-k of both their row and their column."""
    return _topk_mask(a, k, axis=1) & _topk_mask(a, k, axis=0)


def extract_node_matches(a: np.ndarray, threshold: float, k: int) -> list:
    """Mutual top-k entries of the assignment matrix above `threshold`.

    Returns NodeMatch records with row/column indices and the assignment
    value as confidence, ordered by (i, j).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if a.size == 0:
        return []
    keep = mutual_topk_mask(a, k) & (a >= threshold)
    return [NodeMatch(int(i), int(j), float(a[i, j]))
            for i, j in np.argwhere(keep)]


def point_similarity(za: np.ndarray, zb: np.ndarray,
                     mask_a: np.ndarray = None, mask_b: np.ndarray = None) -> np.ndarray:
    """Raw dot-product scores; padded rows/columns get a -inf surrogate."""
    s = za @ zb.T
    if mask_a is not None:
        s[~np.asarray(mask_a, dtype=bool), :] = _MASKED_SCORE
    if mask_b is not None:
        s[:, ~np.asarray(mask_b, dtype=bool)] = _MASKED_SCORE
    return s


def _logsumexp(m: np.ndarray, axis: int) -> np.ndarray:
    mx = m.max(axis=axis, keepdims=True)
    out = mx.squeeze(axis) + np.log(np.exp(m - mx).sum(axis=axis))
    return out


def augment_with_dustbin(s: np.ndarray, dustbin_score: float) -> np.ndarray:
    n, m = s.shape
    out = np.full((n + 1, m + 1), float(dustbin_score))
    out[:n, :m] = s
    return out


def sinkhorn(s: np.ndarray, iters: int = 100, dustbin_score: float = 0.5,
             track_convergence: bool = False):
    """Log-domain optimal transport with a dustbin row and column.

    The score matrix is augmented with a dustbin at `dustbin_score`; real
    rows and columns carry unit mass while the dustbins absorb the excess
    (mass m and n respectively).  Alternating row/column normalization for
    `iters` rounds leaves rows 1..n and columns 1..m summing to 1 within
    1e-4 after around 100 iterations.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    n, m = s.shape
    z = augment_with_dustbin(s, dustbin_score)
    log_mu = np.concatenate([np.zeros(n), [np.log(m)] if m else [-np.inf]])
    log_nu = np.concatenate([np.zeros(m), [np.log(n)] if n else [-np.inf]])
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    deltas = []
    prev = None
    for _ in range(iters):
        u = log_mu - _logsumexp(z + v[None, :], axis=1)
        v = log_nu - _logsumexp(z + u[:, None], axis=0)
        if track_convergence:
            a = np.exp(z + u[:, None] + v[None, :])
            if prev is not None:
                deltas.append(float(np.abs(a - prev).max()))
            prev = a
    a = np.exp(z + u[:, None] + v[None, :])
    return (a, deltas) if track_convergence else a


def match_points(za: np.ndarray, zb: np.ndarray, points_a: np.ndarray,
                 points_b: np.ndarray, mask_a: np.ndarray, mask_b: np.ndarray,
                 cfg: MatcherConfig = None):
    """Point correspondences for one matched node pair.

    Runs similarity -> Sinkhorn -> mutual top-k on the non-dustbin block,
    keeping cells above the point threshold; padded slots never match.
    Returns (pairs_p, pairs_q, scores, index_pairs).
    """
    cfg = cfg or MatcherConfig()
    s = point_similarity(za, zb, mask_a, mask_b)
    a = sinkhorn(s, cfg.sinkhorn_iters, cfg.dustbin_score)
    block = a[:-1, :-1].copy()
    block[~np.asarray(mask_a, dtype=bool), :] = 0.0
    block[:, ~np.asarray(mask_b, dtype=bool)] = 0.0
    keep = mutual_topk_mask(block, cfg.point_topk) & (block >= cfg.point_threshold)
    keep &= np.asarray(mask_a, dtype=bool)[:, None] & np.asarray(mask_b, dtype=bool)[None, :]
    idx = np.argwhere(keep)
    scores = block[keep]
    return points_a[idx[:, 0]], points_b[idx[:, 1]], scores, idx


def assemble_correspondences(matches: list, per_pair: dict) -> CorrespondenceSet:
    """Concatenate per-node-pair sets, ordered by (i, j), tagged with ids."""
    parts = []
    for match in sorted(matches, key=lambda m: (m.i, m.j)):
        entry = per_pair.get((match.i, match.j))
        if entry is None or len(entry[2]) == 0:
            continue
        pa, pb, sc = entry[0], entry[1], entry[2]
        parts.append(CorrespondenceSet(pa, pb, sc,
                                       np.full(len(sc), match.i, dtype=np.int64),
                                       np.full(len(sc), match.j, dtype=np.int64)))
    return CorrespondenceSet.concatenate(parts)


@dataclass
class MatchResult:
    """Node matches (by node id), assignment matrices, and point pairs."""

    node_matches: list            # NodeMatch records carrying node ids
    assignment: np.ndarray        # fused-feature node assignment
    assignment_mid: np.ndarray    # pre-fusion node assignment (loss layer 1)
    correspondences: CorrespondenceSet


def match_graph_pair(fa: FeatureSet, fb: FeatureSet, weights: EncoderWeights,
                     cfg: MatcherConfig = None, with_points: bool = True) -> MatchResult:
    """Node matching on fused features, then point matching per node pair."""
    cfg = cfg or MatcherConfig()
    a_mid = dual_normalize(node_similarity(fa.x1, fb.x1, weights.linear_node_mid))
    a_full = dual_normalize(node_similarity(fa.x2, fb.x2, weights.linear_node))
    raw = extract_node_matches(a_full, cfg.node_threshold, cfg.node_topk)
    id_matches = [NodeMatch(fa.node_ids[m.i], fb.node_ids[m.j], m.confidence)
                  for m in raw]
    per_pair = {}
    if with_points:
        for m in raw:
            pa, pb, sc, _ = match_points(
                fa.point_feats[m.i], fb.point_feats[m.j],
                fa.node_points[m.i], fb.node_points[m.j],
                fa.point_mask[m.i], fb.point_mask[m.j], cfg)
            per_pair[(fa.node_ids[m.i], fb.node_ids[m.j])] = (pa, pb, sc)
    corr = assemble_correspondences(id_matches, per_pair)
    return MatchResult(id_matches, a_full, a_mid, corr)
