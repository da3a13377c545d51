"""Robust SE(3) estimation from point correspondences.

The distrust-and-verify back-end: correspondences are deduplicated with
NMS, fit by graduated non-convexity over truncated-least-squares weights,
and, when the estimated inlier ratio is low, re-hypothesized through
maximum cliques of a pyramid of rigidity-compatibility graphs.  A
voxel-based point-to-plane score picks the winning candidate.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist, squareform

from sgreg.matcher import CorrespondenceSet
from sgreg.scene_graph import Transform


class InsufficientDataError(ValueError):
    """Fewer than three usable correspondences."""


class DegenerateGeometryError(ValueError):
    """Source points are collinear or too few for a unique rigid fit."""


@dataclass
class EstimatorConfig:
    delta_levels: tuple = (0.1, 0.2, 0.3)   # meters, strictly increasing
    cbar: float = 0.1                       # meters, inlier cost threshold
    cbar_mahalanobis: float = 3.0           # unitless, covariance-weighted mode
    gnc_mu0: float = None                   # None: derived from max residual
    gnc_divisor: float = 1.4
    gnc_max_iters: int = 64
    mac_trigger: float = 0.3                # run cliques below this GNC inlier ratio
    nms_radius: float = 0.05                # meters
    verify_voxel: float = 0.2               # meters
    verify_penalty_factor: float = 3.0      # empty-voxel penalty, in voxels
    verify_sample_cap: int = 2000
    plane_min_points: int = 5
    plane_eig_ratio: float = 0.01
    clique_time_budget: float = 10.0        # seconds per level

    def __post_init__(self):
        levels = tuple(float(d) for d in self.delta_levels)
        if any(b <= a for a, b in zip(levels, levels[1:])) or any(d <= 0 for d in levels):
            raise ValueError("delta levels must be positive and strictly increasing")
        self.delta_levels = levels


def nms_correspondences(c: CorrespondenceSet, radius: float) -> CorrespondenceSet:
    """Greedy non-maximum suppression on source points, higher score wins."""
    kept = nms_indices(c, radius)
    return c.subset(kept)


def nms_indices(c: CorrespondenceSet, radius: float) -> np.ndarray:
    """Indices surviving NMS, in the original order."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    n = len(c)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(n), -c.score))
    tree = cKDTree(c.p)
    suppressed = np.zeros(n, dtype=bool)
    kept = []
    for i in order:
        if suppressed[i]:
            continue
        kept.append(i)
        for j in tree.query_ball_point(c.p[i], radius):
            if j != i and np.linalg.norm(c.p[j] - c.p[i]) < radius:
                suppressed[j] = True
    return np.sort(np.asarray(kept, dtype=np.int64))


def compatibility(pi: np.ndarray, qi: np.ndarray, pj: np.ndarray, qj: np.ndarray,
                  delta: float) -> bool:
    """Rigidity test: source and target gaps agree within delta."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    return abs(np.linalg.norm(pi - pj) - np.linalg.norm(qi - qj)) < delta


def pairwise_incompatibility(c: CorrespondenceSet) -> np.ndarray:
    """Matrix of |gap_p - gap_q| for all correspondence pairs."""
    n = len(c)
    if n < 2:
        return np.zeros((n, n))
    return np.abs(squareform(pdist(c.p)) - squareform(pdist(c.q)))


@dataclass
class CompatibilityGraph:
    """One pyramid level: sparse adjacency over correspondence indices."""

    level: int
    delta: float
    adjacency: sp.csr_matrix            # (n, n) bool, zero diagonal
    edges: np.ndarray = field(default=None)  # (E, 2) int, i < j

    def __post_init__(self):
        if not sp.issparse(self.adjacency):
            self.adjacency = sp.csr_matrix(np.asarray(self.adjacency, dtype=bool))
        if self.edges is None:
            upper = sp.triu(self.adjacency, k=1).tocoo()
            self.edges = np.stack([upper.row, upper.col], axis=1) if upper.nnz \
                else np.zeros((0, 2), dtype=np.int64)

    @property
    def n_vertices(self) -> int:
        return self.adjacency.shape[0]

    def dense(self) -> np.ndarray:
        return self.adjacency.toarray()

    def bitmasks(self) -> list:
        """Adjacency rows as Python-int bitmasks (fast set algebra)."""
        n = self.n_vertices
        indptr, indices = self.adjacency.indptr, self.adjacency.indices
        masks = []
        row = np.zeros(n, dtype=np.uint8)
        for v in range(n):
            nbrs = indices[indptr[v]:indptr[v + 1]]
            row[nbrs] = 1
            masks.append(int.from_bytes(
                np.packbits(row, bitorder="little").tobytes(), "little"))
            row[nbrs] = 0
        return masks


def build_pyramid(c: CorrespondenceSet, delta_levels) -> list:
    """Compatibility graphs at increasing delta; edge sets are nested."""
    levels = list(delta_levels)
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError("delta levels must be strictly increasing")
    diff = pairwise_incompatibility(c)
    np.fill_diagonal(diff, np.inf)
    return [CompatibilityGraph(idx, float(d), sp.csr_matrix(diff < d))
            for idx, d in enumerate(levels)]


@dataclass
class CliqueResult:
    vertices: np.ndarray
    exact: bool

    def __len__(self) -> int:
        return len(self.vertices)


def _greedy_clique(adj: list, order) -> list:
    clique = []
    mask = 0
    for v in map(int, order):
        if (mask & ~adj[v]) == 0:
            clique.append(v)
            mask |= 1 << v
    return clique


def max_clique(graph: CompatibilityGraph, time_budget: float = None) -> CliqueResult:
    """Branch-and-bound maximum clique with greedy-coloring bounds.

    A single index-order greedy pass seeds the incumbent; on dense graphs
    it lands near the optimum and the coloring bound closes the search
    immediately, while mid-density graphs pay for real exploration.
    Exact within the time budget; on timeout the best clique found so far
    is returned with exact=False.
    """
    n = graph.n_vertices
    if n == 0:
        return CliqueResult(np.zeros(0, dtype=np.int64), True)
    adj = graph.bitmasks()
    best = _greedy_clique(adj, range(n))
    best_size = len(best)
    deadline = (time.monotonic() + time_budget) if time_budget else None
    state = {"best": list(best), "best_size": best_size, "exact": True, "ticks": 0}
    full = (1 << n) - 1

    def color_order(cand: int):
        # Greedy coloring: vertices grouped into independent sets; the
        # color index is an upper bound on the clique size within cand.
        verts, bounds = [], []
        color = 0
        left = cand
        while left:
            color += 1
            avail = left
            while avail:
                low = avail & -avail
                v = low.bit_length() - 1
                avail &= ~adj[v] & ~low
                left &= ~low
                verts.append(v)
                bounds.append(color)
        return verts, bounds

    def expand(current: list, cand: int):
        state["ticks"] += 1
        if deadline is not None and state["ticks"] % 256 == 0 \
                and time.monotonic() > deadline:
            state["exact"] = False
            return
        verts, bounds = color_order(cand)
        for i in range(len(verts) - 1, -1, -1):
            if not state["exact"]:
                return
            if len(current) + bounds[i] <= state["best_size"]:
                return
            v = verts[i]
            current.append(v)
            sub = cand & adj[v]
            if sub:
                expand(current, sub)
            elif len(current) > state["best_size"]:
                state["best"] = list(current)
                state["best_size"] = len(current)
            current.pop()
            cand &= ~(1 << v)

    expand([], full)
    return CliqueResult(np.sort(np.asarray(state["best"], dtype=np.int64)),
                        state["exact"])


def svd_align(p: np.ndarray, q: np.ndarray, weights: np.ndarray = None) -> Transform:
    """Closed-form (weighted) least-squares rigid transform p -> q.

    Cross-covariance SVD with reflection correction.  Raises
    DegenerateGeometryError for fewer than three effective pairs or
    collinear sources.
    """
    p = np.asarray(p, dtype=float).reshape(-1, 3)
    q = np.asarray(q, dtype=float).reshape(-1, 3)
    if p.shape != q.shape:
        raise ValueError("point sets must have matching shapes")
    if weights is None:
        weights = np.ones(p.shape[0])
    w = np.asarray(weights, dtype=float)
    if (w > 0).sum() < 3:
        raise DegenerateGeometryError("need at least 3 pairs with positive weight")
    wsum = w.sum()
    cp = (w[:, None] * p).sum(axis=0) / wsum
    cq = (w[:, None] * q).sum(axis=0) / wsum
    pc = p - cp
    sv = np.linalg.svd(pc[w > 0], compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise DegenerateGeometryError("source points are collinear")
    h = (w[:, None] * pc).T @ (q - cq)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return Transform(rot, cq - rot @ cp)


def _residuals(p, q, t: Transform, covariances=None, rot_for_cov=None):
    """Squared residuals, Euclidean or Mahalanobis (Eq.-style covariance)."""
    d = q - t.apply(p)
    if covariances is None:
        return (d * d).sum(axis=1), None
    cov_x, cov_y = covariances
    rot = t.rotation if rot_for_cov is None else rot_for_cov
    m = cov_y + rot @ cov_x @ rot.T if cov_x.ndim == 2 \
        else cov_y + np.einsum("ab,nbc,dc->nad", rot, cov_x, rot)
    r = np.einsum("ni,nij,nj->n", d, np.linalg.inv(m), d)
    # Inverse mean eigenvalue: scalar surrogate for the closed-form step.
    scale = 3.0 / np.einsum("nii->n", m)
    return r, scale


def gnc_tls(p: np.ndarray, q: np.ndarray, cbar: float,
            mu0: float = None, divisor: float = 1.4, max_iters: int = 64,
            covariances=None):
    """Graduated non-convexity over truncated-least-squares weights.

    Minimizes sum(min(r_k, cbar^2)) by alternating weighted SVD alignment
    with TLS weight updates while annealing the surrogate parameter (the
    control starts at a value set by the largest residual and is divided
    by `divisor` each round).  With `covariances=(cov_x, cov_y)` the
    residual is the Mahalanobis form and cbar is unitless.

    Returns (transform, inlier_flags) where flags are weights > 0.5.
    """
    p = np.asarray(p, dtype=float).reshape(-1, 3)
    q = np.asarray(q, dtype=float).reshape(-1, 3)
    if p.shape[0] < 3:
        raise InsufficientDataError("need at least 3 correspondences")
    t = svd_align(p, q)
    r, scale = _residuals(p, q, t, covariances)
    c2 = cbar * cbar
    nu = mu0 if mu0 is not None else max(1.0, 2.0 * float(r.max()) / c2 - 1.0)
    w = np.ones(p.shape[0])
    for _ in range(max_iters):
        th_low = c2 / (1.0 + nu)
        th_high = c2 * (1.0 + nu)
        w = np.zeros_like(r)
        w[r <= th_low] = 1.0
        mid = (r > th_low) & (r < th_high)
        w[mid] = (cbar * np.sqrt((1.0 + nu) / r[mid]) - 1.0) / nu
        fit_w = w if scale is None else w * scale
        t = svd_align(p, q, fit_w)
        r, scale = _residuals(p, q, t, covariances)
        if nu <= 1e-3 and (w > 0.99).sum() + (w < 0.01).sum() == len(w):
            break
        nu = max(nu / divisor, 1e-6)
    return t, w > 0.5


def _voxel_cells(points: np.ndarray, voxel: float) -> np.ndarray:
    return np.floor(points / voxel).astype(np.int64)


def verify(candidate: Transform, x_cloud: np.ndarray, y_cloud: np.ndarray,
           voxel: float = 0.2, penalty_factor: float = 3.0,
           sample_cap: int = 2000, plane_min_points: int = 5,
           plane_eig_ratio: float = 0.01) -> float:
    """Geometric fitness of a candidate: lower is better.

    The target cloud is voxelized; well-conditioned voxels contribute
    point-to-plane distances for the transformed source samples, other
    occupied voxels point-to-centroid distances, and misses a fixed
    penalty of penalty_factor * voxel.
    """
    x_cloud = np.asarray(x_cloud, dtype=float).reshape(-1, 3)
    y_cloud = np.asarray(y_cloud, dtype=float).reshape(-1, 3)
    if len(x_cloud) == 0 or len(y_cloud) == 0:
        raise ValueError("clouds must be non-empty")
    cells = _voxel_cells(y_cloud, voxel)
    table = {}
    for idx, key in enumerate(map(tuple, cells)):
        table.setdefault(key, []).append(idx)
    stats = {}
    for key, idxs in table.items():
        pts = y_cloud[idxs]
        centroid = pts.mean(axis=0)
        normal = None
        if len(idxs) >= plane_min_points:
            evals, evecs = np.linalg.eigh(np.cov(pts.T))
            if evals[0] <= plane_eig_ratio * max(evals[-1], 1e-300):
                normal = evecs[:, 0]
        stats[key] = (centroid, normal)
    if len(x_cloud) > sample_cap:
        sample = x_cloud[np.unique(np.linspace(0, len(x_cloud) - 1, sample_cap,
                                               dtype=np.int64))]
    else:
        sample = x_cloud
    moved = candidate.apply(sample)
    penalty = penalty_factor * voxel
    total = 0.0
    for pt, key in zip(moved, map(tuple, _voxel_cells(moved, voxel))):
        hit = stats.get(key)
        if hit is None:
            total += penalty
        elif hit[1] is not None:
            total += abs(float((pt - hit[0]) @ hit[1]))
        else:
            total += float(np.linalg.norm(pt - hit[0]))
    return total / len(moved)


@dataclass
class Candidate:
    transform: Transform
    inlier_count: int
    verification_score: float
    source: str                      # "gnc" or "mac-level-<k>"


@dataclass
class EstimateResult:
    transform: Transform
    inlier_indices: np.ndarray       # into the post-NMS correspondence set
    inlier_ratio: float
    candidates: list                 # Candidate records, evaluation order
    strategy: str                    # "GNC-only" or "MAC+GNC"
    nms_indices: np.ndarray          # post-NMS indices into the input set
    clique_exact: bool = True

    def report(self) -> str:
        lines = [f"strategy {self.strategy}",
                 f"inliers {len(self.inlier_indices)} ratio {self.inlier_ratio:.4f}"]
        for c in self.candidates:
            flat = " ".join(f"{v:.6f}" for v in c.transform.as_matrix().ravel())
            lines.append(f"candidate {c.source} inliers {c.inlier_count} "
                         f"score {c.verification_score:.6f} transform {flat}")
        return "\n".join(lines)


def estimate(c: CorrespondenceSet, x_cloud: np.ndarray, y_cloud: np.ndarray,
             cfg: EstimatorConfig = None, covariances=None) -> EstimateResult:
    """Full robust estimation: NMS, GNC, optional MAC pyramid, verification.

    GNC runs on everything first; when its inlier ratio reaches the
    trigger its transform is the sole candidate, otherwise one maximum
    clique per pyramid level proposes candidates and the verification
    score decides.
    """
    cfg = cfg or EstimatorConfig()
    if len(c) < 3:
        raise InsufficientDataError(f"got {len(c)} correspondences, need >= 3")
    kept = nms_indices(c, cfg.nms_radius)
    pruned = c.subset(kept)
    if len(pruned) < 3:
        raise InsufficientDataError("fewer than 3 correspondences after NMS")
    sub_cov = None
    cbar = cfg.cbar
    if covariances is not None:
        sub_cov = (covariances[0][kept], covariances[1][kept])
        cbar = cfg.cbar_mahalanobis
    t_gnc, gnc_inliers = gnc_tls(pruned.p, pruned.q, cbar, cfg.gnc_mu0,
                                 cfg.gnc_divisor, cfg.gnc_max_iters, sub_cov)
    gnc_ratio = float(gnc_inliers.mean())
    proposals = [(t_gnc, int(gnc_inliers.sum()), "gnc")]
    clique_exact = True
    if gnc_ratio >= cfg.mac_trigger:
        strategy = "GNC-only"
    else:
        strategy = "MAC+GNC"
        for level in build_pyramid(pruned, cfg.delta_levels):
            clique = max_clique(level, cfg.clique_time_budget)
            clique_exact &= clique.exact
            if len(clique) < 3:
                continue
            sel = clique.vertices
            lvl_cov = None if sub_cov is None else (sub_cov[0][sel], sub_cov[1][sel])
            try:
                t_lvl, w_lvl = gnc_tls(pruned.p[sel], pruned.q[sel], cbar,
                                       cfg.gnc_mu0, cfg.gnc_divisor,
                                       cfg.gnc_max_iters, lvl_cov)
            except DegenerateGeometryError:
                continue
            proposals.append((t_lvl, int(w_lvl.sum()), f"mac-level-{level.level}"))
    if strategy == "GNC-only":
        chosen_props = proposals[:1]
    else:
        chosen_props = proposals[1:] or proposals[:1]
    candidates = [
        Candidate(t, n_inl, verify(t, x_cloud, y_cloud, cfg.verify_voxel,
                                   cfg.verify_penalty_factor, cfg.verify_sample_cap,
                                   cfg.plane_min_points, cfg.plane_eig_ratio), tag)
        for t, n_inl, tag in chosen_props
    ]
    winner = min(candidates, key=lambda cand: cand.verification_score)
    r_final, _ = _residuals(pruned.p, pruned.q, winner.transform, sub_cov)
    flags = r_final < cbar * cbar
    return EstimateResult(winner.transform, np.flatnonzero(flags),
                          float(flags.mean()), candidates, strategy, kept,
                          clique_exact)
