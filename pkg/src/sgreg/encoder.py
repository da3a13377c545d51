"""Deterministic node-feature encoder.

Layer 0 concatenates a hashed semantic-label embedding with a small box
MLP.  One (or more) triplet-boosted message-passing layers aggregate
local topology: each sampled neighbor-pair triplet is embedded with
yaw-invariant geometry (edge lengths, corner angle) and attended over.
A shape stage pools rigid-invariant per-point descriptors into node
shape features, fused by concatenation.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.spatial import cKDTree

from sgreg.scene_graph import SceneGraph

_WEIGHT_MAGIC = b"SGRW"
_WEIGHT_VERSION = 1


@dataclass
class EncoderConfig:
    d: int = 64            # node feature width before fusion
    d_b: int = 16          # box feature width (semantic part gets d - d_b)
    d_s: int = 32          # shape feature width
    d_z: int = 32          # per-point feature width
    k_p: int = 256         # points kept per node (subsample or pad)
    max_triplets: int = 16
    num_gnn_layers: int = 1
    fusion: str = "late"   # "late" (after GNN) or "early" (before)
    dim_length: int = 8    # sinusoidal dims for edge lengths / distances
    dim_angle: int = 8     # sinusoidal dims for the corner angle cosine
    dim_density: int = 8   # sinusoidal dims for local point density
    base_length: float = 100.0
    base_angle: float = 10.0
    base_density: float = 10.0
    r_local: float = 0.2          # meters; neighborhood for point density
    point_feature_scale: float = 5.0  # L2 norm of each point feature row
    node_feature_scale: float = 4.0   # L2 norm of post-GNN rows
    shape_feature_scale: float = 3.0  # L2 norm of shape rows
    seed: int = 0

    def __post_init__(self):
        if self.d_b >= self.d:
            raise ValueError("d_b must be smaller than d")
        for name in ("dim_length", "dim_angle", "dim_density"):
            if getattr(self, name) % 2:
                raise ValueError(f"{name} must be even")
        if self.fusion not in ("late", "early"):
            raise ValueError("fusion must be 'late' or 'early'")

    @property
    def node_dim(self) -> int:
        """Width of the features the GNN operates on."""
        return self.d + self.d_s if self.fusion == "early" else self.d

    @property
    def match_dim(self) -> int:
        """Width of the final fused node features."""
        return self.d + self.d_s

    @property
    def g_dim(self) -> int:
        return 2 * self.dim_length + self.dim_angle

    @property
    def triplet_dim(self) -> int:
        return 2 * self.node_dim + self.g_dim

    @property
    def point_raw_dim(self) -> int:
        return self.dim_length + self.dim_density


def semantic_embedding(label: str, dim: int) -> np.ndarray:
    """Deterministic unit vector for a text label.

    The trimmed, lowercased label is hashed (blake2b, 8 bytes) into a PRNG
    seed that draws a Gaussian vector, normalized to unit length.  Equal
    labels embed identically on every platform; distinct labels are nearly
    orthogonal for reasonable dims.  Empty labels map to "none".
    """
    text = (label or "").strip().lower() or "none"
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    seed = int.from_bytes(digest, "little")
    v = np.random.default_rng(np.random.SeedSequence(seed)).standard_normal(dim)
    return v / np.linalg.norm(v)


def sinusoidal_embed(value, dims: int, period_base: float) -> np.ndarray:
    """Interleaved sin/cos embedding of a scalar (or array of scalars).

    Entry 2m is sin(value / period_base^(2m/dims)), entry 2m+1 the cosine
    of the same argument.  Output shape is value.shape + (dims,).
    """
    if dims % 2:
        raise ValueError("dims must be even")
    if period_base <= 0:
        raise ValueError("period_base must be positive")
    value = np.asarray(value, dtype=float)
    exponents = np.arange(0, dims, 2, dtype=float) / dims
    args = value[..., None] / period_base ** exponents
    out = np.empty(value.shape + (dims,))
    out[..., 0::2] = np.sin(args)
    out[..., 1::2] = np.cos(args)
    return out


def _seeded(seed_parts, shape, scale) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(list(seed_parts)))
    return rng.standard_normal(shape) * scale


@dataclass
class EncoderWeights:
    """All dense-layer weights; immutable once built, seeded or file-loaded."""

    config: EncoderConfig
    box_w: np.ndarray        # (d_b, 3)
    box_b: np.ndarray        # (d_b,)
    wq: np.ndarray           # (d, triplet_dim)
    wk: np.ndarray           # (d, triplet_dim)
    wv: np.ndarray           # (node_dim, triplet_dim)
    msg_w: np.ndarray        # (node_dim, 2 * node_dim)
    msg_b: np.ndarray        # (node_dim,)
    linear_node: np.ndarray  # (match_dim, match_dim), Linear() in node similarity
    linear_node_mid: np.ndarray  # (node_dim, node_dim), pre-fusion similarity
    point_w: np.ndarray      # (d_z, point_raw_dim)
    point_b: np.ndarray      # (d_z,)
    shape_w: np.ndarray      # (d_s, d_z)
    shape_b: np.ndarray      # (d_s,)
    label_table: dict = field(default_factory=dict)  # optional exported embeddings

    @staticmethod
    def seeded(config: EncoderConfig = None) -> "EncoderWeights":
        cfg = config or EncoderConfig()
        s = cfg.seed

        def w(tag, shape, gain=1.0):
            fan_in = shape[-1] if len(shape) > 1 else shape[0]
            return _seeded([s, tag], shape, gain / np.sqrt(fan_in))

        def ortho(tag, dim):
            # Orthogonal init keeps dot-product similarities undistorted.
            q, r = np.linalg.qr(_seeded([s, tag], (dim, dim), 1.0))
            return q * np.sign(np.diag(r))

        # The box and message branches start small so the unit-norm
        # semantic embedding stays the dominant component of a node row.
        return EncoderWeights(
            config=cfg,
            box_w=w(1, (cfg.d_b, 3), gain=0.15),
            box_b=w(2, (cfg.d_b,), gain=0.15),
            wq=w(3, (cfg.d, cfg.triplet_dim)),
            wk=w(4, (cfg.d, cfg.triplet_dim)),
            wv=w(5, (cfg.node_dim, cfg.triplet_dim)),
            msg_w=w(6, (cfg.node_dim, 2 * cfg.node_dim), gain=0.1),
            msg_b=w(7, (cfg.node_dim,), gain=0.1),
            linear_node=ortho(8, cfg.match_dim),
            linear_node_mid=ortho(9, cfg.node_dim),
            point_w=w(10, (cfg.d_z, cfg.point_raw_dim)),
            point_b=w(11, (cfg.d_z,)),
            shape_w=w(12, (cfg.d_s, cfg.d_z)),
            shape_b=w(13, (cfg.d_s,)),
        )

    def semantic(self, label: str) -> np.ndarray:
        key = (label or "").strip().lower() or "none"
        if key in self.label_table:
            return self.label_table[key]
        return semantic_embedding(label, self.config.d - self.config.d_b)


_TENSOR_ORDER = ("box_w", "box_b", "wq", "wk", "wv", "msg_w", "msg_b",
                 "linear_node", "linear_node_mid", "point_w", "point_b",
                 "shape_w", "shape_b")


def save_weights(weights: EncoderWeights, path) -> None:
    """Binary dump: header with dims, then float32 tensors in fixed order."""
    cfg = weights.config
    header = struct.pack(
        "<4sI10I5f",
        _WEIGHT_MAGIC, _WEIGHT_VERSION,
        cfg.d, cfg.d_b, cfg.d_s, cfg.d_z, cfg.k_p, cfg.max_triplets,
        cfg.num_gnn_layers, cfg.dim_length, cfg.dim_angle, cfg.dim_density,
        cfg.base_length, cfg.base_angle, cfg.base_density, cfg.r_local,
        cfg.point_feature_scale,
    ) + struct.pack("<B", 1 if cfg.fusion == "early" else 0)
    with open(path, "wb") as fh:
        fh.write(header)
        for name in _TENSOR_ORDER:
            fh.write(np.ascontiguousarray(getattr(weights, name),
                                          dtype="<f4").tobytes())


def load_weights(path) -> EncoderWeights:
    with open(path, "rb") as fh:
        raw = fh.read()
    head_fmt = "<4sI10I5f"
    head_size = struct.calcsize(head_fmt)
    magic, version, d, d_b, d_s, d_z, k_p, max_t, n_layers, dim_l, dim_a, dim_dn, \
        base_l, base_a, base_dn, r_loc, pf_scale = struct.unpack_from(head_fmt, raw)
    if magic != _WEIGHT_MAGIC:
        raise ValueError("not a weight file (bad magic)")
    if version != _WEIGHT_VERSION:
        raise ValueError(f"unsupported weight file version {version}")
    fusion = struct.unpack_from("<B", raw, head_size)[0]
    cfg = EncoderConfig(d=d, d_b=d_b, d_s=d_s, d_z=d_z, k_p=k_p,
                        max_triplets=max_t, num_gnn_layers=n_layers,
                        fusion="early" if fusion else "late",
                        dim_length=dim_l, dim_angle=dim_a, dim_density=dim_dn,
                        base_length=base_l, base_angle=base_a,
                        base_density=base_dn, r_local=r_loc,
                        point_feature_scale=pf_scale)
    shapes = {
        "box_w": (cfg.d_b, 3), "box_b": (cfg.d_b,),
        "wq": (cfg.d, cfg.triplet_dim), "wk": (cfg.d, cfg.triplet_dim),
        "wv": (cfg.node_dim, cfg.triplet_dim),
        "msg_w": (cfg.node_dim, 2 * cfg.node_dim), "msg_b": (cfg.node_dim,),
        "linear_node": (cfg.match_dim, cfg.match_dim),
        "linear_node_mid": (cfg.node_dim, cfg.node_dim),
        "point_w": (cfg.d_z, cfg.point_raw_dim), "point_b": (cfg.d_z,),
        "shape_w": (cfg.d_s, cfg.d_z), "shape_b": (cfg.d_s,),
    }
    offset = head_size + 1
    tensors = {}
    for name in _TENSOR_ORDER:
        count = int(np.prod(shapes[name]))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        tensors[name] = arr.astype(float).reshape(shapes[name])
        offset += count * 4
    return EncoderWeights(config=cfg, **tensors)


@dataclass(frozen=True)
class TripletDescriptor:
    """Anchor node plus two corner neighbors in canonical order."""

    anchor: int
    corners: tuple          # (first, second) node ids, anti-clockwise about z
    feature: np.ndarray     # concat(x0_first, x0_second, geometry)


def init_node_features(graph: SceneGraph, weights: EncoderWeights) -> np.ndarray:
    """Layer-0 features: [semantic embedding || box MLP], one row per node."""
    cfg = weights.config
    rows = np.empty((len(graph.nodes), cfg.d))
    for r, node in enumerate(graph.nodes):
        rows[r, :cfg.d - cfg.d_b] = weights.semantic(node.label)
        rows[r, cfg.d - cfg.d_b:] = weights.box_w @ node.box + weights.box_b
    return rows


def _canonical_corners(centers: dict, i: int, j: int, k: int):
    """Order (j, k) anti-clockwise about z as seen from anchor i."""
    e_ij = centers[j] - centers[i]
    e_ik = centers[k] - centers[i]
    if np.linalg.norm(e_ij) == 0.0 or np.linalg.norm(e_ik) == 0.0:
        raise ValueError(f"degenerate triplet: coincident centers at anchor {i}")
    cross_z = e_ij[0] * e_ik[1] - e_ij[1] * e_ik[0]
    if cross_z > 0:
        return j, k
    if cross_z < 0:
        return k, j
    return (j, k) if j < k else (k, j)  # collinear tie: stable by id


def triplet_geometry(centers: dict, i: int, first: int, second: int,
                     cfg: EncoderConfig) -> np.ndarray:
    """Yaw-invariant embedding of edge lengths and the corner angle."""
    e1 = centers[first] - centers[i]
    e2 = centers[second] - centers[i]
    l1, l2 = np.linalg.norm(e1), np.linalg.norm(e2)
    cos_angle = float(np.dot(e1, e2) / (l1 * l2))
    return np.concatenate([
        sinusoidal_embed(l1, cfg.dim_length, cfg.base_length),
        sinusoidal_embed(l2, cfg.dim_length, cfg.base_length),
        sinusoidal_embed(cos_angle, cfg.dim_angle, cfg.base_angle),
    ])


def triplet_feature(graph: SceneGraph, x0: np.ndarray, i: int, j: int, k: int,
                    weights: EncoderWeights) -> TripletDescriptor:
    """Descriptor of triplet (anchor i, neighbors j and k)."""
    if j == k:
        raise ValueError("triplet corners must be distinct")
    cfg = weights.config
    centers = {n.id: n.center for n in graph.nodes}
    row = {n.id: r for r, n in enumerate(graph.nodes)}
    first, second = _canonical_corners(centers, i, j, k)
    g = triplet_geometry(centers, i, first, second, cfg)
    feat = np.concatenate([x0[row[first]], x0[row[second]], g])
    return TripletDescriptor(anchor=i, corners=(first, second), feature=feat)


def sample_triplets(graph: SceneGraph, i: int, max_triplets: int, seed: int) -> list:
    """Up to `max_triplets` distinct neighbor pairs of node i, uniform.

    Sampling is keyed on (seed, node id), so it is independent of the node
    order in the graph; all pairs are returned when few enough exist.
    """
    neighbors = graph.neighbors(i)
    if len(neighbors) < 2:
        return []
    pairs = list(combinations(neighbors, 2))
    if len(pairs) <= max_triplets:
        return pairs
    rng = np.random.default_rng(np.random.SeedSequence([seed, i & 0x7FFFFFFF, 0x731]))
    chosen = rng.choice(len(pairs), size=max_triplets, replace=False)
    return [pairs[c] for c in sorted(chosen)]


def gnn_layer(graph: SceneGraph, x0: np.ndarray, weights: EncoderWeights,
              max_triplets: int = None, seed: int = 0,
              return_attention: bool = False):
    """One residual message-passing update over sampled triplets.

    x1_i = x0_i + msg_mlp([x0_i || m_i]) with m_i an attention-weighted sum
    of projected triplet features; nodes with fewer than two neighbors get
    m_i = 0.
    """
    cfg = weights.config
    if max_triplets is None:
        max_triplets = cfg.max_triplets
    centers = {n.id: n.center for n in graph.nodes}
    row = {n.id: r for r, n in enumerate(graph.nodes)}
    x1 = np.empty_like(x0)
    attention = {}
    for r, node in enumerate(graph.nodes):
        pairs = sample_triplets(graph, node.id, max_triplets, seed)
        if pairs:
            feats = []
            for j, k in pairs:
                first, second = _canonical_corners(centers, node.id, j, k)
                g = triplet_geometry(centers, node.id, first, second, cfg)
                feats.append(np.concatenate([x0[row[first]], x0[row[second]], g]))
            t = np.stack(feats)                      # (n_t, triplet_dim)
            q = t @ weights.wq.T
            k_proj = t @ weights.wk.T
            scores = (q * k_proj).sum(axis=1) / np.sqrt(cfg.d)
            scores -= scores.max()
            alpha = np.exp(scores)
            alpha /= alpha.sum()
            m = alpha @ (t @ weights.wv.T)
            attention[node.id] = alpha
        else:
            m = np.zeros(x0.shape[1])
            attention[node.id] = np.empty(0)
        x1[r] = x0[r] + weights.msg_w @ np.concatenate([x0[r], m]) + weights.msg_b
    return (x1, attention) if return_attention else x1


def encode_shape(graph: SceneGraph, weights: EncoderWeights, seed: int = 0):
    """Per-node point features and pooled shape features.

    Each point is described by two rigid-invariant scalars (distance to the
    node centroid and the fraction of the cloud within r_local), embedded
    sinusoidally and passed through a dense layer.  Exactly k_p points per
    node survive via seeded subsampling or zero-padding (mask marks real
    slots).  Shape features are a masked mean-pool through a dense layer.
    """
    cfg = weights.config
    n = len(graph.nodes)
    node_points = np.zeros((n, cfg.k_p, 3))
    point_feats = np.zeros((n, cfg.k_p, cfg.d_z))
    mask = np.zeros((n, cfg.k_p), dtype=bool)
    indices = np.full((n, cfg.k_p), -1, dtype=np.int64)
    shape = np.empty((n, cfg.d_s))
    for r, node in enumerate(graph.nodes):
        pts = node.points
        if pts.shape[0] == 0:
            raise ValueError(f"node {node.id}: empty point cloud")
        dists = np.linalg.norm(pts - pts.mean(axis=0), axis=1)
        counts = cKDTree(pts).query_ball_point(pts, cfg.r_local, return_length=True)
        density = counts / pts.shape[0]
        if pts.shape[0] > cfg.k_p:
            rng = np.random.default_rng(
                np.random.SeedSequence([seed, node.id & 0x7FFFFFFF, 0x5A9]))
            idx = np.sort(rng.choice(pts.shape[0], size=cfg.k_p, replace=False))
        else:
            idx = np.arange(pts.shape[0])
        raw_all = np.concatenate([
            sinusoidal_embed(dists, cfg.dim_length, cfg.base_length),
            sinusoidal_embed(density, cfg.dim_density, cfg.base_density),
        ], axis=1)
        # Centering on the full-cloud mean removes the common embedding
        # backbone (so projected directions separate points) and stays
        # stable under subsampling.
        raw = raw_all[idx] - raw_all.mean(axis=0)
        z = raw @ weights.point_w.T + weights.point_b
        norms = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
        z *= cfg.point_feature_scale / norms
        node_points[r, :len(idx)] = pts[idx]
        point_feats[r, :len(idx)] = z
        mask[r, :len(idx)] = True
        indices[r, :len(idx)] = idx
        pooled = weights.shape_w @ z.mean(axis=0) + weights.shape_b
        shape[r] = pooled * (cfg.shape_feature_scale / np.linalg.norm(pooled))
    return shape, node_points, point_feats, mask, indices


def fuse_features(x1: np.ndarray, shape: np.ndarray) -> np.ndarray:
    """Row-wise concatenation of GNN and shape features."""
    if x1.shape[0] != shape.shape[0]:
        raise ValueError(f"row mismatch: {x1.shape[0]} vs {shape.shape[0]}")
    return np.concatenate([x1, shape], axis=1)


@dataclass
class FeatureSet:
    """All encoder outputs for one graph, rows ordered like graph.nodes."""

    node_ids: list
    x0: np.ndarray           # (n, node_dim) layer-0 features
    x1: np.ndarray           # (n, node_dim) post-GNN
    shape: np.ndarray        # (n, d_s)
    x2: np.ndarray           # (n, match_dim) fused
    node_points: np.ndarray  # (n, k_p, 3)
    point_feats: np.ndarray  # (n, k_p, d_z)
    point_mask: np.ndarray   # (n, k_p) bool, False on padded slots
    point_indices: np.ndarray = None  # (n, k_p) indices into the full cloud, -1 pad

    def row_of(self, node_id: int) -> int:
        return self.node_ids.index(node_id)


def encode(graph: SceneGraph, weights: EncoderWeights, seed: int = 0) -> FeatureSet:
    """Full forward pass: init -> triplet GNN -> shape -> fusion."""
    cfg = weights.config
    x0 = init_node_features(graph, weights)
    shape, node_points, point_feats, mask, indices = encode_shape(graph, weights, seed)
    if cfg.fusion == "early":
        x0 = fuse_features(x0, shape)
    x1 = x0
    for _ in range(cfg.num_gnn_layers):
        x1 = gnn_layer(graph, x1, weights, cfg.max_triplets, seed)
    # Row normalization keeps dot-product similarities in a usable range
    # regardless of the residual stack's output magnitude.
    norms = np.linalg.norm(x1, axis=1, keepdims=True)
    x1 = x1 * (cfg.node_feature_scale / np.maximum(norms, 1e-12))
    x2 = x1 if cfg.fusion == "early" else fuse_features(x1, shape)
    return FeatureSet([n.id for n in graph.nodes], x0, x1, shape, x2,
                      node_points, point_feats, mask, indices)
