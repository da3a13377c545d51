"""Scene-graph data model, synthetic scene generation, and ground truth.

A scene graph holds semantic nodes (label, bounding-box extents, center,
point cloud) and proximity edges between node centers.  Ground-truth node
matches between two graphs are decided by voxelized point-cloud IoU under
the true relative transform.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

TAU_IOU = 0.3            # IoU threshold for a true-positive node pair
POINT_MATCH_DIST = 0.05  # meters; ground-truth point-pair distance
IOU_VOXEL = 0.05         # meters; voxel size for point-cloud IoU

# Axis-aligned extents are floored so box components stay positive even
# for degenerate (planar or single-point) clouds.
_MIN_EXTENT = 1e-3


class SceneGraphParseError(ValueError):
    """Raised when a scene-graph file is malformed; names the bad field."""


@dataclass(frozen=True)
class Transform:
    """Rigid SE(3) transform: p -> rotation @ p + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Apply to one point (3,) or a stack of points (N, 3)."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "Transform") -> "Transform":
        """Return self∘other: apply `other` first, then `self`."""
        return Transform(self.rotation @ other.rotation,
                         self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Transform":
        return Transform(self.rotation.T, -self.rotation.T @ self.translation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def identity() -> "Transform":
        return Transform(np.eye(3), np.zeros(3))

    @staticmethod
    def yaw(angle: float, translation=(0.0, 0.0, 0.0)) -> "Transform":
        c, s = math.cos(angle), math.sin(angle)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return Transform(R, np.asarray(translation, dtype=float))


@dataclass(frozen=True)
class SemanticNode:
    """One object instance: id, text label, box extents, center, points."""

    id: int
    label: str
    box: np.ndarray      # (3,) length/width/height, meters
    center: np.ndarray   # (3,) meters
    points: np.ndarray   # (N, 3) meters

    def __post_init__(self):
        box = np.asarray(self.box, dtype=float).reshape(3)
        center = np.asarray(self.center, dtype=float).reshape(3)
        points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if points.shape[0] < 1:
            raise ValueError(f"node {self.id}: needs at least one point")
        if not np.all(box > 0):
            raise ValueError(f"node {self.id}: box components must be positive")
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "points", points)

    @staticmethod
    def from_points(node_id: int, label: str, points: np.ndarray) -> "SemanticNode":
        """Build a node with center = centroid and box = AABB extents."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        center = points.mean(axis=0)
        extents = np.maximum(points.max(axis=0) - points.min(axis=0), _MIN_EXTENT)
        return SemanticNode(node_id, label, extents, center, points)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.box))


@dataclass
class SceneGraph:
    """Node list plus a set of unordered (i, j) node-id edge pairs."""

    nodes: list
    edges: set = field(default_factory=set)

    def __post_init__(self):
        ids = [n.id for n in self.nodes]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate node ids")
        known = set(ids)
        normalized = set()
        for e in self.edges:
            i, j = e
            if i == j:
                raise ValueError(f"self-edge on node {i}")
            if i not in known or j not in known:
                raise ValueError(f"edge ({i},{j}) references unknown node id")
            normalized.add((min(i, j), max(i, j)))
        self.edges = normalized

    def node_by_id(self, node_id: int) -> SemanticNode:
        return self._index()[node_id]

    def _index(self) -> dict:
        if not hasattr(self, "_id_map") or len(self._id_map) != len(self.nodes):
            self._id_map = {n.id: n for n in self.nodes}
        return self._id_map

    def neighbors(self, node_id: int) -> list:
        """Sorted neighbor ids of `node_id`."""
        out = []
        for i, j in self.edges:
            if i == node_id:
                out.append(j)
            elif j == node_id:
                out.append(i)
        return sorted(out)

    def stacked_points(self) -> np.ndarray:
        """All node point clouds stacked into one (M, 3) array."""
        return np.vstack([n.points for n in self.nodes])


@dataclass
class GroundTruth:
    """True node matches, per-node negatives, point matches, and pose."""

    node_matches: set                 # {(id_a, id_b)}
    negatives_per_node: dict          # id_a -> set of id_b with IoU below threshold
    point_matches_per_pair: dict      # (id_a, id_b) -> (K, 2) int array of point indices
    true_transform: Transform


def edge_threshold(a: SemanticNode, b: SemanticNode, tau_min: float = 2.0,
                   beta: float = 1.0) -> float:
    """Distance threshold for connecting two nodes.

    Larger nodes connect farther: tau = max(tau_min, beta * mean box diagonal).
    """
    return max(tau_min, beta * 0.5 * (a.diagonal + b.diagonal))


def build_edges(nodes: list, tau_min: float = 2.0, beta: float = 1.0) -> set:
    """Connect node pairs whose center distance is under their threshold."""
    if not nodes:
        return set()
    centers = np.stack([n.center for n in nodes])
    diffs = centers[:, None, :] - centers[None, :, :]
    dists = np.linalg.norm(diffs, axis=-1)
    edges = set()
    for ia in range(len(nodes)):
        for ib in range(ia + 1, len(nodes)):
            if dists[ia, ib] < edge_threshold(nodes[ia], nodes[ib], tau_min, beta):
                edges.add((min(nodes[ia].id, nodes[ib].id),
                           max(nodes[ia].id, nodes[ib].id)))
    return edges


def transform_node(node: SemanticNode, t: Transform) -> SemanticNode:
    """Map center and points through `t`; label and box are kept."""
    return replace(node, center=t.apply(node.center), points=t.apply(node.points))


def apply_transform(graph: SceneGraph, t: Transform) -> SceneGraph:
    """Rigidly move a whole graph; edges are preserved as-is."""
    return SceneGraph([transform_node(n, t) for n in graph.nodes], set(graph.edges))


def random_4dof_transform(seed: int, max_translation: float,
                          max_yaw: float = math.pi) -> Transform:
    """Random pure-yaw rotation plus uniform translation, seeded.

    Yaw is uniform in [-max_yaw, max_yaw]; each translation component is
    uniform in [-max_translation, max_translation].
    """
    if max_translation < 0:
        raise ValueError("max_translation must be >= 0")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    yaw = float(rng.uniform(-max_yaw, max_yaw)) if max_yaw > 0 else 0.0
    t = rng.uniform(-max_translation, max_translation, size=3) if max_translation > 0 \
        else np.zeros(3)
    return Transform.yaw(yaw, t)


def _voxel_keys(points: np.ndarray, voxel: float) -> set:
    """Integer voxel cells occupied by a point cloud, as a set of keys."""
    cells = np.floor(np.asarray(points, dtype=float) / voxel).astype(np.int64)
    # Pack (x, y, z) into one int64; 2^20 cells per axis is plenty indoors.
    packed = ((cells[:, 0] + (1 << 19)) << 42) | \
             ((cells[:, 1] + (1 << 19)) << 21) | (cells[:, 2] + (1 << 19))
    return set(packed.tolist())


def point_cloud_iou(a: SemanticNode, b: SemanticNode, voxel: float = IOU_VOXEL) -> float:
    """Voxelized intersection-over-union of two node point clouds."""
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    va, vb = _voxel_keys(a.points, voxel), _voxel_keys(b.points, voxel)
    inter = len(va & vb)
    union = len(va | vb)
    return inter / union if union else 0.0


def _mutual_nn_pairs(pa: np.ndarray, pb: np.ndarray, max_dist: float) -> np.ndarray:
    """Mutual nearest-neighbor index pairs closer than `max_dist`."""
    tree_a, tree_b = cKDTree(pa), cKDTree(pb)
    d_ab, nn_ab = tree_b.query(pa)
    _, nn_ba = tree_a.query(pb)
    rows = np.arange(len(pa))
    mutual = (nn_ba[nn_ab] == rows) & (d_ab < max_dist)
    return np.stack([rows[mutual], nn_ab[mutual]], axis=1).astype(np.int64)


def generate_ground_truth(ga: SceneGraph, gb: SceneGraph, t_true: Transform,
                          tau_iou: float = TAU_IOU,
                          point_match_dist: float = POINT_MATCH_DIST,
                          voxel: float = IOU_VOXEL) -> GroundTruth:
    """Derive ground-truth matches between two graphs given the true pose.

    A node pair matches iff the IoU of the aligned clouds reaches tau_iou;
    all other cross pairs are negatives for the source node.  Point matches
    within a matched pair are mutual nearest neighbors under `t_true`
    closer than `point_match_dist`.
    """
    matches = set()
    negatives = {n.id: set() for n in ga.nodes}
    point_matches = {}
    aligned = {n.id: t_true.apply(n.points) for n in ga.nodes}
    for na in ga.nodes:
        moved = replace(na, points=aligned[na.id], center=t_true.apply(na.center))
        for nb in gb.nodes:
            # AABBs that cannot overlap have IoU 0; skip the voxel sets.
            lo = np.maximum(moved.points.min(axis=0), nb.points.min(axis=0))
            hi = np.minimum(moved.points.max(axis=0), nb.points.max(axis=0))
            iou = point_cloud_iou(moved, nb, voxel) if np.all(lo <= hi + voxel) else 0.0
            if iou >= tau_iou:
                matches.add((na.id, nb.id))
                pairs = _mutual_nn_pairs(aligned[na.id], nb.points, point_match_dist)
                point_matches[(na.id, nb.id)] = pairs
            else:
                negatives[na.id].add(nb.id)
    return GroundTruth(matches, negatives, point_matches, t_true)


_DEFAULT_LABELS = (
    "chair", "table", "sofa", "bed", "shelf", "cabinet", "lamp", "monitor",
    "plant", "door", "window", "sink", "fridge", "desk", "couch", "pillow",
    "curtain", "toilet", "bathtub", "wardrobe", "bench", "stool", "tv",
    "microwave", "oven", "bin", "rug", "mirror", "ladder", "printer",
    "whiteboard", "piano", "bookcase", "heater", "fan", "box", "bag",
    "clock", "vase", "basket",
)


@dataclass
class GeneratorConfig:
    """Knobs for the synthetic scene-pair generator."""

    node_count: tuple = (10, 20)
    points_per_node: tuple = (200, 800)
    labels: tuple = _DEFAULT_LABELS
    unique_labels: bool = True
    overlap: float = 1.0
    point_noise_sigma: float = 0.0
    dropout_rate: float = 0.0
    oversegmentation_rate: float = 0.0
    label_noise_rate: float = 0.0
    extent: float = 10.0        # scene footprint, meters
    height: float = 2.5         # vertical spread of node centers
    node_size: tuple = (0.4, 1.8)
    max_translation: float = 5.0
    max_yaw: float = math.pi
    edge_tau_min: float = 2.0
    edge_beta: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError("overlap fraction must lie in [0, 1]")


def _sample_node(rng: np.random.Generator, node_id: int, label: str,
                 cfg: GeneratorConfig) -> SemanticNode:
    """One node: a yaw-rotated solid box of uniform points."""
    center = np.array([
        rng.uniform(-cfg.extent / 2, cfg.extent / 2),
        rng.uniform(-cfg.extent / 2, cfg.extent / 2),
        rng.uniform(0.0, cfg.height),
    ])
    half = rng.uniform(cfg.node_size[0], cfg.node_size[1], size=3) / 2.0
    n_pts = int(rng.integers(cfg.points_per_node[0], cfg.points_per_node[1] + 1))
    local = rng.uniform(-half, half, size=(n_pts, 3))
    yaw = rng.uniform(-math.pi, math.pi)
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return SemanticNode.from_points(node_id, label, local @ rot.T + center)


def _split_by_plane(rng: np.random.Generator, node: SemanticNode):
    """Split a node's points by a random plane through its centroid."""
    normal = rng.normal(size=3)
    normal /= np.linalg.norm(normal)
    side = (node.points - node.points.mean(axis=0)) @ normal >= 0
    if side.all() or not side.any():
        return None
    return node.points[side], node.points[~side]


def synthesize_scene_pair(seed: int, cfg: GeneratorConfig = None):
    """Generate two scene graphs with a known 4-DoF relative transform.

    Graph A is the world scene.  Graph B keeps each node with probability
    `cfg.overlap`, optionally drops / splits / relabels / jitters nodes,
    and finally moves into frame B through the returned transform (which
    maps frame A into frame B).

    Returns:
        (graph_a, graph_b, t_true)
    """
    cfg = cfg or GeneratorConfig()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5CE9E]))

    n_nodes = int(rng.integers(cfg.node_count[0], cfg.node_count[1] + 1))
    if cfg.unique_labels and n_nodes <= len(cfg.labels):
        labels = list(rng.choice(cfg.labels, size=n_nodes, replace=False))
    else:
        labels = list(rng.choice(cfg.labels, size=n_nodes, replace=True))
    nodes_a = [_sample_node(rng, i, str(labels[i]), cfg) for i in range(n_nodes)]

    t_true = random_4dof_transform(int(rng.integers(2**31)), cfg.max_translation,
                                   cfg.max_yaw)

    keep = rng.random(n_nodes) < cfg.overlap
    if cfg.dropout_rate > 0:
        keep &= rng.random(n_nodes) >= cfg.dropout_rate
    next_id = n_nodes
    nodes_b = []
    for node in (n for i, n in enumerate(nodes_a) if keep[i]):
        world_views = [node]
        if cfg.oversegmentation_rate > 0 and rng.random() < cfg.oversegmentation_rate:
            halves = _split_by_plane(rng, node)
            if halves is not None:
                world_views = [SemanticNode.from_points(node.id, node.label, halves[0]),
                               SemanticNode.from_points(next_id, node.label, halves[1])]
                next_id += 1
        for view in world_views:
            if cfg.label_noise_rate > 0 and rng.random() < cfg.label_noise_rate:
                others = [l for l in cfg.labels if l != view.label]
                view = replace(view, label=str(rng.choice(others)))
            if cfg.point_noise_sigma > 0:
                noisy = view.points + rng.normal(scale=cfg.point_noise_sigma,
                                                 size=view.points.shape)
                view = SemanticNode.from_points(view.id, view.label, noisy)
            nodes_b.append(transform_node(view, t_true))

    ga = SceneGraph(nodes_a, build_edges(nodes_a, cfg.edge_tau_min, cfg.edge_beta))
    gb = SceneGraph(nodes_b, build_edges(nodes_b, cfg.edge_tau_min, cfg.edge_beta))
    return ga, gb, t_true


def save_scene_graph(graph: SceneGraph, path) -> None:
    """Write a scene graph as JSON (see the file schema in the README)."""
    payload = {
        "nodes": [
            {
                "id": int(n.id),
                "label": n.label,
                "box": [float(v) for v in n.box],
                "center": [float(v) for v in n.center],
                "points": np.asarray(n.points, dtype=float).tolist(),
            }
            for n in graph.nodes
        ],
        "edges": [[int(i), int(j)] for i, j in sorted(graph.edges)],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def _require(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise SceneGraphParseError(f"{where}: missing field '{key}'")
    return mapping[key]


def load_scene_graph(path, tau_min: float = 2.0, beta: float = 1.0) -> SceneGraph:
    """Read a scene graph from JSON; edges are recomputed when absent."""
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SceneGraphParseError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(payload, dict):
        raise SceneGraphParseError(f"{path}: top level must be an object")
    raw_nodes = _require(payload, "nodes", str(path))
    nodes = []
    for idx, raw in enumerate(raw_nodes):
        where = f"node {raw.get('id', idx)}"
        node_id = int(_require(raw, "id", where))
        label = _require(raw, "label", where)
        box = _require(raw, "box", where)
        center = _require(raw, "center", where)
        points = _require(raw, "points", where)
        try:
            nodes.append(SemanticNode(node_id, str(label), np.asarray(box, dtype=float),
                                      np.asarray(center, dtype=float),
                                      np.asarray(points, dtype=float)))
        except (TypeError, ValueError) as exc:
            raise SceneGraphParseError(f"{where}: {exc}") from exc
    if "edges" in payload and payload["edges"] is not None:
        edges = {(int(i), int(j)) for i, j in payload["edges"]}
    else:
        edges = build_edges(nodes, tau_min, beta)
    try:
        return SceneGraph(nodes, edges)
    except ValueError as exc:
        raise SceneGraphParseError(str(exc)) from exc


def save_ground_truth(gt: GroundTruth, path) -> None:
    """Persist ground truth (matches, negatives, point pairs, pose)."""
    payload = {
        "true_transform": {
            "rotation": gt.true_transform.rotation.tolist(),
            "translation": gt.true_transform.translation.tolist(),
        },
        "node_matches": sorted([int(i), int(j)] for i, j in gt.node_matches),
        "negatives": {str(i): sorted(int(j) for j in js)
                      for i, js in gt.negatives_per_node.items()},
        "point_matches": [
            {"pair": [int(i), int(j)], "indices": np.asarray(p).tolist()}
            for (i, j), p in sorted(gt.point_matches_per_pair.items())
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_ground_truth(path) -> GroundTruth:
    with open(path) as fh:
        payload = json.load(fh)
    t = payload["true_transform"]
    return GroundTruth(
        node_matches={(int(i), int(j)) for i, j in payload["node_matches"]},
        negatives_per_node={int(i): set(js) for i, js in payload["negatives"].items()},
        point_matches_per_pair={
            (int(e["pair"][0]), int(e["pair"][1])): np.asarray(e["indices"],
                                                               dtype=np.int64).reshape(-1, 2)
            for e in payload["point_matches"]
        },
        true_transform=Transform(np.asarray(t["rotation"]), np.asarray(t["translation"])),
    )
