"""Two-agent coarse-to-fine communication simulator.

Each tick the remote agent broadcasts a coarse message (node features and
centers); the local agent matches nodes against its own growing graph and,
when enough nodes match and the dense-interval allows, requests a dense
message (the node-tagged point cloud) to run the full point-level
registration.  Every query tick produces a pose estimate whenever three
correspondences exist.  All message sizes are byte-exact and recorded in
a bandwidth ledger.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from sgreg.scene_graph import (GeneratorConfig, SceneGraph, SemanticNode,
                               Transform, synthesize_scene_pair)
from sgreg.encoder import EncoderConfig, EncoderWeights, encode, encode_shape
from sgreg.matcher import (CorrespondenceSet, MatcherConfig, NodeMatch,
                           assemble_correspondences, dual_normalize,
                           extract_node_matches, match_points, node_similarity)
from sgreg.pose_estimator import (EstimatorConfig, InsufficientDataError,
                                  estimate, gnc_tls, svd_align)

WIRE_MAGIC = b"SGM1"
MSG_COARSE, MSG_DENSE, MSG_REQUEST = 0, 1, 2
_HEADER_FMT = "<4sBIIHI"           # magic, type, frame, nodes, feat dim, points
HEADER_SIZE = struct.calcsize(_HEADER_FMT)   # 19 bytes
REQUEST_SIZE = 16                  # fixed header-only request message


@dataclass
class CoarseMessage:
    """Node features and centers for one frame."""

    frame: int
    features: np.ndarray   # (n, d_msg)
    centers: np.ndarray    # (n, 3)


@dataclass
class DenseMessage(CoarseMessage):
    """Coarse payload plus the stacked, node-tagged point cloud."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    parents: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


@dataclass
class RequestMessage:
    frame: int


def serialize(msg) -> bytes:
    """Wire encoding: header, then little-endian float32 payload.

    Coarse: X row-major then O row-major.  Dense adds one record per point
    (x, y, z as float32 and the parent node index as int32).  Requests are
    a fixed 16-byte message.
    """
    if isinstance(msg, RequestMessage):
        return WIRE_MAGIC + struct.pack("<BI", MSG_REQUEST, msg.frame) + b"\0" * 7
    n = msg.features.shape[0]
    d = msg.features.shape[1]
    is_dense = isinstance(msg, DenseMessage)
    n_pts = len(msg.points) if is_dense else 0
    head = struct.pack(_HEADER_FMT, WIRE_MAGIC,
                       MSG_DENSE if is_dense else MSG_COARSE,
                       msg.frame, n, d, n_pts)
    body = [head,
            np.ascontiguousarray(msg.features, dtype="<f4").tobytes(),
            np.ascontiguousarray(msg.centers, dtype="<f4").tobytes()]
    if is_dense:
        rec = np.empty((n_pts, 4), dtype="<f4")
        if n_pts:
            rec[:, :3] = msg.points
            rec[:, 3] = msg.parents.astype("<i4").view("<f4")
        body.append(rec.tobytes())
    return b"".join(body)


def message_size(msg) -> int:
    """Byte size of the serialized message (header + payload formula)."""
    if isinstance(msg, RequestMessage):
        return REQUEST_SIZE
    n, d = msg.features.shape
    size = HEADER_SIZE + n * (d + 3) * 4
    if isinstance(msg, DenseMessage):
        size += len(msg.points) * 4 * 4
    return size


@dataclass
class BandwidthLedger:
    """Per-frame byte counts by message class, plus cumulative totals."""

    per_frame: dict = field(default_factory=dict)

    def record(self, frame: int, kind: str, n_bytes: int) -> None:
        slot = self.per_frame.setdefault(frame, {"coarse": 0, "dense": 0,
                                                 "request": 0})
        slot[kind] += n_bytes

    def total(self, kind: str = None) -> int:
        if kind is None:
            return sum(sum(s.values()) for s in self.per_frame.values())
        return sum(s[kind] for s in self.per_frame.values())

    def per_query_average(self, n_query_frames: int) -> float:
        return self.total() / n_query_frames if n_query_frames else 0.0


def evaluate_frame(estimate_t: Transform, truth: Transform,
                   rte_threshold: float = 0.2, rre_threshold: float = 5.0):
    """Pose error of an estimate: (RTE meters, RRE degrees, success flag).

    Errors are the translation norm and geodesic rotation angle of the
    relative error transform; success needs both under their thresholds.
    """
    err = estimate_t.compose(truth.inverse())
    rte = float(np.linalg.norm(err.translation))
    cos = np.clip((np.trace(err.rotation) - 1.0) / 2.0, -1.0, 1.0)
    rre = float(np.degrees(np.arccos(cos)))
    return rte, rre, bool(rte < rte_threshold and rre < rre_threshold)


def node_match_metrics(pred_matches, gt_matches):
    """Node recall and precision of predicted (i, j) id pairs."""
    pred = {(m.i, m.j) if isinstance(m, NodeMatch) else tuple(m)
            for m in pred_matches}
    gt = set(gt_matches)
    tp = len(pred & gt)
    nr = tp / len(gt) if gt else 1.0
    np_prec = tp / len(pred) if pred else 0.0
    return nr, np_prec


def inlier_ratio(corr: CorrespondenceSet, truth: Transform,
                 dist: float = 0.1) -> float:
    """Fraction of correspondences aligned within `dist` by the true pose."""
    if len(corr) == 0:
        return 0.0
    residual = np.linalg.norm(truth.apply(corr.p) - corr.q, axis=1)
    return float((residual < dist).mean())


def correspondence_rmse(t_est: Transform, gt_pairs_p: np.ndarray,
                        gt_pairs_q: np.ndarray) -> float:
    """RMSE of ground-truth corresponded points under the estimate."""
    if len(gt_pairs_p) == 0:
        return math.inf
    d = t_est.apply(gt_pairs_p) - gt_pairs_q
    return float(np.sqrt((d * d).sum(axis=1).mean()))


def registration_recall(rmse_values, threshold: float = 0.2) -> float:
    """Fraction of scene pairs registered with aligned RMSE below threshold."""
    vals = list(rmse_values)
    if not vals:
        return 0.0
    return sum(1 for v in vals if v < threshold) / len(vals)


def instance_covariances(nodes) -> np.ndarray:
    """Statistical covariance of each node's point cloud, (n, 3, 3)."""
    out = np.empty((len(nodes), 3, 3))
    for idx, node in enumerate(nodes):
        pts = node.points
        if len(pts) < 2:
            out[idx] = np.eye(3) * 1e-4
        else:
            out[idx] = np.cov(pts.T) + np.eye(3) * 1e-6
    return out


def coarse_register(matches, centers_a: np.ndarray, centers_b: np.ndarray,
                    cached: CorrespondenceSet = None):
    """Correspondences from matched node centers, merged with the cache.

    Returns a CorrespondenceSet; raises InsufficientDataError when both the
    match list and the cache are empty.
    """
    parts = []
    if matches:
        rows = np.array([m.i for m in matches])
        cols = np.array([m.j for m in matches])
        parts.append(CorrespondenceSet(
            centers_a[rows], centers_b[cols],
            np.array([m.confidence for m in matches]),
            rows.astype(np.int64), cols.astype(np.int64)))
    if cached is not None and len(cached):
        parts.append(cached)
    if not parts:
        raise InsufficientDataError("no node matches and no cached points")
    return CorrespondenceSet.concatenate(parts)


def _project_so3(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def _tls_weights(r: np.ndarray, c2: float, nu: float) -> np.ndarray:
    w = np.zeros_like(r)
    w[r <= c2 / (1.0 + nu)] = 1.0
    mid = (r > c2 / (1.0 + nu)) & (r < c2 * (1.0 + nu))
    w[mid] = (np.sqrt(c2 * (1.0 + nu) / r[mid]) - 1.0) / nu
    return w


def robust_pose_average(poses, rot_chordal_threshold: float = 0.25,
                        trans_threshold: float = 0.2,
                        max_iters: int = 32) -> Transform:
    """GNC-robust chordal rotation averaging plus a TLS-weighted translation mean.

    A single pose is returned as-is; outlier poses lose their weight as the
    surrogate anneals toward truncated least squares.
    """
    poses = list(poses)
    if not poses:
        raise ValueError("need at least one pose")
    if len(poses) == 1:
        return poses[0]
    rots = np.stack([p.rotation for p in poses])
    trans = np.stack([p.translation for p in poses])

    rot = _project_so3(rots.mean(axis=0))
    t_mean = trans.mean(axis=0)
    c2_rot = rot_chordal_threshold ** 2
    c2_t = trans_threshold ** 2
    r_rot = ((rots - rot) ** 2).sum(axis=(1, 2))
    r_t = ((trans - t_mean) ** 2).sum(axis=1)
    nu_rot = max(1.0, 2.0 * float(r_rot.max()) / c2_rot - 1.0)
    nu_t = max(1.0, 2.0 * float(r_t.max()) / c2_t - 1.0)
    for _ in range(max_iters):
        w_rot = _tls_weights(r_rot, c2_rot, nu_rot)
        w_t = _tls_weights(r_t, c2_t, nu_t)
        if w_rot.sum() > 0:
            rot = _project_so3((w_rot[:, None, None] * rots).sum(axis=0))
        if w_t.sum() > 0:
            t_mean = (w_t[:, None] * trans).sum(axis=0) / w_t.sum()
        r_rot = ((rots - rot) ** 2).sum(axis=(1, 2))
        r_t = ((trans - t_mean) ** 2).sum(axis=1)
        nu_rot = max(nu_rot / 1.4, 1e-6)
        nu_t = max(nu_t / 1.4, 1e-6)
    return Transform(rot, t_mean)


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """One centroid per occupied voxel, deterministic order."""
    cells = np.floor(points / voxel).astype(np.int64)
    _, inverse, counts = np.unique(cells, axis=0, return_inverse=True,
                                   return_counts=True)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, points)
    return sums / counts[:, None]


@dataclass
class SimConfig:
    seed: int = 0
    ticks: int = 24
    generator: GeneratorConfig = None
    encoder: EncoderConfig = None
    matcher: MatcherConfig = None
    estimator: EstimatorConfig = None
    coarse_period: int = 1          # ticks between coarse broadcasts
    min_matched_nodes: int = 3      # request threshold
    dense_interval: float = 5       # min ticks between dense messages (inf ok)
    dense_enabled: bool = True
    growth_per_tick: float = 0.15   # graph fraction revealed per tick
    d_msg: int = None               # feature dims on the wire (None: full)
    dense_voxel: float = 0.05       # downsampling before serialization
    pose_average_window: int = 1
    use_center_covariances: bool = True
    rte_threshold: float = 0.2
    rre_threshold: float = 5.0

    def __post_init__(self):
        if self.generator is None:
            self.generator = GeneratorConfig()
        if self.encoder is None:
            self.encoder = EncoderConfig()
        if self.matcher is None:
            self.matcher = MatcherConfig()
        if self.estimator is None:
            self.estimator = EstimatorConfig()


@dataclass
class AgentState:
    """One agent: growing local graph, cache, and protocol bookkeeping."""

    full_graph: SceneGraph
    reveal_order: list
    cached_corr: CorrespondenceSet = None
    remote_cloud: np.ndarray = None    # latest received dense points
    last_dense_tick: int = None
    pose_history: list = field(default_factory=list)

    def revealed_graph(self, tick: int, growth: float) -> SceneGraph:
        frac = min(1.0, (tick + 1) * growth)
        count = max(1, math.ceil(frac * len(self.full_graph.nodes)))
        keep = set(self.reveal_order[:count])
        nodes = [n for n in self.full_graph.nodes if n.id in keep]
        edges = {(i, j) for i, j in self.full_graph.edges
                 if i in keep and j in keep}
        return SceneGraph(nodes, edges)


@dataclass
class SimReport:
    rows: list                 # one dict per query frame
    ledger: BandwidthLedger
    truth: Transform
    messages: list             # (frame, kind, message) for byte recounts

    @property
    def query_rows(self) -> list:
        return [r for r in self.rows if r["strategy"] != "idle"]

    @property
    def success_rate(self) -> float:
        queries = self.query_rows
        if not queries:
            return 0.0
        return sum(r["success"] for r in queries) / len(queries)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame", "strategy", "bytes_coarse", "bytes_dense",
                             "rte", "rre", "success"])
            for r in self.rows:
                writer.writerow([r["frame"], r["strategy"], r["bytes_coarse"],
                                 r["bytes_dense"],
                                 f"{r['rte']:.6f}" if r["rte"] is not None else "",
                                 f"{r['rre']:.6f}" if r["rre"] is not None else "",
                                 int(r["success"])])


def _restricted(matrix: np.ndarray, dims: int) -> np.ndarray:
    return matrix[:dims, :dims]


def simulate(cfg: SimConfig = None) -> SimReport:
    """Run the full two-agent protocol on one synthetic scene pair."""
    cfg = cfg or SimConfig()
    ga, gb, t_true = synthesize_scene_pair(cfg.seed, cfg.generator)
    weights = EncoderWeights.seeded(cfg.encoder)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA6E7]))
    agent_a = AgentState(ga, [int(v) for v in
                              rng.permutation([n.id for n in ga.nodes])])
    agent_b = AgentState(gb, [int(v) for v in
                              rng.permutation([n.id for n in gb.nodes])])
    ledger = BandwidthLedger()
    rows, messages = [], []
    d_full = cfg.encoder.match_dim
    d_msg = min(cfg.d_msg or d_full, d_full)

    for tick in range(cfg.ticks):
        row = {"frame": tick, "strategy": "none", "bytes_coarse": 0,
               "bytes_dense": 0, "rte": None, "rre": None, "success": False}
        if tick % cfg.coarse_period:
            row["strategy"] = "idle"
            rows.append(row)
            continue
        graph_a = agent_a.revealed_graph(tick, cfg.growth_per_tick)
        graph_b = agent_b.revealed_graph(tick, cfg.growth_per_tick)
        feats_a = encode(graph_a, weights, seed=cfg.seed)
        feats_b = encode(graph_b, weights, seed=cfg.seed)

        coarse = CoarseMessage(tick, feats_b.x2[:, :d_msg],
                               np.stack([n.center for n in graph_b.nodes]))
        n_bytes = message_size(coarse)
        ledger.record(tick, "coarse", n_bytes)
        messages.append((tick, "coarse", coarse))
        row["bytes_coarse"] = n_bytes

        # Receiver-side node matching on the wire features.
        linear = _restricted(weights.linear_node, d_msg)
        assignment = dual_normalize(node_similarity(
            feats_a.x2[:, :d_msg], coarse.features, linear))
        raw_matches = extract_node_matches(assignment, cfg.matcher.node_threshold,
                                           cfg.matcher.node_topk)

        want_dense = (cfg.dense_enabled
                      and len(raw_matches) >= cfg.min_matched_nodes
                      and (agent_b.last_dense_tick is None
                           or tick - agent_b.last_dense_tick >= cfg.dense_interval))
        if want_dense:
            request = RequestMessage(tick)
            ledger.record(tick, "request", message_size(request))
            messages.append((tick, "request", request))
            down_pts, down_parents = [], []
            for idx, node in enumerate(graph_b.nodes):
                pts = voxel_downsample(node.points, cfg.dense_voxel)
                down_pts.append(pts)
                down_parents.append(np.full(len(pts), idx, dtype=np.int64))
            dense = DenseMessage(tick, coarse.features, coarse.centers,
                                 np.vstack(down_pts),
                                 np.concatenate(down_parents))
            n_bytes = message_size(dense)
            ledger.record(tick, "dense", n_bytes)
            messages.append((tick, "dense", dense))
            row["bytes_dense"] = n_bytes
            agent_b.last_dense_tick = tick

            # Full pipeline on the dense payload: recompute point features
            # for the received clouds and match per node pair.
            remote_nodes = [
                SemanticNode.from_points(idx, "none",
                                         dense.points[dense.parents == idx])
                for idx in range(len(graph_b.nodes))
            ]
            remote_graph = SceneGraph(remote_nodes, set())
            _, r_points, r_feats, r_mask, _ = encode_shape(remote_graph, weights,
                                                           seed=cfg.seed)
            per_pair = {}
            id_matches = []
            for m in raw_matches:
                pa, pb, sc, _ = match_points(
                    feats_a.point_feats[m.i], r_feats[m.j],
                    feats_a.node_points[m.i], r_points[m.j],
                    feats_a.point_mask[m.i], r_mask[m.j], cfg.matcher)
                key = (feats_a.node_ids[m.i], m.j)
                per_pair[key] = (pa, pb, sc)
                id_matches.append(NodeMatch(feats_a.node_ids[m.i], m.j,
                                            m.confidence))
            agent_a.cached_corr = assemble_correspondences(id_matches, per_pair)
            agent_a.remote_cloud = dense.points
            row["strategy"] = "dense"
        elif agent_a.cached_corr is not None and len(agent_a.cached_corr):
            row["strategy"] = "coarse+cached"
        else:
            row["strategy"] = "coarse"

        # Registration at every query frame, when enough data exists.
        centers_a = np.stack([n.center for n in graph_a.nodes])
        try:
            corr = coarse_register(raw_matches, centers_a, coarse.centers,
                                   agent_a.cached_corr)
            covariances = None
            if cfg.use_center_covariances and (
                    agent_a.cached_corr is None or not len(agent_a.cached_corr)):
                cov_a = instance_covariances(graph_a.nodes)[
                    np.array([m.i for m in raw_matches])]
                # The remote cloud is unseen in coarse mode; its own-node
                # covariance stands in for the peer's.
                covariances = (cov_a, cov_a)
            # Verification can only use geometry the receiver has actually
            # been sent: dense points when cached, else the coarse centers.
            known_remote = agent_a.remote_cloud \
                if agent_a.remote_cloud is not None else coarse.centers
            result = estimate(corr, np.vstack([n.points for n in graph_a.nodes]),
                              known_remote, cfg.estimator, covariances)
        except (InsufficientDataError, ValueError):
            row["strategy"] = "none"
            rows.append(row)
            continue
        agent_a.pose_history.append(result.transform)
        pose = result.transform
        if cfg.pose_average_window > 1:
            pose = robust_pose_average(
                agent_a.pose_history[-cfg.pose_average_window:])
        rte, rre, ok = evaluate_frame(pose, t_true, cfg.rte_threshold,
                                      cfg.rre_threshold)
        row.update(rte=rte, rre=rre, success=ok)
        rows.append(row)
    return SimReport(rows, ledger, t_true, messages)
