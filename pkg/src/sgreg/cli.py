"""Command-line entry point.

Subcommands: gen (synthesize a scene pair + ground truth), register (full
pipeline on two scene-graph files), simulate (two-agent protocol run),
bench (suites / ablations / runtime profile), verify-invariants (quick
property audit).  A TOML config file can preload any flag; explicit flags
win.  SG_REG_SEED provides the seed when no --seed is given.

Exit codes: 0 ok, 1 usage or I/O error, 2 insufficient data.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from sgreg import scene_graph as sg
from sgreg.scene_graph import (GeneratorConfig, SceneGraphParseError, Transform,
                               generate_ground_truth, load_ground_truth,
                               load_scene_graph, save_ground_truth,
                               save_scene_graph, synthesize_scene_pair)
from sgreg.encoder import EncoderConfig, EncoderWeights
from sgreg.matcher import MatcherConfig
from sgreg.pose_estimator import EstimatorConfig, InsufficientDataError
from sgreg.agent_sim import (SimConfig, evaluate_frame, inlier_ratio,
                             node_match_metrics, registration_recall, simulate)
from sgreg import metrics_bench as bench


def _seed_default() -> int:
    return int(os.environ.get("SG_REG_SEED", "0"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sgreg",
        description="Scene-graph registration toolkit",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="TOML key/value file preloading flags")
        p.add_argument("--seed", type=int, default=_seed_default(),
                       help="global seed (falls back to SG_REG_SEED)")

    p_gen = sub.add_parser(
        "gen", help="synthesize a scene pair and its ground truth",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    add_common(p_gen)
    p_gen.add_argument("--out-a", default="scene_a.json")
    p_gen.add_argument("--out-b", default="scene_b.json")
    p_gen.add_argument("--out-gt", default="ground_truth.json")
    p_gen.add_argument("--nodes", type=int, nargs=2, default=[10, 20],
                       metavar=("MIN", "MAX"))
    p_gen.add_argument("--points", type=int, nargs=2, default=[200, 800],
                       metavar=("MIN", "MAX"), help="points per node range")
    p_gen.add_argument("--overlap", type=float, default=1.0,
                       help="fraction of nodes shared between the scenes")
    p_gen.add_argument("--point-noise", type=float, default=0.0,
                       help="point jitter sigma in meters")
    p_gen.add_argument("--label-noise", type=float, default=0.0,
                       help="fraction of relabeled nodes")
    p_gen.add_argument("--overseg", type=float, default=0.0,
                       help="fraction of nodes split in two")
    p_gen.add_argument("--dropout", type=float, default=0.0,
                       help="extra node dropout fraction")
    p_gen.add_argument("--max-translation", type=float, default=5.0)
    p_gen.add_argument("--tau-iou", type=float, default=sg.TAU_IOU,
                       help="IoU threshold for ground-truth node matches")
    p_gen.add_argument("--point-match-dist", type=float,
                       default=sg.POINT_MATCH_DIST,
                       help="ground-truth point match distance in meters")
    p_gen.add_argument("--iou-voxel", type=float, default=sg.IOU_VOXEL,
                       help="voxel size for point-cloud IoU in meters")
    p_gen.set_defaults(func=cmd_gen)

    p_reg = sub.add_parser(
        "register", help="register two scene-graph files",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    add_common(p_reg)
    p_reg.add_argument("graph_a")
    p_reg.add_argument("graph_b")
    p_reg.add_argument("--gt", help="ground-truth file for metric output")
    p_reg.add_argument("--tau-iou", type=float, default=sg.TAU_IOU,
                       help="IoU threshold for true-positive node pairs")
    p_reg.add_argument("--point-match-dist", type=float,
                       default=sg.POINT_MATCH_DIST,
                       help="ground-truth point match distance in meters")
    p_reg.add_argument("--rmse-threshold", type=float, default=0.2,
                       help="registration recall RMSE gate in meters")
    p_reg.add_argument("--rte-threshold", type=float, default=0.2,
                       help="success gate on translation error in meters")
    p_reg.add_argument("--rre-threshold", type=float, default=5.0,
                       help="success gate on rotation error in degrees")
    p_reg.add_argument("--ir-distance", type=float, default=0.1,
                       help="inlier distance for IR/PIR in meters")
    p_reg.add_argument("--node-threshold", type=float, default=0.05)
    p_reg.add_argument("--node-topk", type=int, default=3)
    p_reg.add_argument("--point-topk", type=int, default=3)
    p_reg.add_argument("--point-threshold", type=float, default=0.05)
    p_reg.add_argument("--sinkhorn-iters", type=int, default=100)
    p_reg.add_argument("--dustbin-score", type=float, default=0.5)
    p_reg.add_argument("--kp", type=int, default=256,
                       help="points sampled per node")
    p_reg.add_argument("--cbar", type=float, default=0.1,
                       help="GNC inlier cost threshold in meters")
    p_reg.add_argument("--mac-trigger", type=float, default=0.3,
                       help="clique search below this GNC inlier ratio")
    p_reg.add_argument("--nms-radius", type=float, default=0.05)
    p_reg.add_argument("--verify-voxel", type=float, default=0.2)
    p_reg.add_argument("--delta-levels", type=float, nargs="+",
                       default=[0.1, 0.2, 0.3],
                       help="compatibility pyramid thresholds in meters")
    p_reg.add_argument("--out-correspondences",
                       help="CSV dump of the point correspondences")
    p_reg.add_argument("--out-report", help="JSON report path")
    p_reg.add_argument("--with-losses", action="store_true",
                       help="include objective values (needs --gt)")
    p_reg.set_defaults(func=cmd_register)

    p_sim = sub.add_parser(
        "simulate", help="run the two-agent communication simulator",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    add_common(p_sim)
    p_sim.add_argument("--ticks", type=int, default=24)
    p_sim.add_argument("--dense-interval", type=float, default=5,
                       help="min ticks between dense messages (inf allowed)")
    p_sim.add_argument("--no-dense", action="store_true",
                       help="disable dense messages entirely")
    p_sim.add_argument("--coarse-period", type=int, default=1)
    p_sim.add_argument("--min-matched-nodes", type=int, default=3,
                       help="node matches needed before requesting dense")
    p_sim.add_argument("--growth", type=float, default=0.15,
                       help="graph fraction revealed per tick")
    p_sim.add_argument("--pose-avg-window", type=int, default=1)
    p_sim.add_argument("--nodes", type=int, nargs=2, default=[8, 12],
                       metavar=("MIN", "MAX"))
    p_sim.add_argument("--points", type=int, nargs=2, default=[150, 300],
                       metavar=("MIN", "MAX"))
    p_sim.add_argument("--overlap", type=float, default=0.85)
    p_sim.add_argument("--overseg", type=float, default=0.0)
    p_sim.add_argument("--label-noise", type=float, default=0.0)
    p_sim.add_argument("--point-noise", type=float, default=0.0)
    p_sim.add_argument("--kp", type=int, default=128)
    p_sim.add_argument("--d-msg", type=int, default=None,
                       help="feature dims on the wire (default: full)")
    p_sim.add_argument("--rte-threshold", type=float, default=0.2,
                       help="success gate on translation error in meters")
    p_sim.add_argument("--rre-threshold", type=float, default=5.0,
                       help="success gate on rotation error in degrees")
    p_sim.add_argument("--out-csv", default="sim_report.csv")
    p_sim.add_argument("--out-ledger", default="sim_ledger.json")
    p_sim.set_defaults(func=cmd_simulate)

    p_bench = sub.add_parser(
        "bench", help="benchmark suites, ablations, runtime profiles",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    add_common(p_bench)
    p_bench.add_argument("--suite", help="preset: smoke | small | medium | large")
    p_bench.add_argument("--ablation", choices=["kp"],
                         help="run the sampling-count ablation")
    p_bench.add_argument("--profile", choices=["mac"],
                         help="run the clique runtime profile")
    p_bench.add_argument("--kp-values", type=int, nargs="+",
                         default=[256, 512, 1024])
    p_bench.add_argument("--ratios", type=float, nargs="+",
                         default=[0.05, 0.4, 0.95])
    p_bench.add_argument("--repeats", type=int, default=10)
    p_bench.add_argument("--n-correspondences", type=int, default=1000)
    p_bench.add_argument("--out-dir", default="bench_out")
    p_bench.set_defaults(func=cmd_bench)

    p_ver = sub.add_parser(
        "verify-invariants", help="run the quick property audit",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    add_common(p_ver)
    p_ver.set_defaults(func=cmd_verify_invariants)
    return parser


def _apply_config_file(parser, argv):
    """Preload flag values from --config; explicit flags still win."""
    probe, _ = parser.parse_known_args(argv)
    path = getattr(probe, "config", None)
    if not path:
        return parser.parse_args(argv)
    with open(path, "rb") as fh:
        values = tomllib.load(fh)
    allowed = set(vars(probe))
    namespace = argparse.Namespace()
    for key, value in values.items():
        dest = key.replace("-", "_")
        if dest not in allowed:
            raise SystemExit(f"error: unknown config key '{key}'")
        setattr(namespace, dest, value)
    return parser.parse_args(argv, namespace=namespace)


def _generator_from(args) -> GeneratorConfig:
    return GeneratorConfig(
        node_count=tuple(args.nodes),
        points_per_node=tuple(args.points),
        overlap=args.overlap,
        point_noise_sigma=getattr(args, "point_noise", 0.0),
        label_noise_rate=getattr(args, "label_noise", 0.0),
        oversegmentation_rate=getattr(args, "overseg", 0.0),
        dropout_rate=getattr(args, "dropout", 0.0),
        max_translation=getattr(args, "max_translation", 5.0),
    )


def cmd_gen(args) -> int:
    gen = _generator_from(args)
    ga, gb, t_true = synthesize_scene_pair(args.seed, gen)
    gt = generate_ground_truth(ga, gb, t_true, args.tau_iou,
                               args.point_match_dist, args.iou_voxel)
    save_scene_graph(ga, args.out_a)
    save_scene_graph(gb, args.out_b)
    save_ground_truth(gt, args.out_gt)
    print(f"wrote {args.out_a} ({len(ga.nodes)} nodes), "
          f"{args.out_b} ({len(gb.nodes)} nodes), "
          f"{args.out_gt} ({len(gt.node_matches)} matches)")
    return 0


def cmd_register(args) -> int:
    ga = load_scene_graph(args.graph_a)
    gb = load_scene_graph(args.graph_b)
    weights = EncoderWeights.seeded(EncoderConfig(k_p=args.kp))
    matcher_cfg = MatcherConfig(
        node_threshold=args.node_threshold, node_topk=args.node_topk,
        point_topk=args.point_topk, point_threshold=args.point_threshold,
        sinkhorn_iters=args.sinkhorn_iters, dustbin_score=args.dustbin_score)
    estimator_cfg = EstimatorConfig(
        delta_levels=tuple(args.delta_levels), cbar=args.cbar,
        mac_trigger=args.mac_trigger, nms_radius=args.nms_radius,
        verify_voxel=args.verify_voxel)
    _, id_matches, corr, result = bench.register_pair(
        ga, gb, weights, matcher_cfg, estimator_cfg, seed=args.seed)
    if args.out_correspondences:
        corr.to_csv(args.out_correspondences)
    if result is None:
        print(f"insufficient data: {len(corr)} correspondences "
              f"from {len(id_matches)} node matches")
        return 2
    report = {
        "node_matches": len(id_matches),
        "correspondences": len(corr),
        "strategy": result.strategy,
        "inlier_ratio": result.inlier_ratio,
        "transform": result.transform.as_matrix().tolist(),
    }
    if args.gt:
        gt = load_ground_truth(args.gt)
        nr, np_prec = node_match_metrics(id_matches, gt.node_matches)
        ir = inlier_ratio(corr, gt.true_transform, args.ir_distance)
        gt_p = [ga.node_by_id(i).points[p[:, 0]]
                for (i, j), p in gt.point_matches_per_pair.items() if len(p)]
        gt_q = [gb.node_by_id(j).points[p[:, 1]]
                for (i, j), p in gt.point_matches_per_pair.items() if len(p)]
        rmse = math.inf
        if gt_p:
            from sgreg.agent_sim import correspondence_rmse
            rmse = correspondence_rmse(result.transform, np.vstack(gt_p),
                                       np.vstack(gt_q))
        rte, rre, ok = evaluate_frame(result.transform, gt.true_transform,
                                      args.rte_threshold, args.rre_threshold)
        report.update(nr=nr, np=np_prec, ir=ir, rmse=rmse,
                      rr_success=bool(rmse < args.rmse_threshold),
                      rte=rte, rre=rre, success=ok)
        if args.with_losses:
            from sgreg.encoder import encode
            from sgreg.objectives import loss_report
            fa = encode(ga, weights, seed=args.seed)
            fb = encode(gb, weights, seed=args.seed)
            report["losses"] = loss_report(fa, fb, weights, gt,
                                           matcher_cfg).as_dict()
    print("transform (row-major 4x4):")
    for r in result.transform.as_matrix():
        print("  " + " ".join(f"{v: .6f}" for v in r))
    for key, value in report.items():
        if key == "transform":
            continue
        print(f"{key}: {value}")
    if args.out_report:
        with open(args.out_report, "w") as fh:
            json.dump(report, fh, indent=2)
    return 0


def cmd_simulate(args) -> int:
    interval = math.inf if str(args.dense_interval) in ("inf", "Infinity") \
        else float(args.dense_interval)
    cfg = SimConfig(
        seed=args.seed, ticks=args.ticks,
        generator=_generator_from(args),
        encoder=EncoderConfig(k_p=args.kp),
        coarse_period=args.coarse_period,
        min_matched_nodes=args.min_matched_nodes,
        dense_interval=interval,
        dense_enabled=not args.no_dense,
        growth_per_tick=args.growth,
        d_msg=args.d_msg,
        pose_average_window=args.pose_avg_window,
        rte_threshold=args.rte_threshold,
        rre_threshold=args.rre_threshold)
    report = simulate(cfg)
    report.to_csv(args.out_csv)
    ledger = {
        "per_frame": report.ledger.per_frame,
        "totals": {kind: report.ledger.total(kind)
                   for kind in ("coarse", "dense", "request")},
        "total": report.ledger.total(),
        "per_query_average": report.ledger.per_query_average(
            len(report.query_rows)),
    }
    with open(args.out_ledger, "w") as fh:
        json.dump(ledger, fh, indent=2)
    print(f"success rate {report.success_rate:.3f}, "
          f"total bytes {report.ledger.total()}, "
          f"wrote {args.out_csv} and {args.out_ledger}")
    return 0


def cmd_bench(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    chosen = [bool(args.suite), bool(args.ablation), bool(args.profile)]
    if sum(chosen) != 1:
        print("error: choose exactly one of --suite / --ablation / --profile",
              file=sys.stderr)
        return 1
    if args.suite:
        try:
            suite = bench.make_preset(args.suite)
        except KeyError as exc:
            print(f"error: {exc.args[0]}", file=sys.stderr)
            return 1
        rows = bench.run_suite(suite)
        out = os.path.join(args.out_dir, f"suite_{args.suite}.csv")
        bench.write_rows_csv(rows, out)
        bench.write_manifest(suite, os.path.join(args.out_dir,
                                                 f"suite_{args.suite}.json"))
        agg = bench.aggregate(rows)
        print(f"wrote {out}; " + ", ".join(
            f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}"
            for k, v in agg.items()))
        return 0
    if args.ablation == "kp":
        rows = bench.kp_ablation(args.kp_values)
        out = os.path.join(args.out_dir, "ablation_kp.csv")
        bench.write_rows_csv(rows, out, columns=["k_p", "n_corr", "ir",
                                                 "pir", "rr"])
        for r in rows:
            print(f"k_p={r['k_p']}: correspondences={r['n_corr']} "
                  f"ir={r['ir']:.3f} pir={r['pir']:.3f} rr={r['rr']:.3f}")
        return 0
    rows = bench.mac_runtime_profile(args.ratios, args.n_correspondences,
                                     args.repeats)
    out = os.path.join(args.out_dir, "profile_mac.csv")
    bench.write_rows_csv(rows, out, columns=["inlier_ratio", "repeat", "n",
                                             "t_construct", "t_solve",
                                             "clique_size", "exact", "rte"])
    med = bench.profile_medians(rows, "t_solve")
    print("solve-time medians: " + ", ".join(
        f"{k}={v * 1000:.1f}ms" for k, v in med.items()))
    return 0


def cmd_verify_invariants(args) -> int:
    """Quick end-to-end property audit; prints one line per check."""
    from sgreg.scene_graph import apply_transform, build_edges, point_cloud_iou
    from sgreg.scene_graph import random_4dof_transform
    from sgreg.encoder import encode
    from sgreg.matcher import (dual_normalize, sinkhorn, node_similarity,
                               extract_node_matches)
    from sgreg.pose_estimator import (build_pyramid, max_clique, gnc_tls,
                                      svd_align)
    from sgreg.agent_sim import serialize

    rng = np.random.default_rng(args.seed)
    checks = []

    def check(name, fn):
        try:
            ok = bool(fn())
        except Exception as exc:          # audit keeps going on failure
            ok = False
            name = f"{name} ({exc})"
        checks.append(ok)
        print(f"[{'ok' if ok else 'FAIL'}] {name}")

    ga, gb, t_true = synthesize_scene_pair(args.seed,
                                           GeneratorConfig(node_count=(8, 12)))
    weights = EncoderWeights.seeded(EncoderConfig(k_p=64))

    check("edge build is order-invariant", lambda: build_edges(ga.nodes) ==
          build_edges(list(reversed(ga.nodes))))
    check("iou symmetric and 1 on self", lambda:
          point_cloud_iou(ga.nodes[0], ga.nodes[0]) == 1.0 and
          point_cloud_iou(ga.nodes[0], ga.nodes[1]) ==
          point_cloud_iou(ga.nodes[1], ga.nodes[0]))

    def distance_preserved():
        moved = apply_transform(ga, random_4dof_transform(7, 3.0))
        d0 = np.linalg.norm(ga.nodes[0].center - ga.nodes[1].center)
        d1 = np.linalg.norm(moved.nodes[0].center - moved.nodes[1].center)
        return abs(d0 - d1) < 1e-9
    check("rigid transform preserves distances", distance_preserved)

    def invariance():
        fs = encode(ga, weights, seed=0)
        fs_t = encode(apply_transform(ga, random_4dof_transform(3, 2.0)),
                      weights, seed=0)
        rel = np.linalg.norm(fs_t.x2 - fs.x2) / np.linalg.norm(fs.x2)
        return rel < 1e-6
    check("encoded features invariant to yaw+translation", invariance)

    def softmax_shift():
        s = rng.normal(size=(6, 5))
        return np.allclose(dual_normalize(s), dual_normalize(s + 3.7))
    check("dual normalization ignores constant shifts", softmax_shift)

    def marginals():
        a = sinkhorn(rng.normal(size=(7, 5)), 100)
        return (np.abs(a[:-1].sum(axis=1) - 1) < 1e-4).all() and \
               (np.abs(a[:, :-1].sum(axis=0) - 1) < 1e-4).all()
    check("sinkhorn marginals reach 1", marginals)

    def nesting():
        from sgreg.matcher import CorrespondenceSet
        n = 60
        c = CorrespondenceSet(rng.normal(size=(n, 3)), rng.normal(size=(n, 3)),
                              rng.random(n), np.zeros(n, int), np.zeros(n, int))
        pyr = build_pyramid(c, (0.1, 0.2, 0.3))
        dense = [g.dense() for g in pyr]
        return all((dense[i] <= dense[i + 1]).all() for i in range(2))
    check("pyramid edge sets are nested", nesting)

    def clique_is_clique():
        adj = rng.random((15, 15)) < 0.5
        adj = np.triu(adj, 1)
        adj = adj | adj.T
        from sgreg.pose_estimator import CompatibilityGraph
        res = max_clique(CompatibilityGraph(0, 0.1, adj))
        vs = res.vertices
        return all(adj[a, b] for idx, a in enumerate(vs) for b in vs[idx + 1:])
    check("max clique output is a clique", clique_is_clique)

    def gnc_equals_svd():
        p = rng.normal(size=(20, 3))
        truth = Transform.yaw(0.4, (1.0, -2.0, 0.3))
        q = truth.apply(p)
        t_gnc, _ = gnc_tls(p, q, 0.1)
        t_svd = svd_align(p, q)
        return np.abs(t_gnc.as_matrix() - t_svd.as_matrix()).max() < 1e-6
    check("outlier-free GNC equals closed-form SVD", gnc_equals_svd)

    def ledger_conserved():
        cfg = SimConfig(seed=args.seed, ticks=6,
                        generator=GeneratorConfig(node_count=(6, 8),
                                                  points_per_node=(80, 150)),
                        encoder=EncoderConfig(k_p=64), dense_interval=3)
        rep = simulate(cfg)
        recount = sum(len(serialize(m)) for _, _, m in rep.messages)
        return recount == rep.ledger.total()
    check("bandwidth ledger matches byte recount", ledger_conserved)

    print(f"{sum(checks)}/{len(checks)} invariants hold")
    return 0 if all(checks) else 1


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except InsufficientDataError as exc:
        print(f"insufficient data: {exc}", file=sys.stderr)
        return 2
    except (SceneGraphParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
