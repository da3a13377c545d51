"""Training objectives as computable, gradient-checkable scalars.

Node-match negative log-likelihood over dual-normalized assignments, an
InfoNCE-style contrastive loss on shape features, and the optimal
transport loss on point assignments with dustbin terms.  Analytic
gradients are provided through the dual-normalization and (unrolled)
Sinkhorn maps so central differences can validate them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sgreg.matcher import augment_with_dustbin, _logsumexp, _softmax

_EPS = 1e-12


def loss_gnn(assignments, gt_pairs) -> float:
    """Negative log-likelihood of ground-truth node pairs, layer-averaged.

    -(1/2) * sum over layers and (i, j) in gt of log(A[i, j]); entries are
    clamped at 1e-12 before the log.  Empty ground truth gives 0.
    """
    pairs = list(gt_pairs)
    if not pairs:
        return 0.0
    total = 0.0
    for a in assignments:
        rows = np.array([p[0] for p in pairs])
        cols = np.array([p[1] for p in pairs])
        total += np.log(np.maximum(a[rows, cols], _EPS)).sum()
    return -0.5 * float(total)


def loss_contrastive(f_i: np.ndarray, f_j: np.ndarray, negatives: np.ndarray) -> float:
    """InfoNCE with the positive included in the denominator.

    -log[exp(f_i . f_j) / (exp(f_i . f_j) + sum_k exp(f_i . f_k))] over the
    negative feature rows; computed with log-sum-exp for stability.
    """
    negatives = np.asarray(negatives, dtype=float).reshape(-1, len(f_i))
    if negatives.shape[0] == 0:
        raise ValueError("negatives set must be non-empty")
    s_pos = float(f_i @ f_j)
    scores = np.concatenate([[s_pos], negatives @ f_i])
    mx = scores.max()
    return float(mx + np.log(np.exp(scores - mx).sum()) - s_pos)


def loss_ot(a_hat: np.ndarray, gt_pairs, unmatched_rows, unmatched_cols) -> float:
    """Optimal-transport NLL with dustbin terms.

    -sum log A(u, v) over ground-truth point pairs, minus log-mass sent to
    the dustbin for unmatched rows and columns; entries clamped at 1e-12.
    """
    n, m = a_hat.shape[0] - 1, a_hat.shape[1] - 1
    total = 0.0
    for u, v in gt_pairs:
        total += np.log(max(a_hat[u, v], _EPS))
    for u in unmatched_rows:
        total += np.log(max(a_hat[u, m], _EPS))
    for v in unmatched_cols:
        total += np.log(max(a_hat[n, v], _EPS))
    return -float(total)


def _softmax_backward(y: np.ndarray, dy: np.ndarray, axis: int) -> np.ndarray:
    """Jacobian-vector product of softmax: y * (dy - <dy, y>)."""
    inner = (dy * y).sum(axis=axis, keepdims=True)
    return y * (dy - inner)


def loss_gnn_dual_grad(scores, gt_pairs):
    """Value and gradient of loss_gnn composed with dual normalization.

    `scores` is a list of raw similarity matrices (one per layer); returns
    (loss, [dL/dS per layer]).
    """
    pairs = list(gt_pairs)
    grads = []
    loss = 0.0
    for s in scores:
        r = _softmax(s, axis=1)
        c = _softmax(s, axis=0)
        a = r * c
        da = np.zeros_like(a)
        for u, v in pairs:
            loss += -0.5 * np.log(max(a[u, v], _EPS))
            da[u, v] += -0.5 / max(a[u, v], _EPS)
        ds = _softmax_backward(r, da * c, axis=1) + _softmax_backward(c, da * r, axis=0)
        grads.append(ds)
    return float(loss), grads


def sinkhorn_unrolled(s: np.ndarray, iters: int, dustbin_score: float):
    """Sinkhorn forward pass that records the per-iteration potentials."""
    n, m = s.shape
    z = augment_with_dustbin(s, dustbin_score)
    log_mu = np.concatenate([np.zeros(n), [np.log(m)]])
    log_nu = np.concatenate([np.zeros(m), [np.log(n)]])
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    us, vs_prev = [], []
    for _ in range(iters):
        vs_prev.append(v)
        u = log_mu - _logsumexp(z + v[None, :], axis=1)
        us.append(u)
        v = log_nu - _logsumexp(z + u[:, None], axis=0)
    a = np.exp(z + u[:, None] + v[None, :])
    return a, z, us, vs_prev, v


def loss_ot_sinkhorn_grad(s: np.ndarray, gt_pairs, unmatched_rows, unmatched_cols,
                          iters: int = 100, dustbin_score: float = 0.5):
    """Value and dL/dS of loss_ot composed with unrolled Sinkhorn.

    Reverse-mode accumulation through every normalization round; exact for
    the truncated iteration (the same computation graph as the forward
    pass), so central differences must agree to roundoff-scale error.
    """
    n, m = s.shape
    a, z, us, vs_prev, v_last = sinkhorn_unrolled(s, iters, dustbin_score)
    cells = [(u, v) for u, v in gt_pairs]
    cells += [(u, m) for u in unmatched_rows]
    cells += [(n, v) for v in unmatched_cols]
    loss = -float(sum(np.log(max(a[cell], _EPS)) for cell in cells))
    # log A = Z + u + v exactly, so the direct part of the gradient is -1
    # per selected cell, routed into Z, u_last, and v_last.
    dz = np.zeros_like(z)
    du = np.zeros(n + 1)
    dv = np.zeros(m + 1)
    for (ci, cj) in cells:
        dz[ci, cj] -= 1.0
        du[ci] -= 1.0
        dv[cj] -= 1.0
    for t in range(iters - 1, -1, -1):
        # v_t = log_nu - LSE_i(Z + u_t): column softmax of (Z + u_t)
        p = _softmax(z + us[t][:, None], axis=0)
        dz += -dv[None, :] * p
        du += -(p @ dv)
        # u_t = log_mu - LSE_j(Z + v_{t-1}): row softmax of (Z + v_{t-1})
        q = _softmax(z + vs_prev[t][None, :], axis=1)
        dz += -du[:, None] * q
        dv = -(q.T @ du)
        du = np.zeros(n + 1)
    return loss, dz[:n, :m]


def finite_difference_check(fn, x0: np.ndarray, h: float = 1e-5) -> float:
    """Max relative disagreement between analytic and central-difference grads.

    `fn` maps a flat parameter vector to (loss, gradient).  The relative
    error of each component is |fd - g| / max(|fd|, |g|, 1e-6).
    """
    x0 = np.asarray(x0, dtype=float).ravel()
    _, grad = fn(x0)
    grad = np.asarray(grad, dtype=float).ravel()
    fd = np.empty_like(grad)
    for i in range(len(x0)):
        step = np.zeros_like(x0)
        step[i] = h
        hi, _ = fn(x0 + step)
        lo, _ = fn(x0 - step)
        fd[i] = (hi - lo) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(grad)), 1e-6)
    return float((np.abs(fd - grad) / denom).max())


@dataclass
class LossReport:
    """Scalar objective values for one graph pair."""

    l_gnn: float
    l_shape: float
    l_ot: float
    l_contrastive: float

    @property
    def l_total(self) -> float:
        return self.l_gnn + self.l_shape

    def as_dict(self) -> dict:
        return {"l_gnn": self.l_gnn, "l_shape": self.l_shape,
                "l_ot": self.l_ot, "l_contrastive": self.l_contrastive,
                "l_total": self.l_total}


def loss_report(fa, fb, weights, gt, matcher_cfg=None) -> LossReport:
    """Assemble the full objective for an encoded graph pair.

    The GNN term uses the pre- and post-fusion node assignments; the shape
    term averages, over ground-truth pairs, the point OT loss plus the two
    directions of the contrastive loss.
    """
    from sgreg.matcher import (MatcherConfig, dual_normalize, node_similarity,
                               sinkhorn, point_similarity)

    cfg = matcher_cfg or MatcherConfig()
    row_a = {nid: r for r, nid in enumerate(fa.node_ids)}
    row_b = {nid: r for r, nid in enumerate(fb.node_ids)}
    gt_cells = [(row_a[i], row_b[j]) for i, j in gt.node_matches
                if i in row_a and j in row_b]
    a_mid = dual_normalize(node_similarity(fa.x1, fb.x1, weights.linear_node_mid))
    a_full = dual_normalize(node_similarity(fa.x2, fb.x2, weights.linear_node))
    l_gnn = loss_gnn([a_mid, a_full], gt_cells)

    l_ot_total = 0.0
    l_cont_total = 0.0
    n_pairs = 0
    for i, j in sorted(gt.node_matches):
        if i not in row_a or j not in row_b:
            continue
        ra, rb = row_a[i], row_b[j]
        negatives_b = [row_b[k] for k in gt.negatives_per_node.get(i, ())
                       if k in row_b]
        negatives_a = [row_a[k] for k in row_a
                       if (k, j) not in gt.node_matches]
        if negatives_b:
            l_cont_total += loss_contrastive(fa.shape[ra], fb.shape[rb],
                                             fb.shape[negatives_b])
        if negatives_a:
            l_cont_total += loss_contrastive(fb.shape[rb], fa.shape[ra],
                                             fa.shape[negatives_a])
        s = point_similarity(fa.point_feats[ra], fb.point_feats[rb],
                             fa.point_mask[ra], fb.point_mask[rb])
        a_pts = sinkhorn(s, cfg.sinkhorn_iters, cfg.dustbin_score)
        gt_pts = gt.point_matches_per_pair.get((i, j), np.zeros((0, 2), dtype=int))
        kp_of_a = {int(full): kp for kp, full in enumerate(fa.point_indices[ra])
                   if full >= 0}
        kp_of_b = {int(full): kp for kp, full in enumerate(fb.point_indices[rb])
                   if full >= 0}
        pairs_kp = [(kp_of_a[u], kp_of_b[v]) for u, v in np.asarray(gt_pts)
                    if int(u) in kp_of_a and int(v) in kp_of_b]
        matched_rows = {u for u, _ in pairs_kp}
        matched_cols = {v for _, v in pairs_kp}
        unmatched_rows = [r for r in np.flatnonzero(fa.point_mask[ra])
                          if r not in matched_rows]
        unmatched_cols = [r for r in np.flatnonzero(fb.point_mask[rb])
                          if r not in matched_cols]
        l_ot_total += loss_ot(a_pts, pairs_kp, unmatched_rows, unmatched_cols)
        n_pairs += 1
    scale = 1.0 / (2.0 * n_pairs) if n_pairs else 0.0
    l_shape = scale * (l_ot_total + l_cont_total)
    return LossReport(l_gnn=l_gnn, l_shape=l_shape,
                      l_ot=scale * l_ot_total, l_contrastive=scale * l_cont_total)
