"""Brute-force reference implementations for the test suite.

Nothing here imports production math from `forecasting`; every function is a direct,
loop-based reading of the definition it checks.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import torch


def oracle_lof_labels(futures, valid, points, threshold, keyframes):
    rows = []
    for step in keyframes:
        row = []
        for px, py in points:
            hit = 0
            for a in range(len(futures)):
                if not valid[a][step - 1]:
                    continue
                fx, fy = futures[a][step - 1]
                if math.hypot(fx - px, fy - py) <= threshold:
                    hit = 1
                    break
            row.append(hit)
        rows.append(row)
    return rows


def oracle_render(trajectories, points, threshold, keyframes):
    rows = []
    for step in keyframes:
        row = []
        for px, py in points:
            hit = 0
            for agent in trajectories:
                for mode in agent:
                    fx, fy = mode[step - 1]
                    if math.hypot(fx - px, fy - py) <= threshold:
                        hit = 1
            row.append(hit)
        rows.append(row)
    return rows


def oracle_iou(predicted, labels, threshold):
    num = 0.0
    den = 0.0
    for o, y in zip(predicted, labels):
        num += (1.0 if o > threshold else 0.0) * y
        den += o + y - o * y
    if den == 0.0:
        return 1.0 if num == 0.0 else 0.0
    return num / den


def oracle_auc(predicted, labels, n_thresholds=100):
    positives = sum(1 for y in labels if y)
    if positives == 0:
        return None
    curve = [(0.0, 1.0)]
    for i in range(n_thresholds):
        th = i / (n_thresholds - 1)
        tp = fp = 0
        for o, y in zip(predicted, labels):
            if o > th:
                if y:
                    tp += 1
                else:
                    fp += 1
        if tp + fp == 0:
            continue
        curve.append((tp / positives, tp / (tp + fp)))
    curve.sort(key=lambda rp: rp[0])
    area = 0.0
    for (r0, p0), (r1, p1) in zip(curve, curve[1:]):
        area += (r1 - r0) * (p0 + p1) / 2.0
    return min(max(area, 0.0), 1.0)


def _dist(a, b):
    return math.hypot(a[0] - b[0], a[1] - b[1])


def oracle_trajectory_metrics(loc, probs, gt, k):
    """Per-call means of minADE, minFDE, b-minFDE and miss rate; every step valid."""
    ades, fdes, briers, misses = [], [], [], []
    for a in range(len(loc)):
        K = len(loc[a])
        order = sorted(range(K), key=lambda m: (-probs[a][m], m))[: min(k, K)]
        best_ade = min(sum(_dist(loc[a][m][t], gt[a][t]) for t in range(len(gt[a]))) / len(gt[a]) for m in order)
        best_mode = min(order, key=lambda m: (_dist(loc[a][m][-1], gt[a][-1]), order.index(m)))
        fde = _dist(loc[a][best_mode][-1], gt[a][-1])
        ades.append(best_ade)
        fdes.append(fde)
        briers.append(fde + (1.0 - probs[a][best_mode]) ** 2)
        misses.append(1.0 if fde > 2.0 else 0.0)
    n = len(loc)
    return {"ade": sum(ades) / n, "fde": sum(fdes) / n, "brier": sum(briers) / n, "mr": sum(misses) / n}


def oracle_multi_world(loc, gt):
    n_agents = len(loc)
    K = len(loc[0])
    worlds = []
    for k in range(K):
        fdes = [_dist(loc[a][k][-1], gt[a][-1]) for a in range(n_agents)]
        ades = [sum(_dist(loc[a][k][t], gt[a][t]) for t in range(len(gt[a]))) / len(gt[a]) for a in range(n_agents)]
        worlds.append((sum(fdes) / n_agents, sum(ades) / n_agents, fdes))
    best = min(range(K), key=lambda k: (worlds[k][0], k))
    return {
        "avgMinFDE": worlds[best][0],
        "avgMinADE": min(w[1] for w in worlds),
        "avgBrierMinFDE": worlds[best][0] + (1.0 - 1.0 / K) ** 2,
        "actorMR": sum(1 for f in worlds[best][2] if f > 2.0) / n_agents,
    }


def oracle_mixture_nll(probs, loc, scale, gt):
    """Mean over agents of -log sum_k p_k prod_t,c Laplace density, evaluated in linear space."""
    total = 0.0
    for a in range(len(probs)):
        mixture = 0.0
        for k in range(len(probs[a])):
            density = 1.0
            for t in range(len(gt[a])):
                for c in range(2):
                    b = scale[a][k][t][c]
                    density *= math.exp(-abs(gt[a][t][c] - loc[a][k][t][c]) / b) / (2.0 * b)
            mixture += probs[a][k] * density
        total += -math.log(mixture)
    return total / len(probs)


def oracle_wta(proposals, gt):
    winners = []
    for a in range(len(proposals)):
        scores = [
            sum(_dist(proposals[a][k][t], gt[a][t]) for t in range(len(gt[a]))) / len(gt[a])
            for k in range(len(proposals[a]))
        ]
        winners.append(min(range(len(scores)), key=lambda k: (scores[k], k)))
    return winners


def oracle_radius_pairs(q_pos, q_group, k_pos, k_group, radius, exclude_self=False):
    pairs = set()
    for i, (qp, qg) in enumerate(zip(q_pos, q_group)):
        for j, (kp, kg) in enumerate(zip(k_pos, k_group)):
            if qg != kg or (exclude_self and i == j):
                continue
            if (qp[0] - kp[0]) ** 2 + (qp[1] - kp[1]) ** 2 <= radius * radius:
                pairs.add((j, i))
    return pairs


def finite_difference_grad(
    closure: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    h: float = 1e-5,
    *,
    indices: Sequence[Sequence[int]] | None = None,
) -> list[torch.Tensor]:
    """Central differences per parameter entry; with `indices`, only those flat entries per tensor are filled."""
    grads = []
    with torch.no_grad():
        for p in params:
            grad = torch.zeros_like(p)
            flat, gflat = p.view(-1), grad.view(-1)
            chosen = range(flat.numel()) if indices is None else indices[len(grads)]
            for idx in chosen:
                orig = flat[idx].item()
                flat[idx] = orig + h
                up = float(closure())
                flat[idx] = orig - h
                down = float(closure())
                flat[idx] = orig
                gflat[idx] = (up - down) / (2.0 * h)
            grads.append(grad)
    return grads


def directional_difference(
    closure: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    directions: Sequence[torch.Tensor],
    h: float = 1e-5,
) -> float:
    """Central difference of the loss along one joint direction over all parameters."""
    with torch.no_grad():
        originals = [p.detach().clone() for p in params]
        for p, d in zip(params, directions):
            p.add_(h * d)
        up = float(closure())
        for p, o, d in zip(params, originals, directions):
            p.copy_(o - h * d)
        down = float(closure())
        for p, o in zip(params, originals):
            p.copy_(o)
    return (up - down) / (2.0 * h)
