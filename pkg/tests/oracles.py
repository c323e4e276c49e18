"""Independent reference computations shared by the unit and acceptance tests."""

import numpy as np
import torch

from omnidet import losses
from omnidet.geometry import Box, Detection

# finite differences ----------------------------------------------------------

FD_STEP = 1e-4
FD_RTOL = 1e-4


def central_fd(f, x: torch.Tensor, h: float = FD_STEP) -> torch.Tensor:
    """Elementwise central differences of a scalar function of ``x``."""
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = f(x).item()
        flat[i] = orig - h
        down = f(x).item()
        flat[i] = orig
        g.reshape(-1)[i] = (up - down) / (2 * h)
    return g


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    return float(((a - b).abs() / b.abs().clamp(min=1e-8)).max())


# hand-derived derivatives w.r.t. P (gamma, fixed W, interior of the clamp)

def d_focal_pos(P, g):
    return g * (1 - P) ** (g - 1) * torch.log(P) - (1 - P) ** g / P


def d_focal_neg(P, g):
    return -g * P ** (g - 1) * torch.log(1 - P) + P ** g / (1 - P)


def d_soft_pos(P, W, g):
    return -W ** g * (-g * (1 - P) ** (g - 1) * torch.log((1 - W) * P) + (1 - P) ** g / P)


def d_soft_neg(P, W, g):
    return -(1 - W) ** g * (g * P ** (g - 1) * torch.log(W * (1 - P)) - P ** g / (1 - P))


def gradient_cases(n: int = 100, seed: int = 0, gamma: float = 2.0):
    """Yield ``(name, f, x, analytic)`` for each loss; ``analytic`` may be None."""
    gen = torch.Generator().manual_seed(seed)
    P = (0.05 + 0.9 * torch.rand(n, generator=gen, dtype=torch.float64))
    W = (0.05 + 0.9 * torch.rand(n, generator=gen, dtype=torch.float64))
    pos = torch.rand(n, generator=gen) < 0.3
    neg = ~pos
    t = 0.5
    Wpos = W >= t
    yield ("focal_certain", lambda p: losses.focal_certain(p, pos, neg, gamma), P,
           torch.where(pos, d_focal_pos(P, gamma), d_focal_neg(P, gamma)))
    yield ("hla_loss", lambda p: losses.hla_loss(p, W, t, gamma), P,
           torch.where(Wpos, d_focal_pos(P, gamma), d_focal_neg(P, gamma)))
    yield ("sla_loss", lambda p: losses.sla_loss(p, W, t, gamma), P,
           torch.where(Wpos, d_soft_pos(P, W, gamma), d_soft_neg(P, W, gamma)))
    yield ("dla_loss", lambda p: losses.dla_loss(p, W, gamma), P,
           d_soft_pos(P, W, gamma) + d_soft_neg(P, W, gamma))
    # weights kept outside the logarithms: W^g and (1 - W)^g scale plain focal terms
    yield ("sla_loss_plain", lambda p: losses.sla_loss(p, W, t, gamma, in_log=False), P,
           torch.where(Wpos, W ** gamma * d_focal_pos(P, gamma), (1 - W) ** gamma * d_focal_neg(P, gamma)))
    yield ("dla_loss_plain", lambda p: losses.dla_loss(p, W, gamma, in_log=False), P,
           W ** gamma * d_focal_pos(P, gamma) + (1 - W) ** gamma * d_focal_neg(P, gamma))
    pts, dist, gt = giou_problem(n, gen)
    yield ("giou_loss", lambda d: losses.giou_loss(d, pts, gt), dist, None)


def giou_problem(n, gen):
    """Points, distances and governing boxes with every edge comparison kept away from a tie."""
    pts = torch.empty(n, 2, dtype=torch.float64)
    dist = torch.empty(n, 4, dtype=torch.float64)
    gt = torch.empty(n, 4, dtype=torch.float64)
    k = 0
    while k < n:
        p = 20 + 60 * torch.rand(2, generator=gen, dtype=torch.float64)
        d = 2 + 20 * torch.rand(4, generator=gen, dtype=torch.float64)
        pred = torch.stack([p[0] - d[0], p[1] - d[1], p[0] + d[2], p[1] + d[3]])
        c = pred + (torch.rand(4, generator=gen, dtype=torch.float64) - 0.5) * 16
        g = torch.stack([torch.minimum(c[0], c[2] - 1), torch.minimum(c[1], c[3] - 1), c[2], c[3]])
        iw = min(pred[2], g[2]) - max(pred[0], g[0])
        ih = min(pred[3], g[3]) - max(pred[1], g[1])
        if (pred - g).abs().min() < 0.05 or iw < 0.05 or ih < 0.05:
            continue
        delta = (pred[[0, 2]][:, None] - g[[0, 2]][None]).abs().min()
        delta = min(float(delta), float((pred[[1, 3]][:, None] - g[[1, 3]][None]).abs().min()))
        if delta < 0.05:
            continue
        pts[k], dist[k], gt[k] = p, d, g
        k += 1
    return pts, dist, gt


# brute-force precision/recall ------------------------------------------------

def _iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def brute_force_ap(scenes, thr):
    """AP from recomputing the matching for every score-ranked prefix.

    ``scenes`` is a list of ``(preds, gts)`` with preds ``[(score, box_tuple)]``.
    Interpolated precision at each of 101 recall levels is the best precision
    over all prefixes reaching that recall.
    """
    n_gt = sum(len(g) for _, g in scenes)
    if n_gt == 0:
        return 0.0
    pooled = sorted(((s, i, b) for i, (p, _) in enumerate(scenes) for s, b in p), key=lambda x: -x[0])
    curve = []
    for k in range(1, len(pooled) + 1):
        tp = 0
        for i, (_, gts) in enumerate(scenes):
            mine = [b for s, j, b in pooled[:k] if j == i]
            used = set()
            for b in mine:
                cands = [(_iou(b, g), jj) for jj, g in enumerate(gts) if jj not in used]
                cands = [c for c in cands if c[0] >= thr]
                if cands:
                    used.add(max(cands)[1])
                    tp += 1
        curve.append((tp / n_gt, tp / k))
    total = 0.0
    for r in np.linspace(0, 1, 101):
        ps = [p for rec, p in curve if rec >= r - 1e-12]
        total += max(ps) if ps else 0.0
    return total / 101


def random_scene(rng, max_gt=5, max_pred=10):
    gts = []
    for _ in range(int(rng.integers(0, max_gt + 1))):
        x, y = rng.uniform(0, 50, 2)
        w, h = rng.uniform(4, 20, 2)
        gts.append((x, y, x + w, y + h))
    preds = []
    for _ in range(int(rng.integers(0, max_pred + 1))):
        if gts and rng.random() < 0.7:
            g = gts[int(rng.integers(len(gts)))]
            j = rng.normal(0, 2.5, 4)
            b = (g[0] + j[0], g[1] + j[1], max(g[2] + j[2], g[0] + j[0] + 1), max(g[3] + j[3], g[1] + j[1] + 1))
        else:
            x, y = rng.uniform(0, 50, 2)
            b = (x, y, x + rng.uniform(4, 20), y + rng.uniform(4, 20))
        preds.append((float(rng.random()), tuple(float(v) for v in b)))
    return preds, gts


def scene_to_objects(scene):
    preds, gts = scene
    return [Detection(Box(*b), s) for s, b in preds], [Box(*g) for g in gts]
