"""Independent reference implementations used to check the package.

Each oracle is deliberately written differently from the code under test
(brute force, iterative relaxation, closed forms or a third-party library).
"""

from __future__ import annotations

import itertools
import math

import numpy as np
import torch

# hand-evaluated constants
FOCAL_CE = -math.log(0.9)                                   # gamma 0, eps 0
FOCAL_G2 = -(0.1**2) * math.log(0.9)                        # gamma 2, eps 0
FOCAL_G2_S01 = -(0.95 * 0.1**2 * math.log(0.9) + 0.05 * 0.9**2 * math.log(0.1))  # gamma 2, eps 0.1
CONF_09_01 = 1 + 0.9 * math.log2(0.9) + 0.1 * math.log2(0.1)
EST_IOU_A = 1 - 0.1 * 1000 / 190
EST_IOU_B = 1 - 0.5 * 200 / 150


def lr_cosine(epoch, lr0=5e-4, cycles=(10, 20, 40, 80)):
    start = 0
    for t_i in cycles:
        if epoch < start + t_i:
            return lr0 * 0.5 * (1 + math.cos(math.pi * (epoch - start) / t_i))
        start += t_i
    raise ValueError("beyond budget")


# --------------------------------------------------------------------------
# gradients

def finite_difference_report(model, loss_fn, h=1e-6, n_dirs=2, n_coords=3, seed=0):
    """Compare autograd with central differences for every named parameter.

    Each parameter is probed along random directions over the whole tensor
    and along its largest-gradient coordinates. Returns
    ``{name: (relative_error or None, analytic_norm, numeric_norm)}``; the
    relative error is None when the analytic gradient is structurally zero.
    """
    rng = np.random.default_rng(seed)
    model.zero_grad()
    loss_fn().backward()
    grads = {n: p.grad.detach().clone() for n, p in model.named_parameters()}
    out = {}
    for name, p in model.named_parameters():
        g = grads[name]
        dirs = [torch.as_tensor(rng.standard_normal(p.shape), dtype=p.dtype) for _ in range(n_dirs)]
        for k in torch.argsort(g.abs().ravel(), descending=True)[:n_coords].tolist():
            e = torch.zeros(p.numel(), dtype=p.dtype)
            e[k] = 1.0
            dirs.append(e.view_as(p))
        analytic, numeric = [], []
        for d in dirs:
            with torch.no_grad():
                p.add_(h * d)
                lp = float(loss_fn())
                p.sub_(2 * h * d)
                lm = float(loss_fn())
                p.add_(h * d)
            numeric.append((lp - lm) / (2 * h))
            analytic.append(float((g * d).sum()))
        a, n = np.array(analytic), np.array(numeric)
        an, nn_ = np.linalg.norm(a), np.linalg.norm(n)
        rel = None if an < 1e-12 else float(np.linalg.norm(a - n) / max(an, nn_))
        out[name] = (rel, an, nn_)
    return out


# --------------------------------------------------------------------------
# IoU estimation

def brute_force_iou_tables(max_total=40, num_classes=2):
    """All confusion tables with n <= max_total where the estimator's
    premises hold exactly: accuracy >= 1/C and FN = (1 - A) * n_n.

    Yields ``(tp, fp, fn, tn)``. ``n_n`` counts predicted negatives.
    """
    for total in range(1, max_total + 1):
        for tp, fp, fn in itertools.product(range(total + 1), repeat=3):
            tn = total - tp - fp - fn
            if tn < 0 or tp + fp + fn == 0:
                continue
            n_n = tn + fn
            # FN * N == (FP + FN) * n_n  <=>  FN == (1 - A) * n_n, in integers
            if fn * total != (fp + fn) * n_n:
                continue
            if (tp + tn) * num_classes < total:
                continue
            yield tp, fp, fn, tn


# --------------------------------------------------------------------------
# ice divides

def relaxation_fill(z):
    """Depression filling by iterative relaxation from the border (Planchon-Darboux style)."""
    z = np.asarray(z, dtype=float)
    w = np.full_like(z, np.inf)
    w[0, :], w[-1, :], w[:, 0], w[:, -1] = z[0, :], z[-1, :], z[:, 0], z[:, -1]
    h, wd = z.shape
    while True:
        changed = False
        for r in range(1, h - 1):
            for c in range(1, wd - 1):
                m = min(w[rr, cc] for rr in (r - 1, r, r + 1) for cc in (c - 1, c, c + 1) if (rr, cc) != (r, c))
                new = max(z[r, c], m)
                if new < w[r, c]:
                    w[r, c] = new
                    changed = True
        if not changed:
            return w


NEIGHBOURS = ((0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1))


def steepest_neighbour(z, r, c, pixel=1.0):
    """Offset of the steepest strictly-downhill neighbour, or None."""
    best, best_off = 0.0, None
    for dr, dc in NEIGHBOURS:
        rr, cc = r + dr, c + dc
        if 0 <= rr < z.shape[0] and 0 <= cc < z.shape[1]:
            s = (z[r, c] - z[rr, cc]) / (math.hypot(dr, dc) * pixel)
            if s > best:
                best, best_off = s, (dr, dc)
    return best_off


def parallel_segment_distance(length, gap):
    """Mean nearest distance between two parallel, aligned segments."""
    return float(gap)


# --------------------------------------------------------------------------
# bias optimisation

def constructed_region_model(seed=3):
    """Toy region-aware model whose location branch is linear in the region vector.

    The first MLP layer copies the 12 region weights shifted by +3 (GELU is
    nearly linear there), and the second adds ``outer(u, s) @ v`` to the fused
    features, so each region shifts the features along one direction ``u`` by a
    distinct amount ``s[j]``.
    """
    from glaciermap.model import ModelConfig, build_model

    cfg = ModelConfig.toy(location_mode="region")
    m = build_model(cfg, torch.float64)
    mlp = m.fusion.location_mlp
    s = np.random.default_rng(seed).permutation(np.linspace(-1, 1, 12))
    u = torch.as_tensor(np.random.default_rng(1).standard_normal(cfg.fusion_channels))
    with torch.no_grad():
        mlp[0].weight.zero_()
        mlp[0].bias.fill_(3.0)
        mlp[0].weight[:12, :12] = torch.eye(12, dtype=torch.float64)
        mlp[2].weight.zero_()
        mlp[2].bias.zero_()
        mlp[2].weight[:, :12] = torch.outer(u, torch.as_tensor(s))
    return m


def vertex_objectives(model, samples):
    """Summed predictive entropy (base C) at each one-hot region vector."""
    feats = {n: torch.as_tensor(np.stack([s.features[n] for s in samples]), dtype=torch.float64)
             for n in samples[0].features}
    out = []
    with torch.no_grad():
        for j in range(12):
            v = torch.zeros(len(samples), 12, dtype=torch.float64)
            v[:, j] = 1.0
            p = model.predict_proba(feats, v).clamp_min(1e-300)
            out.append(float(-(p * torch.log(p)).sum() / math.log(p.shape[1])))
    return out
