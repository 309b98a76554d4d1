"""Independent reference implementations used by the tests."""

import math

import numpy as np
import torch


def fd_max_rel_error(fn, tensors, probes=20, h=1e-6, seed=0, floor=1e-5):
    """Largest relative gap between autograd and central differences at random coordinates.

    ``fn`` maps the listed float64 leaf tensors to a scalar.  Each probe picks
    one tensor and one flat index uniformly at random.  The denominator is
    floored at ``floor``: with h=1e-6 the difference quotient carries about
    |f| * 1e-16 / h ~ 1e-10 of rounding noise, which would swamp the relative
    error of gradients much smaller than 1e-5.
    """
    for t in tensors:
        assert t.dtype == torch.float64 and t.requires_grad
    for t in tensors:
        t.grad = None
    fn().backward()
    grads = [t.grad.detach().clone() for t in tensors]
    gen = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(probes):
        k = int(gen.integers(len(tensors)))
        t = tensors[k]
        i = int(gen.integers(t.numel()))
        flat = t.data.view(-1)
        old = flat[i].item()
        with torch.no_grad():
            flat[i] = old + h
            up = fn().item()
            flat[i] = old - h
            down = fn().item()
            flat[i] = old
        numeric = (up - down) / (2 * h)
        analytic = grads[k].view(-1)[i].item()
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, rel)
    return worst


def brute_iou(pred, gt, num_classes):
    """Per-class IoU from explicit pixel sets; None where the union is empty."""
    out = []
    coords = list(np.ndindex(*gt.shape))
    for c in range(num_classes):
        p = {ij for ij in coords if pred[ij] == c}
        g = {ij for ij in coords if gt[ij] == c}
        union = p | g
        out.append(len(p & g) / len(union) if union else None)
    defined = [v for v in out if v is not None]
    return out, sum(defined) / len(defined)


def achievable_cutmix_areas(H, W):
    """All box areas reachable by a half-area box with h/w in [1/2, 2], h rounded first."""
    target = H * W / 2
    lo = int(math.floor(math.sqrt(target * 0.5)))
    hi = int(math.ceil(math.sqrt(target * 2.0)))
    areas = set()
    for h in range(max(lo, 1), min(hi, H) + 1):
        # only heights that rounding can actually produce from some aspect in the range
        if not (round(math.sqrt(target * 0.5)) <= h <= round(math.sqrt(target * 2.0))):
            continue
        w = min(max(int(round(target / h)), 1), W)
        areas.add(h * w)
    return areas


def ema_closed_form(phi_t0, phi_s, alpha, n):
    """Teacher value after n EMA steps against a fixed student."""
    return phi_s + (phi_t0 - phi_s) * alpha ** n
