"""Slow, obviously-correct reference implementations used only by the tests."""

import itertools
import math

import numpy as np


def brute_boundary(mask):
    """Foreground voxels with a face neighbour outside the mask or outside the volume."""
    mask = np.asarray(mask, dtype=bool)
    out = np.zeros_like(mask)
    shape = mask.shape
    for idx in itertools.product(*[range(n) for n in shape]):
        if not mask[idx]:
            continue
        for axis in range(3):
            for step in (-1, 1):
                nb = list(idx)
                nb[axis] += step
                if not 0 <= nb[axis] < shape[axis] or not mask[tuple(nb)]:
                    out[idx] = True
    return out


def brute_directed(src, dst, spacing):
    a = np.argwhere(src).astype(np.float64)
    b = np.argwhere(dst).astype(np.float64)
    sp = np.asarray(spacing, dtype=np.float64)
    diff = (a[:, None, :] - b[None, :, :]) * sp
    return np.sqrt((diff ** 2).sum(-1)).min(axis=1)


def exact_percentile(values, percent=95):
    """Smallest value with at least ``percent``% of the sample at or below it."""
    ordered = sorted(values)
    n = len(ordered)
    for k in range(1, n + 1):
        if 100 * k >= percent * n:
            return float(ordered[k - 1])
    raise AssertionError("unreachable")


def brute_hd95(pred, gt, spacing=(1.0, 1.0, 1.0)):
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if not pred.any() and not gt.any():
        return 0.0
    if pred.any() != gt.any():
        return math.sqrt(sum((n * s) ** 2 for n, s in zip(pred.shape, spacing)))
    bp, bg = brute_boundary(pred), brute_boundary(gt)
    return max(exact_percentile(brute_directed(bp, bg, spacing)), exact_percentile(brute_directed(bg, bp, spacing)))


def brute_dice(pred, gt):
    p = {tuple(i) for i in np.argwhere(pred)}
    g = {tuple(i) for i in np.argwhere(gt)}
    if not p and not g:
        return 1.0
    return 2 * len(p & g) / (len(p) + len(g))


def scalar_nesterov(w, grad_fn, lr, momentum, steps, v=0.0):
    """Nesterov SGD on one scalar: v <- m v - lr g ; w <- w + m v - lr g."""
    trace = []
    for _ in range(steps):
        g = grad_fn(w)
        v = momentum * v - lr * g
        w = w + momentum * v - lr * g
        trace.append(w)
    return w, v, trace


def finite_difference_check(params, f, h=1e-7):
    """Worst relative error between autograd and central differences over named parameters."""
    worst = 0.0
    for name, p in params:
        analytic = p.grad.detach().clone().ravel()
        numeric = analytic.clone().zero_()
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * h)
        scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
        worst = max(worst, (analytic - numeric).norm().item() / scale)
    return worst
