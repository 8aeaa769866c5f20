"""Straight-line reference implementations used as test oracles.

Written from the metric and refinement definitions with explicit loops; they share no code
with the package. Conventions (adaptive threshold, degenerate ground truth)
are the documented ones.
"""
import math
from collections import deque

import numpy as np

EPS = 2.220446049250313e-16  # spacing(1)


def _cells(a):
    return [(i, j) for i in range(len(a)) for j in range(len(a[0]))]


def _mean(vals):
    return sum(vals) / len(vals)


def naive_mae(pred, gt):
    tot = 0.0
    for i, j in _cells(pred):
        tot += abs(float(pred[i][j]) - float(gt[i][j]))
    return tot / (len(pred) * len(pred[0]))


def naive_adaptive(pred):
    m = _mean([float(pred[i][j]) for i, j in _cells(pred)])
    thr = min(2 * m, 1.0)
    return [[1 if (pred[i][j] >= thr and pred[i][j] > 0) else 0 for j in range(len(pred[0]))]
            for i in range(len(pred))]


def naive_f_binary(binary, gt, beta2=0.3):
    tp = fp = fn = 0
    for i, j in _cells(gt):
        b, g = binary[i][j], gt[i][j]
        tp += b and g
        fp += b and not g
        fn += g and not b
    if tp == 0:
        return 0.0
    p, r = tp / (tp + fp), tp / (tp + fn)
    return (1 + beta2) * p * r / (beta2 * p + r)


def naive_f(pred, gt, beta2=0.3, policy="adaptive"):
    cells = _cells(gt)
    if not any(gt[i][j] for i, j in cells):
        return 1.0 - _mean([float(pred[i][j]) for i, j in cells])
    if policy == "adaptive":
        return naive_f_binary(naive_adaptive(pred), gt, beta2)
    best = 0.0
    for t in range(1, 256):
        b = [[1 if round(float(pred[i][j]) * 255) >= t else 0 for j in range(len(pred[0]))]
             for i in range(len(pred))]
        best = max(best, naive_f_binary(b, gt, beta2))
    return best


def _object_score(vals):
    mu = _mean(vals)
    sd = math.sqrt(sum((v - mu) ** 2 for v in vals) / (len(vals) - 1)) if len(vals) > 1 else 0.0
    return 2 * mu / (mu * mu + 1 + sd + EPS)


def _region_ssim(p, g):
    n = len(p)
    if n == 0:
        return 0.0
    x, y = _mean(p), _mean(g)
    d = max(n - 1, 1)
    # a region holding one value has zero spread by definition
    dp = [0.0] * n if len(set(p)) == 1 else [a - x for a in p]
    dg = [0.0] * n if len(set(g)) == 1 else [b - y for b in g]
    sx = sum(a * a for a in dp) / d
    sy = sum(b * b for b in dg) / d
    sxy = sum(a * b for a, b in zip(dp, dg)) / d
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + EPS)
    return 1.0 if beta == 0 else 0.0


def naive_s(pred, gt, alpha=0.5):
    h, w = len(gt), len(gt[0])
    cells = _cells(gt)
    y = _mean([1.0 if gt[i][j] else 0.0 for i, j in cells])
    if y == 0:
        return 1.0 - _mean([float(pred[i][j]) for i, j in cells])
    if y == 1:
        return _mean([float(pred[i][j]) for i, j in cells])
    fg = [float(pred[i][j]) for i, j in cells if gt[i][j]]
    bg = [1.0 - float(pred[i][j]) for i, j in cells if not gt[i][j]]
    s_obj = y * _object_score(fg) + (1 - y) * _object_score(bg)
    # centroid in 1-based coordinates, rounded half to even like numpy
    rows = [i for i, j in cells if gt[i][j]]
    cols = [j for i, j in cells if gt[i][j]]
    cx = int(round(_mean(cols))) + 1
    cy = int(round(_mean(rows))) + 1
    area = h * w
    w1 = cx * cy / area
    w2 = (w - cx) * cy / area
    w3 = cx * (h - cy) / area
    w4 = 1 - w1 - w2 - w3
    boxes = [(0, cy, 0, cx, w1), (0, cy, cx, w, w2), (cy, h, 0, cx, w3), (cy, h, cx, w, w4)]
    s_reg = 0.0
    for r0, r1, c0, c1, wt in boxes:
        p = [float(pred[i][j]) for i in range(r0, r1) for j in range(c0, c1)]
        g = [1.0 if gt[i][j] else 0.0 for i in range(r0, r1) for j in range(c0, c1)]
        s_reg += wt * _region_ssim(p, g)
    return max(0.0, alpha * s_obj + (1 - alpha) * s_reg)


def naive_e(pred, gt):
    cells = _cells(gt)
    b = naive_adaptive(pred)
    if not any(gt[i][j] for i, j in cells):
        return 1.0 - _mean([b[i][j] for i, j in cells])
    if all(gt[i][j] for i, j in cells):
        return _mean([b[i][j] for i, j in cells])
    mb = _mean([b[i][j] for i, j in cells])
    mg = _mean([1.0 if gt[i][j] else 0.0 for i, j in cells])
    tot = 0.0
    for i, j in cells:
        fp = b[i][j] - mb
        fg = (1.0 if gt[i][j] else 0.0) - mg
        xi = 2 * fg * fp / (fg * fg + fp * fp + EPS)
        tot += (1 + xi) ** 2 / 4
    return tot / len(cells)


def naive_weighted_f(pred, gt, beta2=1.0):
    h, w = len(gt), len(gt[0])
    cells = _cells(gt)
    fg = [(i, j) for i, j in cells if gt[i][j]]
    if not fg:
        return 0.0
    err = [[abs(float(pred[i][j]) - (1.0 if gt[i][j] else 0.0)) for j in range(w)] for i in range(h)]
    dist = [[0.0] * w for _ in range(h)]
    et = [row[:] for row in err]
    for i, j in cells:
        if gt[i][j]:
            continue
        best, arg = None, None
        for fi, fj in fg:  # row-major order: the first minimum wins ties
            d2 = (i - fi) ** 2 + (j - fj) ** 2
            if best is None or d2 < best:
                best, arg = d2, (fi, fj)
        dist[i][j] = math.sqrt(best)
        et[i][j] = err[arg[0]][arg[1]]
    # 7x7 Gaussian, sigma 5, unit sum; zero padding
    k = [[math.exp(-(a * a + b * b) / 50.0) for b in range(-3, 4)] for a in range(-3, 4)]
    ks = sum(map(sum, k))
    ea = [[0.0] * w for _ in range(h)]
    for i, j in cells:
        acc = 0.0
        for a in range(-3, 4):
            for b in range(-3, 4):
                if 0 <= i + a < h and 0 <= j + b < w:
                    acc += k[a + 3][b + 3] / ks * et[i + a][j + b]
        ea[i][j] = acc
    ew = {}
    for i, j in cells:
        e = err[i][j]
        if gt[i][j]:
            e = min(e, ea[i][j]) if ea[i][j] < e else e
            ew[i, j] = e
        else:
            ew[i, j] = e * (2.0 - math.exp(math.log(0.5) / 5 * dist[i][j]))
    ew_fg = [ew[c] for c in fg]
    tpw = len(fg) - sum(ew_fg)
    fpw = sum(ew[c] for c in cells if not gt[c[0]][c[1]])
    r = 1 - _mean(ew_fg)
    p = tpw / (tpw + fpw + EPS)
    return (1 + beta2) * r * p / (r + beta2 * p + EPS)


NAIVE = {"mae": naive_mae, "f_beta": naive_f, "s_alpha": naive_s, "e_s": naive_e,
         "f_beta_w": naive_weighted_f}


# --- refinement -----------------------------------------------------------------------

def pamr_matrix(image, params):
    """Dense (N, N) propagation matrix written straight from the definition."""
    h, w = image.shape[:2]
    a = np.zeros((h * w, h * w))
    for y in range(h):
        for x in range(w):
            nbrs = []
            for r in params.radii:
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        if dy or dx:
                            # borders replicate the edge pixel
                            ny = min(max(y + dy * r, 0), h - 1)
                            nx = min(max(x + dx * r, 0), w - 1)
                            nbrs.append(ny * w + nx)
            logits = np.array([-np.sum((image[y, x] - image.reshape(-1, 3)[j]) ** 2)
                               for j in nbrs]) / params.temperature
            wts = np.exp(logits - logits.max())
            wts /= wts.sum()
            for j, v in zip(nbrs, wts):
                a[y * w + x, j] += v
    return a


def crf_oracle(image, m, p, iterations):
    h, w = m.shape
    n = h * w
    pos = [(i // w, i % w) for i in range(n)]
    col = image.reshape(n, 3)
    k = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            d2 = (pos[i][0] - pos[j][0]) ** 2 + (pos[i][1] - pos[j][1]) ** 2
            c2 = float(np.sum((col[i] - col[j]) ** 2))
            k[i, j] = (p.w_bilateral * np.exp(-d2 / (2 * p.theta_alpha ** 2) - c2 / (2 * p.theta_beta ** 2))
                       + p.w_spatial * np.exp(-d2 / (2 * p.theta_gamma ** 2)))
    if p.normalization == "row":
        k = k / k.sum(axis=1, keepdims=True)
    q = np.clip(m.ravel(), 1e-6, 1 - 1e-6)
    u = [[-np.log(1 - q[i]), -np.log(q[i])] for i in range(n)]
    marg = [[1 - q[i], q[i]] for i in range(n)]
    for _ in range(iterations):
        new = []
        for i in range(n):
            e0 = u[i][0] + sum(k[i, j] * marg[j][1] for j in range(n))
            e1 = u[i][1] + sum(k[i, j] * marg[j][0] for j in range(n))
            z = np.exp(-e0) + np.exp(-e1)
            new.append([np.exp(-e0) / z, np.exp(-e1) / z])
        marg = new
    return np.array(marg)[:, 1].reshape(h, w)


def flood_fill_components(labels, k):
    h, w = labels.shape
    seen = np.zeros_like(labels, dtype=bool)
    start = tuple(np.argwhere(labels == k)[0])
    queue, seen[start] = deque([start]), True
    count = 0
    while queue:
        y, x = queue.popleft()
        count += 1
        for ny, nx in ((y + 1, x), (y - 1, x), (y, x + 1), (y, x - 1)):
            if 0 <= ny < h and 0 <= nx < w and not seen[ny, nx] and labels[ny, nx] == k:
                seen[ny, nx] = True
                queue.append((ny, nx))
    return count


def assert_partition(seg):
    lab = seg.labels
    assert lab.min() == 0 and lab.max() == seg.num_clusters - 1
    sizes = np.bincount(lab.ravel(), minlength=seg.num_clusters)
    assert np.all(sizes > 0)
    for k in range(seg.num_clusters):
        assert flood_fill_components(lab, k) == sizes[k]


def two_region_image(h=8, w=8):
    img = np.zeros((h, w, 3))
    img[:, : w // 2] = (0.9, 0.1, 0.1)
    img[:, w // 2:] = (0.1, 0.2, 0.9)
    return img
