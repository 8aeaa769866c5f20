"""Appearance-driven refinement of score maps.

* ``pamr_refine``: iterative propagation over dilated 3x3 neighbourhoods with
  RGB-affinity softmax weights.
* ``slic`` + ``superpixel_refine``: localized k-means superpixels, then a
  per-superpixel mean of the map.
* ``crf_refine``: two-label dense CRF, exact O(N^2) mean-field.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import CapacityError, ConfigError, ShapeError, check_same_hw


@dataclass(frozen=True)
class PamrParams:
    iterations: int = 10
    radii: tuple = (1, 2, 4, 8)
    temperature: float = 0.01

    def __post_init__(self):
        if self.iterations < 1 or any(r < 1 for r in self.radii) or self.temperature <= 0:
            raise ConfigError(f"invalid PAMR parameters {self}")


@dataclass(frozen=True)
class SlicParams:
    n_segments: int = 96
    compactness: float = 10.0
    iterations: int = 10


@dataclass(frozen=True)
class CrfParams:
    w_bilateral: float = 4.0
    w_spatial: float = 3.0
    theta_alpha: float = 49.0
    theta_beta: float = 0.2
    theta_gamma: float = 3.0
    iterations: int = 5
    max_pixels: int = 96 * 96
    # "row": rows of the weighted pairwise kernel (self excluded) scaled to unit sum;
    # "none": raw Gaussian sums
    normalization: str = "row"

    def __post_init__(self):
        if self.w_bilateral < 0 or self.w_spatial < 0:
            raise ConfigError("CRF weights must be non-negative")
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise ConfigError("CRF bandwidths must be positive")
        if self.iterations < 1:
            raise ConfigError("CRF needs at least one iteration")
        if self.normalization not in ("none", "row"):
            raise ConfigError(f"unknown CRF normalization {self.normalization!r}")


@dataclass
class SuperpixelSegmentation:
    labels: np.ndarray
    num_clusters: int = field(default=0)

    def __post_init__(self):
        if not self.num_clusters:
            self.num_clusters = int(self.labels.max()) + 1


# --- pixel-adaptive refinement ------------------------------------------------

def neighbour_offsets(radii) -> list[tuple[int, int]]:
    return [(dy * r, dx * r) for r in radii for dy in (-1, 0, 1) for dx in (-1, 0, 1)
            if (dy, dx) != (0, 0)]


def _shifted(x: np.ndarray, offsets, pad: int) -> np.ndarray:
    """Stack of ``x[..., i+dy, j+dx]`` with edge replication; x is (..., H, W)."""
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    xp = np.pad(x, widths, mode="edge")
    h, w = x.shape[-2:]
    return np.stack([xp[..., pad + dy:pad + dy + h, pad + dx:pad + dx + w] for dy, dx in offsets],
                    axis=-3)


def pamr_affinity(image: np.ndarray, params: PamrParams = PamrParams()) -> np.ndarray:
    """(K, H, W) row-stochastic weights over the K dilated neighbours of each pixel."""
    offsets = neighbour_offsets(params.radii)
    pad = max(params.radii)
    img = np.asarray(image, dtype=np.float64).transpose(2, 0, 1)  # (3, H, W)
    nb = _shifted(img, offsets, pad)  # (3, K, H, W)
    logits = -((nb - img[:, None]) ** 2).sum(axis=0) / params.temperature
    logits -= logits.max(axis=0, keepdims=True)
    aff = np.exp(logits)
    aff /= aff.sum(axis=0, keepdims=True)
    return aff


def pamr_propagate(maps: np.ndarray, affinity: np.ndarray, params: PamrParams = PamrParams()):
    """Apply ``params.iterations`` propagation steps to (..., H, W) maps with matching affinity."""
    offsets = neighbour_offsets(params.radii)
    pad = max(params.radii)
    out = np.asarray(maps, dtype=np.float64)
    for _ in range(params.iterations):
        # m_i + sum_j a_ij (m_j - m_i): equal to sum_j a_ij m_j for stochastic rows,
        # but leaves constant maps bit-exact
        nb = _shifted(out, offsets, pad)
        out = out + ((nb - np.expand_dims(out, -3)) * affinity).sum(axis=-3)
    return np.clip(out, 0.0, 1.0)


def pamr_refine(image: np.ndarray, score_map: np.ndarray, params: PamrParams = PamrParams()):
    check_same_hw(image, score_map)
    return pamr_propagate(score_map, pamr_affinity(image, params), params)


# --- SLIC ---------------------------------------------------------------------

def _grid_centres(h: int, w: int, step: float):
    ny = max(1, int(round(h / step)))
    nx = max(1, int(round(w / step)))
    ys = (np.arange(ny) + 0.5) * h / ny
    xs = (np.arange(nx) + 0.5) * w / nx
    return [(y, x) for y in ys for x in xs]


def _enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Keep each cluster's largest 4-connected component; absorb the rest.

    An orphan component joins the largest adjacent kept component; orphans
    touching only other orphans wait until a neighbour has been resolved.
    """
    h, w = labels.shape
    comp = np.full((h, w), -1, dtype=np.int64)
    comp_cluster, comp_size = [], []
    four = ndimage.generate_binary_structure(2, 1)
    for k in np.unique(labels):
        lab, n = ndimage.label(labels == k, structure=four)
        if n == 0:
            continue
        sizes = np.bincount(lab.ravel())[1:]
        base = len(comp_cluster)
        comp[lab > 0] = lab[lab > 0] - 1 + base
        comp_cluster.extend([int(k)] * n)
        comp_size.extend(int(s) for s in sizes)
    comp_cluster = np.array(comp_cluster)
    comp_size = np.array(comp_size)
    n_comp = len(comp_size)

    owner = np.full(n_comp, -1, dtype=np.int64)
    for k in np.unique(comp_cluster):
        idx = np.flatnonzero(comp_cluster == k)
        owner[idx[np.argmax(comp_size[idx])]] = idx[np.argmax(comp_size[idx])]

    pairs = np.concatenate([
        np.stack([comp[:, :-1].ravel(), comp[:, 1:].ravel()], axis=1),
        np.stack([comp[:-1, :].ravel(), comp[1:, :].ravel()], axis=1),
    ])
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    pairs = np.unique(np.concatenate([pairs, pairs[:, ::-1]]), axis=0)
    neighbours = [[] for _ in range(n_comp)]
    for a, b in pairs:
        neighbours[a].append(b)

    kept_size = {i: int(comp_size[i]) for i in range(n_comp) if owner[i] == i}
    pending = [i for i in range(n_comp) if owner[i] == -1]
    while pending:
        progress = []
        for i in pending:
            roots = {int(owner[j]) for j in neighbours[i] if owner[j] >= 0}
            if not roots:
                continue
            target = max(sorted(roots), key=lambda r: kept_size[r])
            owner[i] = target
            kept_size[target] += int(comp_size[i])
            progress.append(i)
        if not progress:  # pragma: no cover - a 4-connected image always progresses
            raise RuntimeError("connectivity enforcement stalled")
        pending = [i for i in pending if owner[i] == -1]

    merged = owner[comp]
    # relabel 0..n-1 in row-major order of first appearance
    roots, first = np.unique(merged.ravel(), return_index=True)
    lut = np.zeros(n_comp, dtype=np.int64)
    lut[roots[np.argsort(first)]] = np.arange(len(roots))
    return lut[merged]


def slic(image: np.ndarray, n_segments: int = 96, compactness: float = 10.0,
         iterations: int = 10) -> SuperpixelSegmentation:
    """Grid-seeded k-means in (255*rgb, m*x/S, m*y/S) with a 2S x 2S search window."""
    h, w = image.shape[:2]
    if n_segments < 1 or n_segments > h * w:
        raise ConfigError(f"n_segments must be in [1, {h * w}], got {n_segments}")
    if compactness <= 0:
        raise ConfigError("compactness must be positive")
    step = np.sqrt(h * w / n_segments)
    rgb = np.asarray(image, dtype=np.float64) * 255.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    centres = []
    for cy, cx in _grid_centres(h, w, step):
        iy, ix = min(int(cy), h - 1), min(int(cx), w - 1)
        centres.append(np.concatenate([rgb[iy, ix], [cy, cx]]))
    centres = np.array(centres)
    spatial_w = (compactness / step) ** 2
    win = int(np.ceil(step))

    labels = np.zeros((h, w), dtype=np.int64)
    for _ in range(max(1, iterations)):
        best = np.full((h, w), np.inf)
        for k, (r, g, b, cy, cx) in enumerate(centres):
            y0, y1 = max(0, int(np.floor(cy - win))), min(h, int(np.ceil(cy + win)) + 1)
            x0, x1 = max(0, int(np.floor(cx - win))), min(w, int(np.ceil(cx + win)) + 1)
            patch = rgb[y0:y1, x0:x1]
            d_col = ((patch - (r, g, b)) ** 2).sum(axis=-1)
            d_xy = (yy[y0:y1, x0:x1] - cy) ** 2 + (xx[y0:y1, x0:x1] - cx) ** 2
            d = d_col + spatial_w * d_xy
            region = best[y0:y1, x0:x1]
            better = d < region
            region[better] = d[better]
            labels[y0:y1, x0:x1][better] = k
        for k in range(len(centres)):
            sel = labels == k
            if sel.any():
                centres[k] = np.concatenate([rgb[sel].mean(axis=0), [yy[sel].mean(), xx[sel].mean()]])
    merged = _enforce_connectivity(labels)
    return SuperpixelSegmentation(labels=merged, num_clusters=int(merged.max()) + 1)


def superpixel_refine(score_map: np.ndarray, seg: SuperpixelSegmentation) -> np.ndarray:
    """Replace every pixel by the mean score of its superpixel."""
    if score_map.shape != seg.labels.shape:
        raise ShapeError(f"map {score_map.shape} vs segmentation {seg.labels.shape}")
    flat = seg.labels.ravel()
    sums = np.bincount(flat, weights=np.asarray(score_map, dtype=np.float64).ravel(),
                       minlength=seg.num_clusters)
    counts = np.bincount(flat, minlength=seg.num_clusters)
    return (sums / np.maximum(counts, 1))[seg.labels]


# --- dense CRF ----------------------------------------------------------------

_CACHE_LIMIT = 64 * 64
_BLOCK = 1024


def _bilateral_rows(feat, sq, rows: slice) -> np.ndarray:
    """exp(-|f_i - f_j|^2 / 2) for i in ``rows``, self-pairs zeroed."""
    d = sq[rows, None] + sq[None, :] - 2.0 * (feat[rows] @ feat.T)
    k = np.exp(-0.5 * np.maximum(d, 0.0))
    idx = np.arange(rows.start, rows.stop)
    k[idx - rows.start, idx] = 0.0
    return k


def _gauss_1d(n: int, theta: float) -> np.ndarray:
    d = np.arange(n)[:, None] - np.arange(n)[None, :]
    return np.exp(-(d * d) / (2.0 * theta * theta))


class _DenseKernels:
    """Message passing for the bilateral and spatial Gaussian kernels (self-pairs excluded).

    The spatial kernel is separable, so it is applied as ``Gy @ Q @ Gx`` minus
    the self term; the bilateral one is exact dense, block by block.  With row
    normalization the weighted sum of both kernels is divided by its row sum.
    """

    def __init__(self, image, h, w, params: CrfParams):
        self.h, self.w, self.params = h, w, params
        n = h * w
        self.blocks = [slice(s, min(s + _BLOCK, n)) for s in range(0, n, _BLOCK)]
        yy, xx = np.mgrid[0:h, 0:w]
        pos = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
        col = np.asarray(image, dtype=np.float64).reshape(n, 3)
        self.feat = np.concatenate([pos / params.theta_alpha, col / params.theta_beta], axis=1)
        self.sq = (self.feat ** 2).sum(axis=1)
        self.cached = ([_bilateral_rows(self.feat, self.sq, b) for b in self.blocks]
                       if n <= _CACHE_LIMIT else None)
        self.gy = _gauss_1d(h, params.theta_gamma)
        self.gx = _gauss_1d(w, params.theta_gamma)
        self.norm = None
        if params.normalization == "row":
            self.norm = np.maximum(self._raw(np.ones((n, 1))), 1e-300)

    def _bilateral(self, q):
        out = np.empty_like(q)
        for i, b in enumerate(self.blocks):
            k = self.cached[i] if self.cached is not None else _bilateral_rows(self.feat, self.sq, b)
            out[b] = k @ q
        return out

    def _spatial(self, q):
        grid = q.reshape(self.h, self.w, -1)
        out = np.einsum("ab,bwl->awl", self.gy, grid)
        return np.einsum("awl,wc->acl", out, self.gx).reshape(q.shape) - q

    def _raw(self, q):
        p = self.params
        out = np.zeros_like(q)
        if p.w_bilateral:
            out += p.w_bilateral * self._bilateral(q)
        if p.w_spatial:
            out += p.w_spatial * self._spatial(q)
        return out

    def message(self, q):
        out = self._raw(q)
        return out if self.norm is None else out / self.norm


def crf_refine(image: np.ndarray, score_map: np.ndarray, params: CrfParams = CrfParams(),
               trace: list | None = None) -> np.ndarray:
    """Foreground marginal of a fully connected two-label CRF with Potts compatibility.

    If ``trace`` is a list, the (N, 2) marginals after every iteration are appended.
    """
    check_same_hw(image, score_map)
    h, w = score_map.shape
    n = h * w
    if n > params.max_pixels:
        raise CapacityError(f"dense CRF on {h}x{w} exceeds the {params.max_pixels}-pixel budget; "
                            "downscale the image first")
    q = np.clip(np.asarray(score_map, dtype=np.float64), 1e-6, 1 - 1e-6).ravel()
    unary = -np.log(np.stack([1 - q, q], axis=1))
    marg = np.stack([1 - q, q], axis=1)
    if params.w_bilateral == 0 and params.w_spatial == 0:
        if trace is not None:
            trace.extend(marg.copy() for _ in range(params.iterations))
        return marg[:, 1].reshape(h, w)

    kernels = _DenseKernels(image, h, w, params)
    for _ in range(params.iterations):
        msg = kernels.message(marg)
        # Potts: label l pays for the mass other pixels put on the other label
        energy = unary + msg[:, ::-1]
        energy -= energy.min(axis=1, keepdims=True)
        marg = np.exp(-energy)
        marg /= marg.sum(axis=1, keepdims=True)
        if trace is not None:
            trace.append(marg.copy())
    return marg[:, 1].reshape(h, w)
