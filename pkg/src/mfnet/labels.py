"""Pseudo-label synthesis from CAMs, label fusion, and the decoder guidance map."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import PseudoLabel, Provenance, ShapeError, check_same_hw
from .refine import (CrfParams, PamrParams, SlicParams, crf_refine, pamr_propagate,
                     pamr_refine, slic, superpixel_refine)


@dataclass(frozen=True)
class RefineConfig:
    pamr: PamrParams = field(default_factory=PamrParams)
    slic: SlicParams = field(default_factory=SlicParams)
    crf: CrfParams = field(default_factory=CrfParams)
    threshold: float = 0.5
    use_crf: bool = True


@dataclass(frozen=True)
class LabelPair:
    y1: PseudoLabel
    y2: PseudoLabel

    def __post_init__(self):
        if self.y1.mask.shape != self.y2.mask.shape:
            raise ShapeError("label pair dims differ")
        if self.y1.provenance is not Provenance.PIXEL or self.y2.provenance is not Provenance.SUPERPIXEL:
            raise ValueError("label pair must be (pixel, superpixel)")


def binarize(score_map: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return (np.asarray(score_map) > threshold).astype(np.uint8)


def pixel_branch(image, cam_map, cfg: RefineConfig = RefineConfig()) -> np.ndarray:
    refined = pamr_refine(image, cam_map, cfg.pamr)
    return crf_refine(image, refined, cfg.crf) if cfg.use_crf else refined


def superpixel_branch(image, cam_map, cfg: RefineConfig = RefineConfig()) -> np.ndarray:
    seg = slic(image, cfg.slic.n_segments, cfg.slic.compactness, cfg.slic.iterations)
    refined = superpixel_refine(cam_map, seg)
    return crf_refine(image, refined, cfg.crf) if cfg.use_crf else refined


def synthesize_labels(image, cam_map, cfg: RefineConfig = RefineConfig()) -> LabelPair:
    """Y1 from PAMR (+CRF), Y2 from SLIC superpixel means (+CRF), both binarized."""
    check_same_hw(image, cam_map)
    y1 = binarize(pixel_branch(image, cam_map, cfg), cfg.threshold)
    y2 = binarize(superpixel_branch(image, cam_map, cfg), cfg.threshold)
    return LabelPair(PseudoLabel(y1, Provenance.PIXEL), PseudoLabel(y2, Provenance.SUPERPIXEL))


def fuse(a: np.ndarray, b: np.ndarray, mode: str) -> np.ndarray:
    """``avg`` -> float map in {0, .5, 1}; ``intersect``/``union`` -> binary mask."""
    if a.shape != b.shape:
        raise ShapeError(f"cannot fuse masks of shape {a.shape} and {b.shape}")
    if mode == "avg":
        return (a.astype(np.float64) + b.astype(np.float64)) / 2.0
    if mode == "intersect":
        return (a.astype(bool) & b.astype(bool)).astype(np.uint8)
    if mode == "union":
        return (a.astype(bool) | b.astype(bool)).astype(np.uint8)
    raise ValueError(f"unknown fusion mode {mode!r}")


FUSION_PROVENANCE = {"avg": Provenance.FUSED_AVG, "intersect": Provenance.FUSED_INTERSECT,
                     "union": Provenance.FUSED_UNION}


def make_ys(p1, p2, image=None, pamr_cfg: PamrParams = PamrParams(), affinity=None) -> np.ndarray:
    """PAMR-refined average of the two filter maps, as a plain (gradient-free) array.

    Works on single (H, W) maps or batches (N, H, W); pass precomputed
    ``affinity`` (from :func:`~mfnet.refine.pamr_affinity`) to skip the image.
    """
    p1 = np.asarray(getattr(p1, "value", p1), dtype=np.float64)
    p2 = np.asarray(getattr(p2, "value", p2), dtype=np.float64)
    if p1.shape != p2.shape:
        raise ShapeError(f"filter maps differ in shape: {p1.shape} vs {p2.shape}")
    avg = (p1 + p2) / 2.0
    if affinity is None:
        check_same_hw(image, avg if avg.ndim == 2 else avg[0])
        return pamr_refine(image, avg, pamr_cfg)
    return pamr_propagate(avg, affinity, pamr_cfg)
