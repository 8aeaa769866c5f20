"""Class activation maps from the GAP classifier and multi-scale flip inference."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as nd
from .core import ConfigError, NumericError, normalize_map, resize_bilinear
from .nets import classifier_forward, to_nchw
from .ndgrad import Tensor

DEFAULT_SCALES = (3.0, 4.0, 5.0, 6.0)


@dataclass
class CamResult:
    map: np.ndarray
    per_class_maps: np.ndarray
    scores: np.ndarray


def _frozen(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        value = v.value if isinstance(v, Tensor) else np.asarray(v)
        if not np.all(np.isfinite(value)):
            raise NumericError(f"parameter {k} has non-finite entries")
        out[k] = Tensor(value)
    return out


def _sigmoid(s):
    return 0.5 * (1.0 + np.tanh(0.5 * s))


def compute_cam(params: dict, image: np.ndarray, signed_weights: bool = False) -> CamResult:
    """CAM of one (H, W, 3) image.

    Each class map is ``normalize(relu(head(F5)_i))`` at image resolution; the
    fused map is ``normalize(sum_i map_i * sigmoid(s_i))``. With
    ``signed_weights`` the raw logit ``s_i`` is used as the weight instead.
    """
    params = _frozen(params)
    h, w = image.shape[:2]
    x = Tensor(to_nchw(image))
    feats, scores = classifier_forward(params, x)
    act = nd.conv1x1(feats.f5, params["head.w"], params["head.b"]).value[0].astype(np.float64)
    s = scores.value.reshape(-1).astype(np.float64)
    per_class = np.stack([normalize_map(resize_bilinear(np.maximum(a, 0.0), h, w)) for a in act])
    weights = s if signed_weights else _sigmoid(s)
    fused = normalize_map(np.tensordot(weights, per_class, axes=1))
    return CamResult(map=fused, per_class_maps=per_class, scores=s)


def _scaled_size(n: int, scale: float) -> int:
    if scale <= 0:
        raise ConfigError(f"scales must be positive, got {scale}")
    size = int(np.floor(n * scale / 32.0 + 0.5)) * 32
    if size < 32:
        raise ConfigError(f"scale {scale} maps size {n} below 32 pixels")
    return size


def multi_inference_cam(params: dict, image: np.ndarray, scales=DEFAULT_SCALES,
                        flip: bool = True, signed_weights: bool = False,
                        return_members: bool = False):
    """Average of CAMs over ``scales`` x {identity, horizontal flip}, renormalized.

    Each member is resized back to the input size (and un-flipped) before the
    64-bit mean. With ``return_members`` the (members, unnormalized mean) pair
    is returned as well.
    """
    h, w = image.shape[:2]
    members = []
    acc = np.zeros((h, w), dtype=np.float64)
    for scale in scales:
        sh, sw = _scaled_size(h, scale), _scaled_size(w, scale)
        scaled = resize_bilinear(image, sh, sw)
        cam = resize_bilinear(compute_cam(params, scaled, signed_weights).map, h, w)
        members.append(cam)
        if flip:
            cam_f = resize_bilinear(compute_cam(params, scaled[:, ::-1].copy(), signed_weights).map,
                                    h, w)[:, ::-1]
            members.append(cam_f)
            # pairwise sum keeps flip-equivariance bit exact
            acc += cam + cam_f
        else:
            acc += cam
    mean = acc / len(members)
    out = normalize_map(mean)
    if return_members:
        return out, np.stack(members), mean
    return out
