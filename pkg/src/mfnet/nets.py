"""Toy classifier with a GAP head and the multi-filter directive network.

Parameters live in flat ``{name: Tensor}`` dicts; names are prefixed by the
sub-network they belong to (``encoder.``, ``head.``, ``f1.``, ``f2.``,
``decoder.``, ``decoder2.``).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import ndgrad as nd
from .core import ShapeError
from .ndgrad import Tensor

ARCHITECTURES = ("single_decoder", "single_df", "dual_decoder", "mdf")


class FeatureStack(NamedTuple):
    f3: Tensor
    f4: Tensor
    f5: Tensor


@dataclass(frozen=True)
class NetConfig:
    widths: tuple = (8, 16, 32, 64, 64)
    filter_width: int = 32
    filter_depth: int = 4
    decoder_width: int = 32
    # encoder level the directive filters read: "f5" (stride 32) or "f4"/"f3"
    filter_level: str = "f5"

    def __post_init__(self):
        if self.filter_level not in FeatureStack._fields:
            raise ValueError(f"unknown filter level {self.filter_level!r}")


class MFNetOutput(NamedTuple):
    p1: Tensor | None
    p2: Tensor | None
    ps: Tensor
    ps2: Tensor | None = None


def to_nchw(images) -> np.ndarray:
    """(H, W, 3) or (N, H, W, 3) float images -> float32 (N, 3, H, W)."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))


def _check_input(x: Tensor) -> None:
    h, w = x.shape[2:]
    if h % 32 or w % 32:
        raise ShapeError(f"input spatial dims must be divisible by 32, got {h}x{w}")


def _add_conv(params, rng, name, c_out, c_in, k):
    params[f"{name}.w"] = nd.xavier_init((c_out, c_in, k, k), rng=rng)
    params[f"{name}.b"] = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)


def _add_encoder(params, rng, cfg: NetConfig):
    c_in = 3
    for i, c in enumerate(cfg.widths, start=1):
        _add_conv(params, rng, f"encoder.block{i}", c, c_in, 3)
        c_in = c


def _add_filter(params, rng, prefix, cfg: NetConfig):
    c_in = cfg.widths[FeatureStack._fields.index(cfg.filter_level) + 2]
    for i in range(1, cfg.filter_depth):
        _add_conv(params, rng, f"{prefix}.conv{i}", cfg.filter_width, c_in, 3)
        c_in = cfg.filter_width
    _add_conv(params, rng, f"{prefix}.out", 1, c_in, 1)


def _add_decoder(params, rng, prefix, cfg: NetConfig):
    w3, w4, w5 = cfg.widths[2:5]
    d = cfg.decoder_width
    _add_conv(params, rng, f"{prefix}.fuse4", d, w5 + w4, 3)
    _add_conv(params, rng, f"{prefix}.fuse3", d, d + w3, 3)
    _add_conv(params, rng, f"{prefix}.out", 1, d, 1)


def init_classifier(num_categories: int, seed: int, cfg: NetConfig = NetConfig()) -> dict:
    rng = np.random.default_rng(seed)
    params: dict = {}
    _add_encoder(params, rng, cfg)
    _add_conv(params, rng, "head", num_categories, cfg.widths[-1], 1)
    return params


def init_mfnet(seed: int, architecture: str = "mdf", cfg: NetConfig = NetConfig()) -> dict:
    if architecture not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {architecture!r}")
    rng = np.random.default_rng(seed)
    params: dict = {}
    _add_encoder(params, rng, cfg)
    _add_decoder(params, rng, "decoder", cfg)
    if architecture in ("single_df", "mdf"):
        _add_filter(params, rng, "f1", cfg)
    if architecture == "mdf":
        _add_filter(params, rng, "f2", cfg)
    if architecture == "dual_decoder":
        _add_decoder(params, rng, "decoder2", cfg)
    return params


def encoder_forward(params: dict, x: Tensor) -> FeatureStack:
    feats = []
    h = x
    i = 1
    while f"encoder.block{i}.w" in params:
        h = nd.relu(nd.conv3x3(h, params[f"encoder.block{i}.w"], params[f"encoder.block{i}.b"], stride=2))
        feats.append(h)
        i += 1
    return FeatureStack(feats[2], feats[3], feats[4])


def classifier_forward(params: dict, x) -> tuple[FeatureStack, Tensor]:
    """Class scores ``S = conv1x1(GAP(F5))`` as raw logits of shape (N, C, 1, 1)."""
    x = nd.as_tensor(x)
    _check_input(x)
    feats = encoder_forward(params, x)
    scores = nd.conv1x1(nd.gap(feats.f5), params["head.w"], params["head.b"])
    return feats, scores


def filter_logits(params: dict, prefix: str, f5: Tensor) -> Tensor:
    h = f5
    i = 1
    while f"{prefix}.conv{i}.w" in params:
        h = nd.relu(nd.conv3x3(h, params[f"{prefix}.conv{i}.w"], params[f"{prefix}.conv{i}.b"]))
        i += 1
    return nd.conv1x1(h, params[f"{prefix}.out.w"], params[f"{prefix}.out.b"])


def decoder_logits(params: dict, prefix: str, feats: FeatureStack) -> Tensor:
    u5 = nd.upsample(feats.f5, feats.f4.shape[2:])
    d4 = nd.relu(nd.conv3x3(nd.concat(u5, feats.f4),
                            params[f"{prefix}.fuse4.w"], params[f"{prefix}.fuse4.b"]))
    u4 = nd.upsample(d4, feats.f3.shape[2:])
    d3 = nd.relu(nd.conv3x3(nd.concat(u4, feats.f3),
                            params[f"{prefix}.fuse3.w"], params[f"{prefix}.fuse3.b"]))
    return nd.conv1x1(d3, params[f"{prefix}.out.w"], params[f"{prefix}.out.b"])


def _head(logits: Tensor, size) -> Tensor:
    return nd.sigmoid(nd.upsample(logits, size))


def mfnet_forward(params: dict, x, cfg: NetConfig = NetConfig()) -> MFNetOutput:
    """All heads present in ``params``; maps are (N, 1, H, W) in (0, 1)."""
    x = nd.as_tensor(x)
    _check_input(x)
    size = x.shape[2:]
    feats = encoder_forward(params, x)
    src = getattr(feats, cfg.filter_level)
    p1 = _head(filter_logits(params, "f1", src), size) if "f1.out.w" in params else None
    p2 = _head(filter_logits(params, "f2", src), size) if "f2.out.w" in params else None
    ps = _head(decoder_logits(params, "decoder", feats), size)
    ps2 = _head(decoder_logits(params, "decoder2", feats), size) if "decoder2.out.w" in params else None
    return MFNetOutput(p1, p2, ps, ps2)


def infer_saliency(params: dict, x) -> np.ndarray:
    """Test-time path: encoder and decoder(s) only, filters never touched.

    Returns (N, H, W) saliency; a dual-decoder model averages its two decoders.
    """
    x = Tensor(x.value if isinstance(x, Tensor) else np.asarray(x))
    _check_input(x)
    size = x.shape[2:]
    inference = {k: Tensor(v.value) for k, v in params.items()
                 if k.startswith(("encoder.", "decoder"))}
    feats = encoder_forward(inference, x)
    ps = _head(decoder_logits(inference, "decoder", feats), size).value[:, 0]
    if "decoder2.out.w" in inference:
        ps2 = _head(decoder_logits(inference, "decoder2", feats), size).value[:, 0]
        ps = (ps + ps2) * ps.dtype.type(0.5)
    return ps
