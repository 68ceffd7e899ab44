"""Fusion network: desk CNN backbone, image dense layer, metadata concat, K-way head.

Parameters are plain numpy arrays keyed by name. Forward and backward passes
are written out explicitly; torch is used only as a kernel library for the
3x3 convolutions and 2x2 max-pooling inside the backbone.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import DomainError, RoadMetadata, RoadSegment

VARIANTS = ("combined", "imagery_only", "features_only")
BACKBONE_CHANNELS = (16, 32, 64)
N_META = 3
# weight matrices that carry the L2 penalty; biases and the backbone never do
DENSE_WEIGHTS = ("img_w", "meta_w", "out_w")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "combined"
    backbone_dim: int = 64
    hidden_dim: int = 512
    K: int = 79
    input_px: int = 224
    freeze_backbone: bool = False
    metadata_scaling: str = "minmax"
    features_hidden_dim: int = 512
    backbone: str = "desk"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DomainError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("backbone_dim", "hidden_dim", "K", "input_px", "features_hidden_dim"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be at least 1")
        if self.metadata_scaling not in ("minmax", "raw"):
            raise DomainError("metadata_scaling must be 'minmax' or 'raw'")
        if self.backbone not in ("desk", "external"):
            raise DomainError("backbone must be 'desk' or 'external'")
        if self.backbone == "desk" and self.backbone_dim != BACKBONE_CHANNELS[-1]:
            raise DomainError(f"the desk backbone produces {BACKBONE_CHANNELS[-1]} features, "
                              f"got backbone_dim={self.backbone_dim}")

    @property
    def uses_image(self) -> bool:
        return self.variant != "features_only"

    @property
    def uses_metadata(self) -> bool:
        return self.variant != "imagery_only"

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class MetadataStats:
    """Training-split minimum and maximum of each metadata feature."""

    mins: tuple[float, float, float]
    maxs: tuple[float, float, float]

    def __post_init__(self):
        if any(lo > hi for lo, hi in zip(self.mins, self.maxs)):
            raise DomainError("metadata stats need min <= max per feature")

    @classmethod
    def from_metadata(cls, metas: Iterable[RoadMetadata]) -> "MetadataStats":
        arr = np.array([m.as_tuple() for m in metas], dtype=np.float64)
        if arr.size == 0:
            raise DomainError("cannot compute metadata stats from no segments")
        return cls(tuple(arr.min(0).tolist()), tuple(arr.max(0).tolist()))

    @classmethod
    def from_segments(cls, segments: Iterable[RoadSegment]) -> "MetadataStats":
        return cls.from_metadata(s.metadata for s in segments)


def normalize_metadata(m_raw, stats: MetadataStats, scaling: str = "minmax",
                       dtype=np.float32) -> np.ndarray:
    """Min-max scale metadata triples to [0, 1].

    Accepts one RoadMetadata, a sequence of them, or an (N, 3) array. A
    feature whose training range is a single value maps to 0.
    """
    if isinstance(m_raw, RoadMetadata):
        return normalize_metadata(np.array([m_raw.as_tuple()]), stats, scaling, dtype)[0]
    if isinstance(m_raw, Sequence) and m_raw and isinstance(m_raw[0], RoadMetadata):
        m_raw = np.array([m.as_tuple() for m in m_raw])
    arr = np.asarray(m_raw, dtype=np.float64)
    if scaling == "raw":
        return arr.astype(dtype)
    lo = np.array(stats.mins)
    span = np.array(stats.maxs) - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, np.clip((arr - lo) / safe, 0.0, 1.0), 0.0)
    return out.astype(dtype)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Tensor names and shapes for a variant, in canonical order."""
    shapes: dict[str, tuple[int, ...]] = {}
    if config.uses_image:
        if config.backbone == "desk":
            c_in = 3
            for i, c_out in enumerate(BACKBONE_CHANNELS, 1):
                shapes[f"conv{i}_w"] = (c_out, c_in, 3, 3)
                shapes[f"conv{i}_b"] = (c_out,)
                c_in = c_out
        shapes["img_w"] = (config.hidden_dim, config.backbone_dim)
        shapes["img_b"] = (config.hidden_dim,)
    if config.variant == "combined":
        shapes["out_w"] = (config.K, config.hidden_dim + N_META)
    elif config.variant == "imagery_only":
        shapes["out_w"] = (config.K, config.hidden_dim)
    else:
        shapes["meta_w"] = (config.features_hidden_dim, N_META)
        shapes["meta_b"] = (config.features_hidden_dim,)
        shapes["out_w"] = (config.K, config.features_hidden_dim)
    shapes["out_b"] = (config.K,)
    return shapes


def is_backbone_tensor(name: str) -> bool:
    return name.startswith("conv")


def glorot_bound(shape: tuple[int, ...]) -> float:
    if len(shape) == 4:
        receptive = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    else:
        fan_out, fan_in = shape
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_parameters(config: ModelConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Glorot-uniform weights and zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            bound = glorot_bound(shape)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def check_parameters(params: dict[str, np.ndarray], config: ModelConfig) -> None:
    expected = param_shapes(config)
    if set(params) != set(expected):
        raise DomainError(f"parameter names {sorted(params)} do not match variant "
                          f"{config.variant!r} ({sorted(expected)})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise DomainError(f"{name}: shape {params[name].shape}, expected {shape}")
        if not np.all(np.isfinite(params[name])):
            raise DomainError(f"{name}: non-finite values")


def _nchw(images: np.ndarray) -> torch.Tensor:
    # NHWC numpy memory viewed as a channels-last NCHW tensor, no copy
    return torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2)


def _weight(w: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(w).contiguous(memory_format=torch.channels_last)


def backbone_forward(images: np.ndarray, params: dict[str, np.ndarray],
                     keep_cache: bool = False):
    """Desk backbone: three conv3x3/ReLU/maxpool2 blocks, then global average pool.

    ``images`` is (N, H, W, 3) or a single (H, W, 3) image with values in
    [0, 1]. Returns (N, 64) features (or a 64-vector for a single image), and
    the cache for backpropagation when ``keep_cache`` is set.
    """
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.ndim != 4 or images.shape[-1] != 3:
        raise DomainError(f"expected (N, H, W, 3) images, got {images.shape}")
    if not np.issubdtype(images.dtype, np.floating):
        raise DomainError(f"images must be reals in [0, 1], got dtype {images.dtype}")
    dtype = params["conv1_w"].dtype
    x = _nchw(images.astype(dtype, copy=False))
    cache = []
    with torch.no_grad():
        for i in range(1, len(BACKBONE_CHANNELS) + 1):
            w = _weight(params[f"conv{i}_w"])
            b = torch.from_numpy(params[f"conv{i}_b"])
            act = torch.relu(F.conv2d(x, w, b, padding=1))
            pooled, idx = F.max_pool2d(act, 2, return_indices=True)
            if keep_cache:
                cache.append((x, w, act, pooled, idx))
            x = pooled
        spatial = x.shape[2] * x.shape[3]
        v = x.sum(dim=(2, 3)).numpy() / spatial
    if single:
        v = v[0]
    return (v, (cache, spatial)) if keep_cache else v


def backbone_backward(dv: np.ndarray, cache, need_input_grad: bool = False) -> dict[str, np.ndarray]:
    blocks, spatial = cache
    grads = {}
    with torch.no_grad():
        last = blocks[-1][3]
        g = torch.from_numpy(np.ascontiguousarray(dv / spatial))[:, :, None, None].expand_as(last)
        for i in range(len(blocks), 0, -1):
            x, w, act, pooled, idx = blocks[i - 1]
            # relu'(0) = 0: a pooled zero means the whole window was clipped
            g = g * (pooled > 0)
            g = torch.ops.aten.max_pool2d_with_indices_backward(
                g.contiguous(memory_format=torch.channels_last), act, [2, 2], [2, 2],
                [0, 0], [1, 1], False, idx)
            gx, gw, gb = torch.ops.aten.convolution_backward(
                g, x, w, [w.shape[0]], [1, 1], [1, 1], [1, 1], False, [0, 0], 1,
                [i > 1 or need_input_grad, True, True])
            grads[f"conv{i}_w"] = gw.contiguous().numpy()
            grads[f"conv{i}_b"] = gb.numpy()
            g = gx
    return grads


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def head_forward(v, m, params: dict[str, np.ndarray], variant: str, keep_cache: bool = False):
    """Dense fusion head. Returns logits z and the softmax distribution.

    ``v`` is the image feature batch (ignored by features_only) and ``m`` the
    scaled metadata batch (ignored by imagery_only). Single vectors are
    accepted and give single outputs.
    """
    single = False
    if v is not None:
        v = np.asarray(v)
        single = v.ndim == 1
        v = np.atleast_2d(v)
    if m is not None:
        m = np.asarray(m)
        single = single or m.ndim == 1
        m = np.atleast_2d(m)
    if variant == "features_only":
        pre = m @ params["meta_w"].T + params["meta_b"]
        hidden = np.maximum(pre, 0)
        z = hidden @ params["out_w"].T + params["out_b"]
        fused = hidden
    else:
        pre = v @ params["img_w"].T + params["img_b"]
        hidden = np.maximum(pre, 0)
        fused = np.concatenate([hidden, m.astype(hidden.dtype)], axis=1) if variant == "combined" else hidden
        z = fused @ params["out_w"].T + params["out_b"]
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("non-finite logits in head_forward")
    y = softmax(z)
    if single:
        z, y = z[0], y[0]
    if keep_cache:
        return z, y, (v, m, pre, fused)
    return z, y


def head_backward(dz: np.ndarray, cache, params: dict[str, np.ndarray], variant: str):
    """Gradients of the head tensors and of the image features ``v``."""
    v, m, pre, fused = cache
    grads = {"out_w": dz.T @ fused, "out_b": dz.sum(0)}
    dfused = dz @ params["out_w"]
    hidden_dim = pre.shape[1]
    dpre = dfused[:, :hidden_dim] * (pre > 0)
    if variant == "features_only":
        grads["meta_w"] = dpre.T @ m
        grads["meta_b"] = dpre.sum(0)
        return grads, None
    grads["img_w"] = dpre.T @ v
    grads["img_b"] = dpre.sum(0)
    return grads, dpre @ params["img_w"]


def forward(params: dict[str, np.ndarray], config: ModelConfig, images, meta,
            keep_cache: bool = False):
    """Full network on a batch. ``images`` are unit-scaled (or feature vectors
    for an external backbone); ``meta`` is already normalized."""
    bb_cache = None
    v = None
    if config.uses_image:
        if config.backbone == "desk":
            if images.shape[1:3] != (config.input_px, config.input_px):
                raise DomainError(f"expected {config.input_px}px images, got {images.shape[1:3]}")
            out = backbone_forward(images, params, keep_cache=keep_cache)
            v, bb_cache = out if keep_cache else (out, None)
        else:
            v = np.asarray(images, dtype=params["img_w"].dtype)
            if v.shape[1:] != (config.backbone_dim,):
                raise DomainError(f"expected {config.backbone_dim}-dim features, got {v.shape}")
    m = np.asarray(meta, dtype=params["out_w"].dtype) if config.uses_metadata else None
    res = head_forward(v, m, params, config.variant, keep_cache=keep_cache)
    if not keep_cache:
        return res
    z, y, head_cache = res
    return z, y, (head_cache, bb_cache)


def backward(params: dict[str, np.ndarray], config: ModelConfig, cache, dz: np.ndarray,
             skip_backbone: bool = False) -> dict[str, np.ndarray]:
    head_cache, bb_cache = cache
    grads, dv = head_backward(dz, head_cache, params, config.variant)
    if bb_cache is not None and not skip_backbone:
        grads.update(backbone_backward(dv, bb_cache))
    return grads


def predict_proba(params, config: ModelConfig, images, meta, batch_size: int = 64) -> np.ndarray:
    """Class distributions for a batch, evaluated in chunks of ``batch_size``."""
    n = len(meta) if meta is not None else len(images)
    out = []
    for start in range(0, n, batch_size):
        sl = slice(start, start + batch_size)
        imgs = images[sl] if images is not None else None
        _, y = forward(params, config, imgs, meta[sl] if meta is not None else None)
        out.append(y)
    return np.concatenate(out, axis=0)
