"""Loss, L2 penalty, learning-rate schedule, Adam, the epoch loop, and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .chipper import read_png, to_unit_image
from .core import DomainError, RoadSegment, SpeedClassMap, build_class_map, segments_in
from .evaluate import decode, within_k_accuracy_values
from .model import (DENSE_WEIGHTS, MetadataStats, ModelConfig, backward, check_parameters,
                    forward, init_parameters, is_backbone_tensor, normalize_metadata,
                    param_shapes, predict_proba)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "freeflow-checkpoint/1"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 15
    lr0: float = 0.001
    decay_factor: float = 10.0
    decay_epochs: float = 5.0
    decay_staircase: bool = False
    l2_scale: float = 0.00005
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-7
    seed: int = 0
    freeze_backbone: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise DomainError("batch_size must be at least 1")
        if self.epochs < 1:
            raise DomainError("epochs must be at least 1")
        if not self.lr0 > 0:
            raise DomainError("lr0 must be positive")
        if self.l2_scale < 0:
            raise DomainError("l2_scale must be nonnegative")
        if not self.decay_factor > 0 or not self.decay_epochs > 0:
            raise DomainError("decay_factor and decay_epochs must be positive")


def cross_entropy(y_hat: np.ndarray, labels) -> float:
    """Mean negative log-probability of the true class, with log clamped at 1e-12."""
    y_hat = np.atleast_2d(y_hat)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    k = y_hat.shape[1]
    if labels.shape[0] != y_hat.shape[0]:
        raise DomainError("one label per row of y_hat is required")
    if np.any(labels < 0) or np.any(labels >= k):
        raise DomainError(f"labels must lie in [0, {k})")
    picked = y_hat[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, 1e-12))))


def l2_penalty(params: dict[str, np.ndarray], l2_scale: float) -> float:
    return float(l2_scale * sum(np.sum(np.square(params[n], dtype=np.float64))
                                for n in DENSE_WEIGHTS if n in params))


def l2_gradients(params: dict[str, np.ndarray], l2_scale: float) -> dict[str, np.ndarray]:
    return {n: (2.0 * l2_scale) * params[n] for n in DENSE_WEIGHTS if n in params}


def lr_schedule(epoch_progress: float, config: TrainConfig) -> float:
    """Exponential decay by ``decay_factor`` every ``decay_epochs`` epochs."""
    if epoch_progress < 0:
        raise DomainError("epoch_progress must be nonnegative")
    periods = epoch_progress / config.decay_epochs
    if config.decay_staircase:
        periods = math.floor(periods)
    return config.lr0 / config.decay_factor ** periods


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, config: TrainConfig, frozen=()) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update, applied in place.

    Tensors named in ``frozen`` or absent from ``grads`` are left untouched.
    """
    for name, g in grads.items():
        if name not in frozen and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in tensor {name!r}")
    state.t += 1
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        if name in frozen:
            continue
        p = params[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        step = (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
        p -= step
    return params, state


def objective(params, config: ModelConfig, images, meta, labels, l2_scale: float,
              skip_backbone: bool = False):
    """Cross-entropy plus L2 penalty on a batch, with gradients for every tensor."""
    _, y, cache = forward(params, config, images, meta, keep_cache=True)
    labels = np.asarray(labels, dtype=np.int64)
    loss = cross_entropy(y, labels) + l2_penalty(params, l2_scale)
    dz = y.copy()
    dz[np.arange(len(labels)), labels] -= 1.0
    dz /= len(labels)
    grads = backward(params, config, cache, dz, skip_backbone=skip_backbone)
    for name, g in l2_gradients(params, l2_scale).items():
        grads[name] = grads[name] + g
    return loss, grads


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    class_map: SpeedClassMap
    metadata_stats: MetadataStats
    epoch: int = 0
    seed: int = 0
    split_digest: str = ""
    extra: dict = field(default_factory=dict)

    def header(self) -> dict:
        names = list(param_shapes(self.model_config))
        return {
            "format": CHECKPOINT_FORMAT,
            "model_config": asdict(self.model_config),
            "fingerprint": self.model_config.fingerprint(),
            "class_map": list(self.class_map.speeds),
            "metadata_stats": {"min": list(self.metadata_stats.mins),
                               "max": list(self.metadata_stats.maxs)},
            "epoch": self.epoch,
            "seed": self.seed,
            "split_digest": self.split_digest,
            "extra": self.extra,
            "tensors": [{"name": n, "shape": list(self.params[n].shape)} for n in names],
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = self.header()
        with open(path, "wb") as fh:
            fh.write(json.dumps(header).encode("utf-8"))
            fh.write(b"\0")
            for t in header["tensors"]:
                fh.write(np.ascontiguousarray(self.params[t["name"]], dtype="<f4").tobytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        blob = Path(path).read_bytes()
        cut = blob.find(b"\0")
        if cut < 0:
            raise DomainError(f"{path}: missing header terminator")
        header = json.loads(blob[:cut].decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise DomainError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
        config = ModelConfig(**header["model_config"])
        if config.fingerprint() != header["fingerprint"]:
            raise DomainError(f"{path}: config fingerprint mismatch")
        params = {}
        offset = cut + 1
        seen = set()
        for t in header["tensors"]:
            name, shape = t["name"], tuple(t["shape"])
            if name in seen:
                raise DomainError(f"{path}: tensor {name} listed twice")
            seen.add(name)
            nbytes = 4 * math.prod(shape)
            if offset + nbytes > len(blob):
                raise DomainError(f"{path}: payload truncated at tensor {name}")
            params[name] = np.frombuffer(blob, dtype="<f4", count=math.prod(shape),
                                         offset=offset).reshape(shape).astype(np.float32)
            offset += nbytes
        if offset != len(blob):
            raise DomainError(f"{path}: {len(blob) - offset} trailing payload bytes")
        check_parameters(params, config)
        stats = header["metadata_stats"]
        return cls(config, params, SpeedClassMap(tuple(header["class_map"])),
                   MetadataStats(tuple(stats["min"]), tuple(stats["max"])),
                   header["epoch"], header["seed"], header["split_digest"], header.get("extra", {}))


def split_digest(segments: Sequence[RoadSegment]) -> str:
    """Hash of the (id, split) assignment, used to refuse cross-split comparisons."""
    h = hashlib.sha256()
    for seg in sorted(segments, key=lambda s: s.id):
        h.update(f"{seg.id}\t{seg.split}\n".encode())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------- data

def load_inputs(segments: Sequence[RoadSegment], base_dir: str | Path, config: ModelConfig):
    """Stack the image inputs of ``segments``: uint8 chips, or float feature vectors
    for an external backbone. Returns None for features_only."""
    if not config.uses_image:
        return None
    base_dir = Path(base_dir)
    if config.backbone == "external":
        return np.stack([np.load(base_dir / s.chip_path).astype(np.float32) for s in segments])
    n = config.input_px
    out = np.empty((len(segments), n, n, 3), dtype=np.uint8)
    for i, seg in enumerate(segments):
        if seg.chip_path is None:
            raise DomainError(f"segment {seg.id} has no chip")
        chip = read_png(base_dir / seg.chip_path)
        if chip.shape != (n, n, 3):
            raise DomainError(f"segment {seg.id}: chip is {chip.shape[:2]}, model expects {n}px")
        out[i] = chip
    return out


def batch_images(stack, idx, config: ModelConfig):
    if stack is None:
        return None
    if config.backbone == "external":
        return stack[idx]
    return to_unit_image(stack[idx])


def predict_stack(params, config: ModelConfig, stack, meta, batch_size: int = 64) -> np.ndarray:
    """Class distributions for a stack from ``load_inputs``, converted chunk by chunk."""
    out = []
    for start in range(0, len(meta), batch_size):
        idx = np.arange(start, min(start + batch_size, len(meta)))
        out.append(predict_proba(params, config, batch_images(stack, idx, config), meta[idx],
                                 batch_size=batch_size))
    return np.concatenate(out, axis=0)


def metadata_matrix(segments: Sequence[RoadSegment], stats: MetadataStats,
                    config: ModelConfig) -> np.ndarray:
    raw = np.array([s.metadata.as_tuple() for s in segments], dtype=np.float64)
    return normalize_metadata(raw, stats, config.metadata_scaling)


# ---------------------------------------------------------------- training

LOG_COLUMNS = ("epoch", "step", "lr", "train_loss", "val_within5")


def train(segments: Sequence[RoadSegment], model_config: ModelConfig, train_config: TrainConfig,
          base_dir: str | Path, log_path: str | Path | None = None,
          progress: Callable[[str], None] | None = None) -> Checkpoint:
    """Fit a model on the train split and return the best-on-validation checkpoint.

    Class map and metadata statistics come from the training split only.
    Validation within-5 accuracy is measured after every epoch; ties keep the
    earlier epoch.
    """
    train_segs = segments_in(segments, "train")
    val_segs = segments_in(segments, "val")
    if not train_segs:
        raise DomainError("manifest has no 'train' split")
    if not val_segs:
        raise DomainError("manifest has no 'val' split")
    class_map = build_class_map(s.freeflow_mph for s in train_segs)
    if class_map.K != model_config.K:
        raise DomainError(f"class map has K={class_map.K} but the model config says K={model_config.K}")
    stats = MetadataStats.from_segments(train_segs)
    freeze = train_config.freeze_backbone or model_config.freeze_backbone

    train_x = load_inputs(train_segs, base_dir, model_config)
    val_x = load_inputs(val_segs, base_dir, model_config)
    train_m = metadata_matrix(train_segs, stats, model_config)
    val_m = metadata_matrix(val_segs, stats, model_config)
    labels = np.array([class_map.speed_to_class(s.freeflow_mph) for s in train_segs])
    val_true = np.array([s.freeflow_mph for s in val_segs])

    rng = np.random.default_rng(train_config.seed)
    params = init_parameters(model_config, train_config.seed)
    state = AdamState.zeros_like(params)
    frozen = {n for n in params if is_backbone_tensor(n)} if freeze else set()
    n_train = len(train_segs)
    bs = train_config.batch_size
    steps_per_epoch = math.ceil(n_train / bs)

    best = None
    best_score = -1.0
    log_fh = None
    writer = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(log_path, "w", encoding="utf-8", newline="")
        writer = csv.writer(log_fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
    try:
        step = 0
        for epoch in range(train_config.epochs):
            order = rng.permutation(n_train)
            losses = []
            for s in range(steps_per_epoch):
                idx = order[s * bs:(s + 1) * bs]
                lr = lr_schedule(epoch + s / steps_per_epoch, train_config)
                loss, grads = objective(params, model_config, batch_images(train_x, idx, model_config),
                                        train_m[idx], labels[idx], train_config.l2_scale,
                                        skip_backbone=freeze)
                adam_step(params, grads, state, lr, train_config, frozen)
                losses.append(loss)
                step += 1
                last = s == steps_per_epoch - 1
                if last:
                    y = predict_stack(params, model_config, val_x, val_m)
                    pred = decode(y, class_map)
                    score = within_k_accuracy_values(pred, val_true, 5)
                if writer is not None:
                    writer.writerow([epoch + 1, step, f"{lr:.8g}", f"{loss:.6f}",
                                     f"{score:.6f}" if last else ""])
            if score > best_score:
                best_score = score
                best = (epoch + 1, {k: v.copy() for k, v in params.items()})
            msg = (f"epoch {epoch + 1}/{train_config.epochs} loss {np.mean(losses):.4f} "
                   f"val_within5 {score:.4f}")
            log.info(msg)
            if progress is not None:
                progress(msg)
    finally:
        if log_fh is not None:
            log_fh.close()

    best_epoch, best_params = best
    return Checkpoint(model_config, best_params, class_map, stats, epoch=best_epoch,
                      seed=train_config.seed, split_digest=split_digest(segments),
                      extra={"val_within5": best_score, "train_config": asdict(train_config)})
