"""Prediction decoding, within-k accuracy, variant comparison and discrepancy reports."""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

import numpy as np

from .chipper import read_png, to_unit_image
from .core import DomainError, RoadSegment, SpeedClassMap, round_speed, segments_in
from .model import normalize_metadata, predict_proba

if TYPE_CHECKING:
    from .train import Checkpoint

log = logging.getLogger(__name__)

HISTOGRAM_FIELDS = ("freeflow_mph", "posted_limit_mph", "functional_class", "area_type")


@dataclass(frozen=True)
class PredictionRecord:
    id: str
    predicted_mph: int
    true_mph: int
    posted_limit_mph: int
    variant: str = ""


@dataclass(frozen=True)
class DiscrepancyRecord:
    id: str
    predicted_mph: int
    posted_limit_mph: int
    delta: int


def decode(y_hat: np.ndarray, class_map: SpeedClassMap, decoder: str = "argmax") -> np.ndarray:
    """Turn class distributions into integer mph.

    ``argmax`` picks the most probable class, breaking ties toward the lowest
    speed; ``expected`` rounds the probability-weighted mean speed.
    """
    y_hat = np.atleast_2d(y_hat)
    speeds = np.asarray(class_map.speeds)
    if decoder == "argmax":
        # np.argmax returns the first maximum and speeds are increasing
        return speeds[np.argmax(y_hat, axis=1)]
    if decoder == "expected":
        return np.array([round_speed(float(v)) for v in y_hat @ speeds])
    raise DomainError(f"unknown decoder {decoder!r}")


def within_k_accuracy_values(predicted, true, k: int = 5) -> float:
    predicted = np.asarray(predicted)
    true = np.asarray(true)
    if predicted.size == 0:
        raise DomainError("within-k accuracy of no records is undefined")
    return float(np.mean(np.abs(predicted - true) <= k))


def within_k_accuracy(records: Sequence[PredictionRecord], k: int = 5) -> float:
    """Fraction of records whose prediction is within ``k`` mph of the truth."""
    if not records:
        raise DomainError("within-k accuracy of no records is undefined")
    return within_k_accuracy_values([r.predicted_mph for r in records],
                                    [r.true_mph for r in records], k)


def discrepancy_report(records: Iterable[PredictionRecord], threshold: int = 10) -> list[DiscrepancyRecord]:
    """Segments whose predicted speed differs from the posted limit by more than
    ``threshold`` mph, largest gap first (stable among equal gaps)."""
    flagged = []
    for r in records:
        delta = int(r.predicted_mph) - int(r.posted_limit_mph)
        if abs(delta) > threshold:
            flagged.append(DiscrepancyRecord(r.id, int(r.predicted_mph), int(r.posted_limit_mph), delta))
    return sorted(flagged, key=lambda d: -abs(d.delta))


def predict(checkpoint: "Checkpoint", chip, metadata, decoder: str = "argmax") -> int:
    """Free-flow speed for one segment from its uint8 chip and RoadMetadata."""
    cfg = checkpoint.model_config
    image = to_unit_image(chip)[None] if cfg.uses_image and cfg.backbone == "desk" else (
        np.asarray(chip, dtype=np.float32)[None] if cfg.uses_image else None)
    meta = normalize_metadata([metadata], checkpoint.metadata_stats, cfg.metadata_scaling)
    y = predict_proba(checkpoint.params, cfg, image, meta)
    return int(decode(y, checkpoint.class_map, decoder)[0])


def _load_input(seg: RoadSegment, base_dir: Path, checkpoint: "Checkpoint"):
    cfg = checkpoint.model_config
    if not cfg.uses_image:
        return None
    if seg.chip_path is None:
        raise DomainError("no chip")
    path = base_dir / seg.chip_path
    if cfg.backbone == "external":
        return np.load(path).astype(np.float32)
    chip = read_png(path)
    if chip.shape != (cfg.input_px, cfg.input_px, 3):
        raise DomainError(f"chip is {chip.shape[:2]}, model expects {cfg.input_px}px")
    return chip


def predict_segments(checkpoint: "Checkpoint", segments: Sequence[RoadSegment], base_dir,
                     decoder: str = "argmax", variant: str | None = None,
                     batch_size: int = 64) -> tuple[list[PredictionRecord], dict[str, str]]:
    """Predict every segment; unreadable chips are reported per segment and skipped."""
    base_dir = Path(base_dir)
    cfg = checkpoint.model_config
    variant = variant or cfg.variant
    records: list[PredictionRecord] = []
    errors: dict[str, str] = {}
    for start in range(0, len(segments), batch_size):
        chunk = segments[start:start + batch_size]
        ok, inputs = [], []
        for seg in chunk:
            try:
                inputs.append(_load_input(seg, base_dir, checkpoint))
                ok.append(seg)
            except (OSError, ValueError) as exc:
                errors[seg.id] = str(exc)
                log.warning("segment %s skipped: %s", seg.id, exc)
        if not ok:
            continue
        images = None
        if cfg.uses_image:
            images = np.stack(inputs)
            if cfg.backbone == "desk":
                images = to_unit_image(images)
        meta = normalize_metadata(np.array([s.metadata.as_tuple() for s in ok], dtype=np.float64),
                                  checkpoint.metadata_stats, cfg.metadata_scaling)
        y = predict_proba(checkpoint.params, cfg, images, meta, batch_size=batch_size)
        for seg, mph in zip(ok, decode(y, checkpoint.class_map, decoder)):
            records.append(PredictionRecord(seg.id, int(mph), seg.freeflow_mph,
                                            seg.metadata.posted_limit_mph, variant))
    return records, errors


def compare_variants(segments: Sequence[RoadSegment], checkpoints, base_dir, split: str = "test",
                     k: int = 5, decoder: str = "argmax") -> list[dict]:
    """Within-k accuracy of each labelled checkpoint on one split.

    ``checkpoints`` is a mapping or a sequence of (label, Checkpoint) pairs.
    All checkpoints must share one class map and have been trained on the
    split assignment recorded in ``segments``.
    """
    from .train import split_digest

    pairs = list(checkpoints.items()) if isinstance(checkpoints, Mapping) else list(checkpoints)
    if not pairs:
        raise DomainError("no checkpoints to compare")
    digest = split_digest(segments)
    maps = {ck.class_map.speeds for _, ck in pairs}
    if len(maps) != 1:
        raise DomainError("checkpoints disagree on the class map")
    for label, ck in pairs:
        if ck.split_digest and ck.split_digest != digest:
            raise DomainError(f"checkpoint {label!r} was trained on a different split")
    subset = segments_in(segments, split)
    if not subset:
        raise DomainError(f"manifest has no {split!r} split")
    rows = []
    for label, ck in pairs:
        records, errors = predict_segments(ck, subset, base_dir, decoder, variant=label)
        rows.append({"variant": label, f"within{k}": within_k_accuracy(records, k),
                     "n": len(records), "skipped": len(errors)})
    return rows


def label_histogram(segments: Iterable[RoadSegment], field: str) -> dict[int, int]:
    """Integer-binned counts of one manifest field, in increasing bin order."""
    if field not in HISTOGRAM_FIELDS:
        raise DomainError(f"unknown histogram field {field!r}; expected one of {HISTOGRAM_FIELDS}")
    if field == "freeflow_mph":
        values = (s.freeflow_mph for s in segments)
    else:
        values = (getattr(s.metadata, field) for s in segments)
    counts = Counter(int(v) for v in values)
    return dict(sorted(counts.items()))


# ---------------------------------------------------------------- writers

def write_predictions_csv(path, records: Sequence[PredictionRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "predicted_mph", "true_mph", "posted_limit_mph"])
        for r in records:
            w.writerow([r.id, r.predicted_mph, r.true_mph, r.posted_limit_mph])
    return path


def read_predictions_csv(path) -> list[PredictionRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [PredictionRecord(row["id"], int(row["predicted_mph"]), int(row["true_mph"]),
                                 int(row["posted_limit_mph"])) for row in csv.DictReader(fh)]


def write_comparison_csv(path, rows: Sequence[dict], k: int = 5) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", f"within{k}", "n"])
        for row in rows:
            w.writerow([row["variant"], f"{row[f'within{k}']:.6f}", row["n"]])
    return path


def write_histograms_csv(path, histograms: Mapping[str, Mapping[int, int]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "bin", "count"])
        for name, hist in histograms.items():
            for b, c in hist.items():
                w.writerow([name, b, c])
    return path


def discrepancy_geojson(flagged: Sequence[DiscrepancyRecord],
                        segments: Mapping[str, RoadSegment]) -> dict:
    """FeatureCollection with one point per flagged segment at its first vertex."""
    features = []
    for d in flagged:
        x, y = segments[d.id].geometry[0]
        features.append({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [x, y]},
            "properties": asdict(d),
        })
    return {"type": "FeatureCollection", "features": features}


def write_discrepancy_geojson(path, flagged, segments) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(discrepancy_geojson(flagged, segments), indent=1) + "\n",
                    encoding="utf-8")
    return path
