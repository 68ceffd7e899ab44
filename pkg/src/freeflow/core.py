"""Road segments, discrete speed classes, and county-disjoint splitting."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPLITS = ("train", "val", "test")


class DomainError(ValueError):
    """Raised when an input violates a documented precondition."""


@dataclass(frozen=True)
class RoadMetadata:
    """Coarse road attributes available for every segment.

    area_type is 0 (rural), 1 (suburban) or 2 (urban); functional_class runs
    from 1 (highest class) to 5.
    """

    area_type: int
    functional_class: int
    posted_limit_mph: int

    def __post_init__(self):
        if self.area_type not in (0, 1, 2):
            raise DomainError(f"area_type must be 0, 1 or 2, got {self.area_type}")
        if not 1 <= self.functional_class <= 5:
            raise DomainError(f"functional_class must be in 1..5, got {self.functional_class}")
        if not 5 <= self.posted_limit_mph <= 90:
            raise DomainError(f"posted_limit_mph must be in [5, 90], got {self.posted_limit_mph}")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.area_type, self.functional_class, self.posted_limit_mph)


@dataclass
class RoadSegment:
    id: str
    geometry: list[tuple[float, float]]
    county: str
    metadata: RoadMetadata
    freeflow_mph: int
    chip_path: str | None = None
    split: str | None = None

    def __post_init__(self):
        self.geometry = [(float(x), float(y)) for x, y in self.geometry]
        if len(self.geometry) < 2:
            raise DomainError(f"segment {self.id}: geometry needs at least 2 points")
        if self.geometry[0] == self.geometry[1]:
            raise DomainError(f"segment {self.id}: first two points coincide")
        if self.freeflow_mph < 0:
            raise DomainError(f"segment {self.id}: negative free-flow speed")
        if not self.county:
            raise DomainError(f"segment {self.id}: empty county")
        if self.split is not None and self.split not in SPLITS:
            raise DomainError(f"segment {self.id}: unknown split {self.split!r}")


def round_speed(raw: float) -> int:
    """Round a measured speed to the nearest integer mph, halves going up."""
    if raw < 0 or math.isnan(raw):
        raise DomainError(f"speed must be nonnegative, got {raw}")
    return int(math.floor(raw + 0.5))


@dataclass(frozen=True)
class SpeedClassMap:
    """Bijection between distinct integer speeds and class indices."""

    speeds: tuple[int, ...]

    def __post_init__(self):
        speeds = tuple(int(s) for s in self.speeds)
        if not speeds:
            raise DomainError("class map needs at least one speed")
        if any(b <= a for a, b in zip(speeds, speeds[1:])):
            raise DomainError("class map speeds must be strictly increasing")
        object.__setattr__(self, "speeds", speeds)
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(speeds)})

    @property
    def K(self) -> int:
        return len(self.speeds)

    def speed_to_class(self, speed: int) -> int:
        try:
            return self._index[int(speed)]
        except KeyError:
            raise DomainError(f"speed {speed} is not in the class map") from None

    def class_to_speed(self, k: int) -> int:
        if not 0 <= k < self.K:
            raise DomainError(f"class index {k} out of range for K={self.K}")
        return self.speeds[k]

    def __contains__(self, speed) -> bool:
        return int(speed) in self._index


def build_class_map(labels: Iterable[int]) -> SpeedClassMap:
    labels = list(labels)
    if not labels:
        raise DomainError("cannot build a class map from no labels")
    return SpeedClassMap(tuple(sorted({int(s) for s in labels})))


@dataclass(frozen=True)
class SplitAssignment:
    train: frozenset[str]
    val: frozenset[str]
    test: frozenset[str]
    test_counties: frozenset[str] = field(default_factory=frozenset)

    def split_of(self, seg_id: str) -> str:
        for name in SPLITS:
            if seg_id in getattr(self, name):
                return name
        raise KeyError(seg_id)


def county_split(
    segments: Sequence[RoadSegment],
    test_fraction_target: float = 0.07,
    val_fraction_of_train: float = 0.01,
    seed: int = 0,
) -> SplitAssignment:
    """Assign whole counties to the test side, then sample validation ids.

    Counties are visited in a seeded random order and moved to the test side
    until the test share of segments first reaches ``test_fraction_target``.
    Validation ids are a seeded uniform sample of the remaining pool.
    """
    if not 0 < test_fraction_target < 1:
        raise DomainError("test_fraction_target must lie in (0, 1)")
    if not 0 <= val_fraction_of_train < 1:
        raise DomainError("val_fraction_of_train must lie in [0, 1)")
    by_county: dict[str, list[str]] = {}
    for seg in segments:
        by_county.setdefault(seg.county, []).append(seg.id)
    if len(by_county) < 2:
        raise DomainError("a county-disjoint split needs at least two counties")

    rng = np.random.default_rng(seed)
    order = [sorted(by_county)[i] for i in rng.permutation(len(by_county))]
    total = len(segments)
    test_counties: list[str] = []
    n_test = 0
    # The last county always stays on the training side.
    for county in order[:-1]:
        if n_test / total >= test_fraction_target:
            break
        test_counties.append(county)
        n_test += len(by_county[county])

    test_set = set(test_counties)
    test_ids = [s.id for s in segments if s.county in test_set]
    pool = [s.id for s in segments if s.county not in test_set]
    n_val = round_speed(val_fraction_of_train * len(pool))
    val_ids = set(rng.choice(len(pool), size=n_val, replace=False).tolist()) if n_val else set()
    val = frozenset(pool[i] for i in val_ids)
    train = frozenset(pid for i, pid in enumerate(pool) if i not in val_ids)
    return SplitAssignment(train, val, frozenset(test_ids), frozenset(test_counties))


def apply_split(segments: Sequence[RoadSegment], split: SplitAssignment) -> list[RoadSegment]:
    """Return copies of ``segments`` with their split field filled in."""
    out = []
    for seg in segments:
        out.append(RoadSegment(seg.id, seg.geometry, seg.county, seg.metadata,
                               seg.freeflow_mph, seg.chip_path, split.split_of(seg.id)))
    return out


def segment_to_row(seg: RoadSegment) -> dict:
    row = {
        "id": seg.id,
        "county": seg.county,
        "geometry": [[x, y] for x, y in seg.geometry],
        "area_type": seg.metadata.area_type,
        "functional_class": seg.metadata.functional_class,
        "posted_limit_mph": seg.metadata.posted_limit_mph,
        "freeflow_mph": seg.freeflow_mph,
        "chip_path": seg.chip_path,
    }
    if seg.split is not None:
        row["split"] = seg.split
    return row


def segment_from_row(row: dict) -> RoadSegment:
    try:
        meta = RoadMetadata(int(row["area_type"]), int(row["functional_class"]),
                            int(row["posted_limit_mph"]))
        return RoadSegment(
            id=str(row["id"]),
            geometry=[tuple(p) for p in row["geometry"]],
            county=str(row["county"]),
            metadata=meta,
            freeflow_mph=int(row["freeflow_mph"]),
            chip_path=row.get("chip_path"),
            split=row.get("split"),
        )
    except KeyError as exc:
        raise DomainError(f"manifest row missing key {exc}") from None


def write_manifest(path: str | Path, segments: Iterable[RoadSegment]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for seg in segments:
            fh.write(json.dumps(segment_to_row(seg)) + "\n")
    return path


def read_manifest(path: str | Path) -> list[RoadSegment]:
    segments = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DomainError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            segments.append(segment_from_row(row))
    ids = [s.id for s in segments]
    if len(set(ids)) != len(ids):
        raise DomainError(f"{path}: duplicate segment ids")
    return segments


def segments_in(segments: Iterable[RoadSegment], split: str) -> list[RoadSegment]:
    return [s for s in segments if s.split == split]
