"""Bag and instance data model, region labeling, and bag assembly."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Sequence, Union

import numpy as np


class BagLabel(enum.IntEnum):
    NEGATIVE = 0
    POSITIVE = 1


class RegionLabel(str, enum.Enum):
    POSITIVE = "Positive"
    NEGATIVE = "Negative"
    DISCARDED = "Discarded"


@dataclass(frozen=True)
class InstanceRecord:
    id: int
    features: np.ndarray
    truth: Optional[int] = None


@dataclass(frozen=True, eq=False)
class Bag:
    """A labeled group of instance ids.

    ``ratio`` is the positive-region fraction used by the per-bag ratio
    policy; ``source_id`` names the originating slide or group.
    """

    id: int
    instance_ids: np.ndarray
    label: BagLabel
    ratio: Optional[float] = None
    source_id: str = ""

    def __post_init__(self):
        ids = np.asarray(self.instance_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ValueError(f"bag {self.id}: instance_ids must be a non-empty 1-d list")
        if np.unique(ids).size != ids.size:
            raise ValueError(f"bag {self.id}: duplicate instance ids")
        object.__setattr__(self, "instance_ids", ids)
        object.__setattr__(self, "label", BagLabel(self.label))
        if self.ratio is not None:
            if not 0.0 < self.ratio <= 1.0 and not (self.ratio == 0.0 and self.label == BagLabel.NEGATIVE):
                raise ValueError(f"bag {self.id}: ratio {self.ratio} outside (0, 1]")

    def __len__(self) -> int:
        return int(self.instance_ids.size)

    @property
    def positive(self) -> bool:
        return self.label == BagLabel.POSITIVE


@dataclass(frozen=True)
class TopFixed:
    t: float

    def __post_init__(self):
        if not 0.0 < self.t <= 100.0:
            raise ValueError(f"TopFixed.t must be in (0, 100], got {self.t}")


@dataclass(frozen=True)
class PerBagRatio:
    pass


@dataclass(frozen=True)
class MaxInstance:
    pass


@dataclass(frozen=True)
class AllInstances:
    pass


SelectionPolicy = Union[TopFixed, PerBagRatio, MaxInstance, AllInstances]


@dataclass(frozen=True)
class BagSpec:
    size: int
    target: int
    n_pos_bags: int
    n_neg_bags: int
    pos_count_max: int = 1000

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("bag size must be >= 1")
        if not 0 <= self.target <= 9:
            raise ValueError("target must be a digit class 0-9")
        if self.n_pos_bags < 0 or self.n_neg_bags < 0:
            raise ValueError("bag counts must be non-negative")
        if self.pos_count_max < 1:
            raise ValueError("pos_count_max must be >= 1")


@dataclass
class InstanceStore:
    """Feature rows plus optional integer labels, addressable by row.

    Iterating yields :class:`InstanceRecord` objects; bulk code works on
    ``features`` directly.
    """

    features: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d array")
        if self.labels is not None and len(self.labels) != len(self.features):
            raise ValueError("labels and features differ in length")

    def __len__(self) -> int:
        return len(self.features)

    def __getitem__(self, i: int) -> InstanceRecord:
        truth = None if self.labels is None else int(self.labels[i])
        return InstanceRecord(int(i), self.features[i], truth)

    def __iter__(self) -> Iterator[InstanceRecord]:
        for i in range(len(self)):
            yield self[i]


@dataclass
class BagDataset:
    """Bags over a shared feature table.

    Every slot in every bag has its own instance id; ``rows[id]`` gives the
    feature row backing it, so one feature row may back several instance
    ids when bags were sampled with replacement.
    """

    features: np.ndarray
    rows: np.ndarray
    bags: list[Bag]
    truth: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    @property
    def n_instances(self) -> int:
        return int(self.rows.size)

    def instance_features(self, ids: np.ndarray) -> np.ndarray:
        return self.features[self.rows[ids]]

    @property
    def positive_bags(self) -> list[Bag]:
        return [b for b in self.bags if b.positive]

    @property
    def negative_bags(self) -> list[Bag]:
        return [b for b in self.bags if not b.positive]


def classify_region_label(cancer_ratio: float, pos_threshold: float = 0.20) -> RegionLabel:
    if not 0.0 <= cancer_ratio <= 1.0:
        raise ValueError(f"cancer ratio {cancer_ratio} outside [0, 1]")
    if not 0.0 < pos_threshold < 1.0:
        raise ValueError(f"pos_threshold {pos_threshold} outside (0, 1)")
    if cancer_ratio >= pos_threshold:
        return RegionLabel.POSITIVE
    if cancer_ratio == 0.0:
        return RegionLabel.NEGATIVE
    return RegionLabel.DISCARDED


def _draw(group: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    # without replacement whenever the group is large enough
    return rng.choice(group, size=n, replace=n > group.size)


def build_mnist_bags(
    pool: InstanceStore, spec: BagSpec, rng: np.random.Generator
) -> BagDataset:
    """Assemble target-vs-rest bags from a digit-labeled pool.

    Positive bags hold ``k`` target digits, ``k`` uniform on
    ``1..min(pos_count_max, size)``, topped up with non-target digits;
    negative bags are all non-target. Bags are shuffled internally and the
    returned dataset lists positive bags first.
    """
    if pool.labels is None:
        raise ValueError("pool has no digit labels")
    labels = np.asarray(pool.labels)
    target_rows = np.flatnonzero(labels == spec.target)
    other_rows = np.flatnonzero(labels != spec.target)
    if target_rows.size == 0:
        raise ValueError(f"no instances of target {spec.target} in pool")
    if other_rows.size == 0:
        raise ValueError("no non-target instances in pool")

    kmax = min(spec.pos_count_max, spec.size)
    chunks: list[np.ndarray] = []
    bags: list[Bag] = []
    next_id = 0
    for b in range(spec.n_pos_bags + spec.n_neg_bags):
        if b < spec.n_pos_bags:
            k = int(rng.integers(1, kmax + 1))
            rows = np.concatenate(
                [_draw(target_rows, k, rng), _draw(other_rows, spec.size - k, rng)]
            )
            rows = rng.permutation(rows)
            label, ratio = BagLabel.POSITIVE, k / spec.size
        else:
            rows = _draw(other_rows, spec.size, rng)
            label, ratio = BagLabel.NEGATIVE, None
        ids = np.arange(next_id, next_id + spec.size, dtype=np.int64)
        next_id += spec.size
        chunks.append(rows)
        bags.append(Bag(b, ids, label, ratio=ratio, source_id=f"mnist-{b}"))

    rows = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)
    truth = (labels[rows] == spec.target).astype(np.int8)
    return BagDataset(pool.features, rows, bags, truth=truth)


def subsample_bag(bag: Bag, cap: int = 512, rng: Optional[np.random.Generator] = None) -> Bag:
    if cap < 1:
        raise ValueError("cap must be >= 1")
    if len(bag) <= cap:
        return bag
    if rng is None:
        raise ValueError("a generator is required to subsample")
    picked = rng.choice(len(bag), size=cap, replace=False)
    return replace(bag, instance_ids=bag.instance_ids[np.sort(picked)])


def instance_truth_from_mask(mask_patch: np.ndarray, shape: Optional[Sequence[int]] = None) -> int:
    mask_patch = np.asarray(mask_patch)
    if shape is not None and tuple(mask_patch.shape) != tuple(shape):
        raise ValueError(f"mask shape {mask_patch.shape} != instance shape {tuple(shape)}")
    return int(bool(np.any(mask_patch)))
