"""Weakly supervised training: instance selection, bag-batched training,
harvest-and-retrain, checkpoint ensembles, and the supervised baseline."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .bags import (
    AllInstances,
    Bag,
    BagDataset,
    MaxInstance,
    PerBagRatio,
    SelectionPolicy,
    TopFixed,
    subsample_bag,
)
from .nn import (
    AdamState,
    Checkpoint,
    LrSchedule,
    MlpParams,
    adam_step,
    backward,
    forward,
    lr_at_epoch,
    positive_probability,
    softmax_ce,
)

log = logging.getLogger(__name__)

ModelFactory = Callable[[np.random.Generator], MlpParams]
StepHook = Callable[[int, int, list], None]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    policy: SelectionPolicy = field(default_factory=lambda: TopFixed(20.0))
    epochs: int = 20
    pos_bags_per_step: int = 2
    neg_bags_per_step: int = 2
    checkpoint_epochs: tuple[int, ...] = (12, 14, 16, 18, 20)
    schedule: LrSchedule = field(default_factory=LrSchedule)
    seed: int = 0
    slide_cap: Optional[int] = None
    retrain_threshold: float = 0.20
    harvest_threshold: float = 0.5
    harvest_with: str = "ensemble"  # or "final"
    on_empty_step: str = "fail"  # or "skip"
    strict_harvest: bool = False
    fsb_batch_size: int = 256

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.pos_bags_per_step < 1 or self.neg_bags_per_step < 1:
            raise ValueError("bags per step must be >= 1")
        bad = [e for e in self.checkpoint_epochs if not 1 <= e <= self.epochs]
        if bad:
            raise ValueError(f"checkpoint epochs {bad} outside [1, {self.epochs}]")
        if not self.checkpoint_epochs:
            raise ValueError("at least one checkpoint epoch is required")
        if not 0.0 < self.retrain_threshold <= 1.0:
            raise ValueError("retrain_threshold must be in (0, 1]")
        if self.slide_cap is not None and self.slide_cap < 1:
            raise ValueError("slide_cap must be >= 1")
        if self.harvest_with not in ("ensemble", "final"):
            raise ValueError("harvest_with must be 'ensemble' or 'final'")
        if self.on_empty_step not in ("fail", "skip"):
            raise ValueError("on_empty_step must be 'fail' or 'skip'")
        if self.fsb_batch_size < 1:
            raise ValueError("fsb_batch_size must be >= 1")


@dataclass
class Ensemble:
    members: list[MlpParams]

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        sizes = self.members[0].sizes
        if any(m.sizes != sizes for m in self.members):
            raise ValueError("ensemble members have different architectures")

    @classmethod
    def from_checkpoints(cls, checkpoints: Sequence[Checkpoint]) -> "Ensemble":
        return cls([c.params for c in checkpoints])


HarvestSet = dict  # bag id -> sorted array of instance ids predicted positive


@dataclass
class StepRecord:
    epoch: int
    step: int
    lr: float
    loss: float
    positives: int
    negatives: int


# -- selection -----------------------------------------------------------------


# absorbs float noise such as 0.29 * 100 == 28.999999999999996
_COUNT_TOLERANCE = 1e-9


def selection_count(n: int, t: float) -> int:
    """k = max(1, floor(n * t / 100)), capped at n."""
    if n < 1:
        raise ValueError("bag size must be >= 1")
    if not 0.0 < t <= 100.0:
        raise ValueError(f"t must be in (0, 100], got {t}")
    return min(n, max(1, math.floor(n * t / 100.0 + _COUNT_TOLERANCE)))


def _top(probs: np.ndarray, k: int) -> np.ndarray:
    # highest first, lower index wins ties
    order = np.argsort(-probs, kind="stable")
    return np.sort(order[:k])


def select_instances(probs, bag: Bag, policy: SelectionPolicy) -> tuple[np.ndarray, np.ndarray]:
    """Bag-local indices that receive a training label, and those labels.

    Indices come back in ascending order.
    """
    probs = np.asarray(probs, dtype=np.float64)
    n = len(bag)
    if probs.shape != (n,):
        raise ValueError(f"expected {n} probabilities, got shape {probs.shape}")
    if np.isnan(probs).any():
        raise ValueError("NaN probability")
    if not bag.positive:
        return np.arange(n), np.zeros(n, dtype=np.int64)
    if isinstance(policy, TopFixed):
        idx = _top(probs, selection_count(n, policy.t))
    elif isinstance(policy, PerBagRatio):
        if bag.ratio is None:
            raise ValueError(f"bag {bag.id} has no ratio annotation")
        idx = _top(probs, selection_count(n, bag.ratio * 100.0))
    elif isinstance(policy, MaxInstance):
        idx = np.array([int(np.argmax(probs))])
    elif isinstance(policy, AllInstances):
        idx = np.arange(n)
    else:
        raise TypeError(f"unknown selection policy {policy!r}")
    return idx, np.ones(len(idx), dtype=np.int64)


def retrain_selection(
    probs: np.ndarray, bag: Bag, harvest_ids: np.ndarray, full_size: int, threshold: float
) -> np.ndarray:
    """Bag-local positive indices allowed during retraining.

    Only harvested instances are eligible. When the harvest exceeds
    ``threshold`` of the full bag, the top ``selection_count(n, threshold)``
    eligible instances by ``probs`` are taken; otherwise all of them.
    """
    cand = np.flatnonzero(np.isin(bag.instance_ids, harvest_ids))
    if cand.size == 0:
        return cand
    if len(harvest_ids) / full_size > threshold:
        k = min(cand.size, selection_count(len(bag), threshold * 100.0))
        return np.sort(cand[_top(np.asarray(probs)[cand], k)])
    return cand


# -- training ------------------------------------------------------------------

Selector = Callable[[np.ndarray, Bag], np.ndarray]


def _streams(seed: int, phase: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    init, order, sub = np.random.SeedSequence([seed, phase]).spawn(3)
    return (np.random.default_rng(init), np.random.default_rng(order), np.random.default_rng(sub))


def _epoch_batches(
    pos: list[Bag], neg: list[Bag], config: TrainConfig, rng: np.random.Generator
) -> Iterable[tuple[list[Bag], list[Bag]]]:
    pos_order = rng.permutation(len(pos))
    neg_queue: list[int] = []
    for s in range(0, len(pos), config.pos_bags_per_step):
        pb = [pos[i] for i in pos_order[s : s + config.pos_bags_per_step]]
        nb = []
        while len(nb) < config.neg_bags_per_step:
            if not neg_queue:
                neg_queue = list(rng.permutation(len(neg)))
            nb.append(neg[neg_queue.pop(0)])
        yield pb, nb


def _run(
    config: TrainConfig,
    data: BagDataset,
    model_factory: ModelFactory,
    pos: list[Bag],
    selector: Selector,
    phase: int,
    history: Optional[list[StepRecord]],
    hook: Optional[StepHook],
) -> list[Checkpoint]:
    neg = data.negative_bags
    if len(pos) < config.pos_bags_per_step or len(neg) < config.neg_bags_per_step:
        raise TrainingError(
            f"need >= {config.pos_bags_per_step} positive and >= {config.neg_bags_per_step} "
            f"negative bags, have {len(pos)} and {len(neg)}"
        )
    init_rng, order_rng, sub_rng = _streams(config.seed, phase)
    params = model_factory(init_rng)
    state = AdamState.fresh(params)
    checkpoints = []
    for epoch in range(1, config.epochs + 1):
        lr = lr_at_epoch(epoch, config.schedule)
        for step, (pb, nb) in enumerate(_epoch_batches(pos, neg, config, order_rng)):
            if config.slide_cap is not None:
                pb = [subsample_bag(b, config.slide_cap, sub_rng) for b in pb]
                nb = [subsample_bag(b, config.slide_cap, sub_rng) for b in nb]
            pieces, labels, chosen = [], [], []
            for bag in pb:
                x = data.instance_features(bag.instance_ids)
                idx = selector(positive_probability(params, x), bag)
                pieces.append(x[idx])
                labels.append(np.ones(len(idx), dtype=np.int64))
                chosen.append((bag, bag.instance_ids[idx], 1))
            for bag in nb:
                pieces.append(data.instance_features(bag.instance_ids))
                labels.append(np.zeros(len(bag), dtype=np.int64))
                chosen.append((bag, bag.instance_ids, 0))
            y = np.concatenate(labels)
            if hook is not None:
                hook(epoch, step, chosen)
            if y.size == 0:
                if config.on_empty_step == "fail":
                    raise TrainingError(f"epoch {epoch} step {step}: no instances selected")
                log.warning("epoch %d step %d: empty selection, step skipped", epoch, step)
                continue
            logits, cache = forward(params, np.concatenate(pieces))
            loss, dlogits = softmax_ce(logits, y)
            grads = backward(params, cache, dlogits)
            params, state = adam_step(params, grads, state, lr)
            if history is not None:
                npos = int(y.sum())
                history.append(StepRecord(epoch, step, lr, loss, npos, int(y.size - npos)))
        if epoch in config.checkpoint_epochs:
            checkpoints.append(Checkpoint(epoch, params.copy()))
    return checkpoints


def train(
    config: TrainConfig,
    data: BagDataset,
    model_factory: ModelFactory,
    history: Optional[list[StepRecord]] = None,
    hook: Optional[StepHook] = None,
) -> list[Checkpoint]:
    """Train from scratch with the configured selection policy.

    One epoch is one pass over the positive bags in shuffled order, each
    step pairing ``pos_bags_per_step`` positive with ``neg_bags_per_step``
    negative bags. Checkpoints are copies taken at ``checkpoint_epochs``.
    """
    policy = config.policy
    if isinstance(policy, PerBagRatio):
        missing = [b.id for b in data.positive_bags if b.ratio is None]
        if missing:
            raise ValueError(f"ratio policy needs ratios on all positive bags; missing on {missing[:5]}")

    def selector(probs, bag):
        return select_instances(probs, bag, policy)[0]

    return _run(config, data, model_factory, data.positive_bags, selector, 0, history, hook)


def predict(model: Union[MlpParams, Ensemble], x: np.ndarray) -> np.ndarray:
    if isinstance(model, Ensemble):
        return ensemble_predict(model, x)
    return positive_probability(model, x)


def ensemble_predict(ensemble: Ensemble, x: np.ndarray) -> np.ndarray:
    if not ensemble.members:
        raise ValueError("empty ensemble")
    total = np.zeros(len(x), dtype=np.float64)
    for m in ensemble.members:
        total += positive_probability(m, x)
    return total / len(ensemble.members)


def harvest_positives(
    model: Union[MlpParams, Ensemble],
    data: BagDataset,
    bags: Optional[Sequence[Bag]] = None,
    threshold: float = 0.5,
) -> HarvestSet:
    """Ids in each positive bag whose predicted positive probability >= threshold."""
    bags = data.positive_bags if bags is None else [b for b in bags if b.positive]
    out: HarvestSet = {}
    for bag in bags:
        probs = predict(model, data.instance_features(bag.instance_ids))
        out[bag.id] = np.sort(bag.instance_ids[probs >= threshold])
    return out


def harvest_model(config: TrainConfig, checkpoints: Sequence[Checkpoint]) -> Union[MlpParams, Ensemble]:
    if config.harvest_with == "final":
        return checkpoints[-1].params
    return Ensemble.from_checkpoints(checkpoints)


def retrain(
    config: TrainConfig,
    data: BagDataset,
    harvest: HarvestSet,
    model_factory: ModelFactory,
    history: Optional[list[StepRecord]] = None,
    hook: Optional[StepHook] = None,
) -> list[Checkpoint]:
    """Train a fresh model whose positive labels come only from ``harvest``."""
    pos = []
    for bag in data.positive_bags:
        ids = harvest.get(bag.id)
        if ids is None or len(ids) == 0:
            if config.strict_harvest:
                raise TrainingError(f"bag {bag.id}: empty harvest")
            log.warning("bag %d: empty harvest, skipped during retraining", bag.id)
            continue
        if not np.isin(ids, bag.instance_ids).all():
            raise ValueError(f"bag {bag.id}: harvest contains ids outside the bag")
        pos.append(bag)
    full_size = {b.id: len(b) for b in data.bags}
    thr = config.retrain_threshold

    def selector(probs, bag):
        return retrain_selection(probs, bag, harvest[bag.id], full_size[bag.id], thr)

    return _run(config, data, model_factory, pos, selector, 1, history, hook)


def fsb_train(
    config: TrainConfig,
    x: np.ndarray,
    truth: np.ndarray,
    model_factory: ModelFactory,
    history: Optional[list[StepRecord]] = None,
) -> list[Checkpoint]:
    """Fully supervised baseline on instance-level ground truth."""
    if truth is None:
        raise ValueError("supervised baseline needs ground-truth labels")
    truth = np.asarray(truth)
    if len(truth) != len(x) or len(x) == 0:
        raise ValueError("features and truth must be non-empty and equal length")
    if np.any((truth != 0) & (truth != 1)):
        raise ValueError("ground truth must be binary with no missing labels")
    truth = truth.astype(np.int64)
    init_rng, order_rng, _ = _streams(config.seed, 2)
    params = model_factory(init_rng)
    state = AdamState.fresh(params)
    checkpoints = []
    bs = config.fsb_batch_size
    for epoch in range(1, config.epochs + 1):
        lr = lr_at_epoch(epoch, config.schedule)
        order = order_rng.permutation(len(x))
        for step, s in enumerate(range(0, len(x), bs)):
            idx = np.sort(order[s : s + bs])
            logits, cache = forward(params, x[idx])
            loss, dlogits = softmax_ce(logits, truth[idx])
            params, state = adam_step(params, backward(params, cache, dlogits), state, lr)
            if history is not None:
                npos = int(truth[idx].sum())
                history.append(StepRecord(epoch, step, lr, loss, npos, len(idx) - npos))
        if epoch in config.checkpoint_epochs:
            checkpoints.append(Checkpoint(epoch, params.copy()))
    return checkpoints


def bag_score(probs, rule: str = "max", k: Optional[int] = None) -> float:
    p = np.asarray(probs, dtype=np.float64)
    if p.size == 0:
        raise ValueError("empty probability list")
    if rule == "max":
        return float(p.max())
    if rule == "topk_mean":
        if k is None or k < 1:
            raise ValueError("topk_mean needs k >= 1")
        return float(np.sort(p)[::-1][: min(k, p.size)].mean())
    raise ValueError(f"unknown bag-score rule {rule!r}")
