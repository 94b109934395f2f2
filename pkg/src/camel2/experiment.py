"""End-to-end experiment runs: data, training, evaluation, artifacts."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .bags import (
    AllInstances,
    BagDataset,
    BagSpec,
    InstanceStore,
    MaxInstance,
    PerBagRatio,
    TopFixed,
    build_mnist_bags,
)
from .config import ExperimentConfig, dump_config
from .idx import IdxFormatError, find_mnist, load_split
from .mil import (
    Ensemble,
    StepRecord,
    TrainConfig,
    bag_score,
    ensemble_predict,
    fsb_train,
    harvest_model,
    harvest_positives,
    retrain,
    train,
)
from .metrics import evaluate, roc_auc, write_roc_csv
from .nn import Checkpoint, LrSchedule, init_mlp, save_checkpoint
from .synth import SlideParams, extract_instances, load_slides, make_synthetic_slides, slide_bags, tile_bags

log = logging.getLogger(__name__)

ARTIFACTS = ("metrics.json", "roc.csv", "predictions.csv", "train_log.csv", "checkpoints", "resolved_config")


class DataError(RuntimeError):
    pass


@dataclass
class Prepared:
    train: BagDataset
    test_x: np.ndarray
    test_truth: np.ndarray
    test_bags: list[tuple[np.ndarray, int]]  # (instance rows into test_x, bag label)


@dataclass
class RunArtifacts:
    out_dir: Path
    metrics: dict

    def path(self, name: str) -> Path:
        return self.out_dir / name


def _data_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 100 + stream]))


def standardize(train_x: np.ndarray, *others: np.ndarray) -> list[np.ndarray]:
    """Center each feature on its training mean and scale by the overall
    training standard deviation."""
    mean = train_x.mean(axis=0, dtype=np.float64)
    scale = float(train_x.std(dtype=np.float64)) or 1.0
    return [((x - mean) / scale).astype(np.float32) for x in (train_x, *others)]


def _load_mnist(cfg: ExperimentConfig) -> tuple[InstanceStore, InstanceStore]:
    try:
        train_pool = load_split(*find_mnist(cfg.data_dir, "train"))
        test_pool = load_split(*find_mnist(cfg.data_dir, "test"))
    except (OSError, IdxFormatError) as exc:
        raise DataError(f"MNIST files under {cfg.data_dir}: {exc}") from None
    return train_pool, test_pool


def prepare_mnist(cfg: ExperimentConfig) -> Prepared:
    train_pool, test_pool = _load_mnist(cfg)
    if cfg.input_norm == "standardize":
        train_pool.features, test_pool.features = standardize(train_pool.features, test_pool.features)
    spec = BagSpec(cfg.size, cfg.target, cfg.n_pos_bags, cfg.n_neg_bags, cfg.pos_count_max)
    train_data = build_mnist_bags(train_pool, spec, _data_rng(cfg.seed, 0))
    test_truth = (test_pool.labels == cfg.target).astype(np.int8)

    test_bags = []
    if cfg.n_test_pos_bags or cfg.n_test_neg_bags:
        tspec = BagSpec(cfg.size, cfg.target, cfg.n_test_pos_bags, cfg.n_test_neg_bags, cfg.pos_count_max)
        tdata = build_mnist_bags(test_pool, tspec, _data_rng(cfg.seed, 1))
        test_bags = [(tdata.rows[b.instance_ids], int(b.label)) for b in tdata.bags]
    return Prepared(train_data, test_pool.features, test_truth, test_bags)


def _slides(cfg: ExperimentConfig, split: str, n: int, stream: int):
    if cfg.slides_dir:
        path = Path(cfg.slides_dir) / split
        if not (path / "manifest.csv").exists():
            raise DataError(f"no manifest.csv under {path}")
        return load_slides(path)
    params = slide_params(cfg, n)
    return make_synthetic_slides(params, cfg.seed * 2 + stream, prefix=split)


def slide_params(cfg: ExperimentConfig, n_slides: int) -> SlideParams:
    return SlideParams(
        slide_size=cfg.slide_size, tile_size=cfg.tile_size, instance_size=cfg.instance_size,
        n_slides=n_slides, cancer_regions=cfg.cancer_regions, max_region_cells=cfg.max_region_cells,
        min_tissue=cfg.min_tissue, pos_threshold=cfg.pos_threshold,
    )


def prepare_tiles(cfg: ExperimentConfig) -> Prepared:
    train_inst = extract_instances(_slides(cfg, "train", cfg.n_train_slides, 0), cfg.tile_size, cfg.instance_size, cfg.instance_pool)
    if cfg.variant.startswith("camel2_slide"):
        data = slide_bags(train_inst, use_ratio=cfg.variant.endswith("ratio"))
    else:
        data = tile_bags(train_inst, use_ratio=cfg.variant == "camel2_ratio")

    test_inst = extract_instances(_slides(cfg, "test", cfg.n_test_slides, 1), cfg.tile_size, cfg.instance_size, cfg.instance_pool)
    keep = test_inst.tissue >= cfg.min_tissue
    rows_kept = np.flatnonzero(keep)
    remap = np.full(len(keep), -1)
    remap[rows_kept] = np.arange(rows_kept.size)
    test_bags = []
    for b in tile_bags(test_inst, use_ratio=False).bags:
        members = remap[b.instance_ids]
        members = members[members >= 0]
        if members.size:
            test_bags.append((members, int(b.label)))
    test_x = test_inst.features[keep]
    if cfg.input_norm == "standardize":
        data.features, test_x = standardize(data.features, test_x)
    return Prepared(data, test_x, test_inst.truth[keep], test_bags)


def prepare(cfg: ExperimentConfig) -> Prepared:
    return prepare_mnist(cfg) if cfg.task == "mnist_mil" else prepare_tiles(cfg)


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    if cfg.variant in ("camel2", "camel2_slide"):
        policy = TopFixed(cfg.effective_t)
    elif cfg.variant in ("camel2_ratio", "camel2_slide_ratio"):
        policy = PerBagRatio()
    elif cfg.variant == "mil_max":
        policy = MaxInstance()
    else:
        policy = AllInstances()
    return TrainConfig(
        policy=policy, epochs=cfg.epochs, pos_bags_per_step=cfg.pos_bags_per_step,
        neg_bags_per_step=cfg.neg_bags_per_step, checkpoint_epochs=tuple(cfg.checkpoint_epochs),
        schedule=LrSchedule(cfg.lr, cfg.halve_every), seed=cfg.seed, slide_cap=cfg.effective_slide_cap,
        retrain_threshold=cfg.retrain_threshold, harvest_threshold=cfg.harvest_threshold,
        harvest_with=cfg.harvest_with, on_empty_step=cfg.on_empty_step,
        strict_harvest=cfg.strict_harvest, fsb_batch_size=cfg.fsb_batch_size,
    )


def _factory(n_in: int, hidden: list[int]):
    sizes = [n_in, *hidden, 2]
    return lambda rng: init_mlp(sizes, rng)


def fit(cfg: ExperimentConfig, data: BagDataset, history: dict[str, list[StepRecord]]) -> dict[str, list[Checkpoint]]:
    """Train the configured variant; returns checkpoints per phase."""
    tc = train_config(cfg)
    factory = _factory(data.features.shape[1], cfg.hidden)
    if cfg.variant == "fsb":
        ids = np.arange(data.n_instances)
        x = data.instance_features(ids)
        history["fsb"] = []
        return {"fsb": fsb_train(tc, x, data.truth, factory, history["fsb"])}
    history["train"] = []
    phases = {"train": train(tc, data, factory, history["train"])}
    if cfg.retrain:
        model = harvest_model(tc, phases["train"])
        harvest = harvest_positives(model, data, threshold=tc.harvest_threshold)
        n_harvest = sum(len(v) for v in harvest.values())
        log.info("harvested %d instances from %d positive bags", n_harvest, len(harvest))
        history["retrain"] = []
        phases["retrain"] = retrain(tc, data, harvest, factory, history["retrain"])
    return phases


def _prefixed(prefix: str, metrics: dict) -> dict:
    return {f"{prefix}{k}": v for k, v in metrics.items()}


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[Union[str, Path]] = None) -> RunArtifacts:
    out = Path(out_dir if out_dir is not None else cfg.out)
    t0 = time.perf_counter()
    prep = prepare(cfg)
    log.info(
        "%s/%s: %d bags (%d positive), %d test instances",
        cfg.task, cfg.variant, len(prep.train.bags), len(prep.train.positive_bags), len(prep.test_x),
    )
    history: dict[str, list[StepRecord]] = {}
    phases = fit(cfg, prep.train, history)
    final_phase = list(phases)[-1]
    ensemble = Ensemble.from_checkpoints(phases[final_phase])
    scores = ensemble_predict(ensemble, prep.test_x)

    metrics: dict = {"task": cfg.task, "variant": cfg.variant, "seed": cfg.seed}
    if cfg.task == "mnist_mil":
        metrics.update(size=cfg.size, target=cfg.target)
    metrics["t_percent"] = cfg.effective_t
    metrics.update(evaluate(scores, prep.test_truth, cfg.eval_threshold))
    if final_phase == "retrain":
        first = ensemble_predict(Ensemble.from_checkpoints(phases["train"]), prep.test_x)
        metrics.update(_prefixed("first_pass_", evaluate(first, prep.test_truth, cfg.eval_threshold)))
    if prep.test_bags:
        bag_scores = [bag_score(scores[rows]) for rows, _ in prep.test_bags]
        bag_labels = [label for _, label in prep.test_bags]
        try:
            metrics["bag_auc"] = roc_auc(bag_scores, bag_labels)[1]
        except ValueError:
            metrics["bag_auc"] = None

    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    if metrics["auc"] is not None:
        write_roc_csv(roc_auc(scores, prep.test_truth)[0], out / "roc.csv")
    else:
        (out / "roc.csv").write_text("fpr,tpr,threshold\n")
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance", "truth", "score"])
        for i, (y, s) in enumerate(zip(prep.test_truth, scores)):
            w.writerow([i, int(y), repr(float(s))])
    with open(out / "train_log.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["phase", "epoch", "step", "lr", "loss", "positives", "negatives"])
        for phase, rows in history.items():
            for r in rows:
                w.writerow([phase, r.epoch, r.step, repr(r.lr), repr(r.loss), r.positives, r.negatives])
    ckdir = out / "checkpoints"
    ckdir.mkdir(exist_ok=True)
    for phase, cks in phases.items():
        for ck in cks:
            save_checkpoint(ck.params, ck.epoch, ckdir / f"{phase}_epoch{ck.epoch:03d}.ckpt")
    (out / "resolved_config").write_text(dump_config(cfg))
    log.info("run finished in %.1fs: f1=%s auc=%s", time.perf_counter() - t0, metrics["f1"], metrics["auc"])
    return RunArtifacts(out, metrics)
