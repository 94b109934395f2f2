"""Flat ``key = value`` experiment configs with typed validation.

Blank lines and ``#`` comments are ignored. Multi-valued fields
(``hidden``, ``checkpoint_epochs``) take space-separated values; a comma
turns any field into a sweep axis, which only ``sweep`` accepts.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

TASKS = ("mnist_mil", "synthetic_tiles")
VARIANTS = ("camel2", "camel2_ratio", "camel2_slide", "camel2_slide_ratio", "mil_max", "fsb")
DEFAULT_T = {"camel2": 20.0, "camel2_slide": 10.0}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    task: str = "mnist_mil"
    variant: str = "camel2"
    t_percent: Optional[float] = None
    retrain: bool = True
    seed: int = 0
    out: str = "runs/default"

    # mnist_mil
    data_dir: str = "data/mnist"
    size: int = 1000
    target: int = 0
    n_pos_bags: int = 100
    n_neg_bags: int = 100
    n_test_pos_bags: int = 25
    n_test_neg_bags: int = 25
    pos_count_max: int = 1000

    # synthetic_tiles
    slides_dir: Optional[str] = None
    slide_size: int = 2048
    tile_size: int = 256
    instance_size: int = 32
    instance_pool: int = 2
    n_train_slides: int = 16
    n_test_slides: int = 4
    cancer_regions: int = 8
    max_region_cells: int = 12
    min_tissue: float = 0.10
    pos_threshold: float = 0.20

    # model and training
    hidden: list[int] = field(default_factory=lambda: [256])
    epochs: int = 20
    pos_bags_per_step: int = 2
    neg_bags_per_step: int = 2
    checkpoint_epochs: list[int] = field(default_factory=lambda: [12, 14, 16, 18, 20])
    lr: float = 0.001
    halve_every: int = 5
    slide_cap: Optional[int] = None
    retrain_threshold: float = 0.20
    harvest_threshold: float = 0.5
    harvest_with: str = "ensemble"
    on_empty_step: str = "fail"
    strict_harvest: bool = False
    fsb_batch_size: int = 256
    eval_threshold: float = 0.5
    input_norm: str = "standardize"  # or "unit"

    @property
    def effective_t(self) -> Optional[float]:
        if self.t_percent is not None:
            return self.t_percent
        return DEFAULT_T.get(self.variant)

    @property
    def effective_slide_cap(self) -> Optional[int]:
        if self.slide_cap is None and self.variant.startswith("camel2_slide"):
            return 512
        return self.slide_cap

    def validate(self) -> "ExperimentConfig":
        def bad(name, msg):
            raise ConfigError(f"{name}: {msg}")

        if self.task not in TASKS:
            bad("task", f"unknown task {self.task!r}; expected one of {', '.join(TASKS)}")
        if self.variant not in VARIANTS:
            bad("variant", f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        t = self.effective_t
        if t is not None and not 0 < t <= 100:
            bad("t_percent", "must be in (0, 100]")
        if self.variant in ("camel2", "camel2_slide") and t is None:
            bad("t_percent", "required")
        for name in ("size", "epochs", "pos_bags_per_step", "neg_bags_per_step", "halve_every",
                     "tile_size", "instance_size", "slide_size", "n_train_slides", "n_test_slides",
                     "pos_count_max", "fsb_batch_size", "max_region_cells"):
            if getattr(self, name) < 1:
                bad(name, "must be >= 1")
        for name in ("n_pos_bags", "n_neg_bags", "n_test_pos_bags", "n_test_neg_bags", "cancer_regions"):
            if getattr(self, name) < 0:
                bad(name, "must be >= 0")
        if not 0 <= self.target <= 9:
            bad("target", "must be a digit 0-9")
        if self.lr <= 0:
            bad("lr", "must be positive")
        if not self.hidden or any(h < 1 for h in self.hidden):
            bad("hidden", "needs one or more positive layer widths")
        if not self.checkpoint_epochs or any(not 1 <= e <= self.epochs for e in self.checkpoint_epochs):
            bad("checkpoint_epochs", f"must be non-empty and within [1, {self.epochs}]")
        if self.slide_cap is not None and self.slide_cap < 1:
            bad("slide_cap", "must be >= 1")
        if self.tile_size % self.instance_size:
            bad("instance_size", "must divide tile_size")
        if self.instance_pool < 1 or self.instance_size % self.instance_pool:
            bad("instance_pool", "must be >= 1 and divide instance_size")
        for name in ("min_tissue", "harvest_threshold", "eval_threshold"):
            if not 0 <= getattr(self, name) <= 1:
                bad(name, "must be in [0, 1]")
        if not 0 < self.pos_threshold < 1:
            bad("pos_threshold", "must be in (0, 1)")
        if not 0 < self.retrain_threshold <= 1:
            bad("retrain_threshold", "must be in (0, 1]")
        if self.harvest_with not in ("ensemble", "final"):
            bad("harvest_with", "must be 'ensemble' or 'final'")
        if self.on_empty_step not in ("fail", "skip"):
            bad("on_empty_step", "must be 'fail' or 'skip'")
        if self.input_norm not in ("standardize", "unit"):
            bad("input_norm", "must be 'standardize' or 'unit'")
        return self


def _converter(f: dataclasses.Field):
    name = f.name
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()  # type: ignore[misc]
    if name in ("hidden", "checkpoint_epochs"):
        return lambda s: [int(x) for x in s.split()]
    if name in ("t_percent", "slide_cap", "slides_dir"):
        base = {"t_percent": float, "slide_cap": int, "slides_dir": str}[name]
        return lambda s: None if s.lower() in ("", "none") else base(s)
    if isinstance(default, bool):
        def to_bool(s):
            low = s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {s!r}")
        return to_bool
    return type(default)


CONVERTERS = {f.name: _converter(f) for f in fields(ExperimentConfig)}


def read_pairs(text: str) -> dict[str, str]:
    parser = configparser.ConfigParser(
        interpolation=None, delimiters=("=",), comment_prefixes=("#",), inline_comment_prefixes=("#",)
    )
    parser.optionxform = str  # type: ignore[assignment,method-assign]
    try:
        parser.read_string("[config]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"syntax: {exc}") from None
    return dict(parser["config"])


def _convert(pairs: dict[str, str], overrides: Optional[dict[str, Any]] = None) -> ExperimentConfig:
    kwargs: dict[str, Any] = {}
    for key, raw in pairs.items():
        if key not in CONVERTERS:
            raise ConfigError(f"{key}: unknown field")
        if "," in raw:
            raise ConfigError(f"{key}: lists are only allowed in sweep configs")
        try:
            kwargs[key] = CONVERTERS[key](raw.strip())
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    kwargs.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentConfig(**kwargs).validate()


def parse_config(text: str, **overrides) -> ExperimentConfig:
    return _convert(read_pairs(text), overrides)


def load_config(path: Union[str, Path], **overrides) -> ExperimentConfig:
    return parse_config(Path(path).read_text(), **overrides)


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return " ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    """Every field, defaults included, in a form :func:`parse_config` reads back."""
    return "".join(f"{f.name} = {_format(getattr(cfg, f.name))}\n" for f in fields(cfg))


def expand_sweep(text: str) -> list[tuple[dict[str, str], ExperimentConfig]]:
    """Cartesian product over comma-separated fields, in file order.

    Child ``i`` gets seed ``derive_seed(seed, i)``; its output directory is
    ``<out>/run_<i>``.
    """
    pairs = read_pairs(text)
    axes = []
    for key, raw in pairs.items():
        if "," in raw:
            values = [v.strip() for v in raw.split(",")]
            if any(v == "" for v in values):
                raise ConfigError(f"{key}: empty value in list")
            axes.append((key, values))
    for key, raw in pairs.items():
        if raw.strip() == "" and key not in ("slides_dir", "t_percent", "slide_cap"):
            raise ConfigError(f"{key}: empty value")
    base = {k: v for k, v in pairs.items() if "," not in v}
    parent = _convert(base)
    combos: list[dict[str, str]] = [{}]
    for key, values in axes:
        combos = [dict(c, **{key: v}) for c in combos for v in values]
    out = []
    for i, combo in enumerate(combos):
        child = dict(base, **combo)
        child["seed"] = str(derive_seed(parent.seed, i))
        child["out"] = str(Path(parent.out) / f"run_{i:03d}")
        out.append((combo, _convert(child)))
    return out


def derive_seed(seed: int, index: int) -> int:
    """Child seed: first 32-bit word of ``SeedSequence([seed, index])``."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
