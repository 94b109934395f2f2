"""Command line: ``run``, ``sweep`` and ``synth``.

Exit codes: 0 success, 2 config error, 3 data error, 4 training failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, ExperimentConfig, expand_sweep, load_config
from .experiment import DataError, run_experiment, slide_params
from .idx import IdxFormatError
from .mil import TrainingError
from .synth import make_synthetic_slides

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN = 0, 2, 3, 4
SUMMARY_COLUMNS = ["run", "status", "variant", "size", "target", "t_percent", "seed",
                   "sensitivity", "specificity", "f1", "auc"]

log = logging.getLogger("camel2")


def _run_guarded(cfg: ExperimentConfig) -> tuple[int, dict]:
    try:
        return EXIT_OK, run_experiment(cfg).metrics
    except (DataError, IdxFormatError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA, {}
    except (TrainingError, FloatingPointError) as exc:
        log.error("training failed: %s", exc)
        return EXIT_TRAIN, {}


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config, out=args.out, seed=args.seed)
    except (ConfigError, OSError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    return _run_guarded(cfg)[0]


def _child(cfg: ExperimentConfig) -> tuple[int, dict]:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    return _run_guarded(cfg)


def cmd_sweep(args) -> int:
    try:
        children = expand_sweep(Path(args.config).read_text())
    except (ConfigError, OSError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    if not children:
        log.error("config error: sweep expands to no runs")
        return EXIT_CONFIG
    cfgs = [c for _, c in children]
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_child, cfgs))
    else:
        results = [_run_guarded(c) for c in cfgs]

    root = Path(cfgs[0].out).parent
    root.mkdir(parents=True, exist_ok=True)
    failed = 0
    with open(root / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for i, (cfg, (code, m)) in enumerate(zip(cfgs, results)):
            failed += code != EXIT_OK
            row = [i, "ok" if code == EXIT_OK else f"exit {code}", cfg.variant, cfg.size, cfg.target,
                   cfg.effective_t, cfg.seed]
            row += [json.dumps(m.get(k)) for k in ("sensitivity", "specificity", "f1", "auc")]
            w.writerow(row)
    log.info("sweep: %d runs, %d failed; summary at %s", len(cfgs), failed, root / "summary.csv")
    return EXIT_TRAIN if failed else EXIT_OK


def cmd_synth(args) -> int:
    try:
        cfg = load_config(args.config, out=args.out, seed=args.seed)
    except (ConfigError, OSError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    out = Path(cfg.out)
    for split, n, stream in (("train", cfg.n_train_slides, 0), ("test", cfg.n_test_slides, 1)):
        try:
            params = slide_params(cfg, n)
        except ValueError as exc:
            log.error("config error: %s", exc)
            return EXIT_CONFIG
        slides = make_synthetic_slides(params, cfg.seed * 2 + stream, out / split, prefix=split)
        log.info("%s: %d slides, %d kept tiles", split, len(slides), sum(len(s.manifest) for s in slides))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="camel2", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and evaluate one configuration")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run every combination of comma-separated fields")
    s.add_argument("--config", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    y = sub.add_parser("synth", help="write synthetic slides, masks and tile manifests")
    y.add_argument("--config", required=True)
    y.add_argument("--out")
    y.add_argument("--seed", type=int)
    y.set_defaults(func=cmd_synth)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
