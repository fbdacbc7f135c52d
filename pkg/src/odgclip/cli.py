"""``odgclip`` command line: generate-open, train, evaluate, lodo, diagnose."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evalkit
from .config import RunConfig, load_config, with_overrides
from .datasets import (DomainSuite, SplitSpec, load_class_split, load_suite, make_lodo_splits, open_quota,
                       source_pool, steps_per_epoch, synth_toy_suite, target_pool)
from .encoders import EncoderBackend, make_backend
from .engine import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train
from .errors import CheckpointError, ConfigurationError, DataError, ODGError
from .opengen import GenRequest, generate_open_pool, make_diffusion_client, make_stub_generator

logger = logging.getLogger("odgclip")

CACHE_ENV = "ODGCLIP_CACHE"
ABLATIONS = {
    "no-sem": {"use_sem": False},
    "no-xhat": {"use_xhat": False, "use_sem": False},
    "manual-xhat": {"manual_xhat": True},
    "pp-only": {"pp_only": True},
    "b3-gaussian-init": {"init_mode": "gaussian"},
}
EXIT_OK, EXIT_USER, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


class _CacheOnly:
    """Generator that only serves cached pools; used by commands that must not generate."""

    def generate(self, request: GenRequest):
        raise DataError(f"no cached pseudo-open pool for domain {request.domain!r} (seed {request.seed}); "
                        "run `odgclip generate-open` first")


# -- shared plumbing -----------------------------------------------------------------


def effective_config(args) -> RunConfig:
    cfg = load_config(args.config)
    train_over: dict = {}
    for name in getattr(args, "ablate", None) or []:
        train_over.update(ABLATIONS[name])
    if getattr(args, "pp_only", False):
        train_over["pp_only"] = True
    train_over["dom_token_position"] = getattr(args, "dom_position", None)
    train_over["seed"] = getattr(args, "seed", None)
    over = {
        "train": train_over,
        "opengen": {"threshold": getattr(args, "entropy_threshold", None), "count": getattr(args, "count", None),
                    "workers": getattr(args, "workers", None)},
        "eval": {"seeds": getattr(args, "seeds", None), "output_dir": getattr(args, "out", None),
                 "closed_set": True if getattr(args, "closed_set", False) else None},
    }
    return with_overrides(cfg, over)


def build_suite(cfg: RunConfig) -> DomainSuite:
    ds = cfg.dataset
    if ds.root:
        return load_suite(ds.root, ds.image_size)
    return synth_toy_suite(**ds.toy.model_dump())


def class_split_of(cfg: RunConfig):
    cs = cfg.dataset.class_split
    if cs is None or cfg.eval.closed_set:
        return None
    return load_class_split(cs) if isinstance(cs, str) else cs


def pick_split(cfg: RunConfig, suite: DomainSuite, target: str | None) -> SplitSpec:
    splits = make_lodo_splits(suite, class_split_of(cfg))
    if target is None:
        return splits[0]
    for s in splits:
        if s.target == target:
            return s
    raise DataError(f"target {target!r} is not a domain of the suite ({', '.join(suite.domains)})")


def cache_dir_of(cfg: RunConfig) -> Path:
    if cfg.opengen.cache_dir:
        return Path(cfg.opengen.cache_dir)
    if os.environ.get(CACHE_ENV):
        return Path(os.environ[CACHE_ENV])
    return Path(cfg.eval.output_dir) / "cache"


def make_generator(cfg: RunConfig):
    og = cfg.opengen
    if og.backend == "stub":
        return make_stub_generator(og.seed, og.image_size)
    return make_diffusion_client(og.endpoint, og.model_id, og.guidance_scale, image_size=og.image_size)


def pool_count(cfg: RunConfig, tc: TrainConfig, suite: DomainSuite, split: SplitSpec) -> int:
    if cfg.opengen.count:
        return cfg.opengen.count
    spe = tc.steps_per_epoch or steps_per_epoch(len(source_pool(suite, split)), tc.batch_size, tc.open_fraction)
    return max(1, open_quota(tc.batch_size, tc.open_fraction) * spe)


def open_pool_for(cfg: RunConfig, tc: TrainConfig, suite: DomainSuite, split: SplitSpec, generator):
    return generate_open_pool(generator, split.sources, split.known_labels, pool_count(cfg, tc, suite, split),
                              seed=tc.seed, threshold=cfg.opengen.threshold, pp_only=tc.pp_only,
                              cache_dir=cache_dir_of(cfg), workers=cfg.opengen.workers)


def echo_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.yaml").write_text(cfg.dump())


def write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def checkpoint_split(cfg: RunConfig, suite: DomainSuite, ckpt: Checkpoint) -> SplitSpec:
    split = pick_split(cfg, suite, ckpt.meta.get("target"))
    if list(split.augmented_labels) != ckpt.labels:
        raise CheckpointError("checkpoint labels do not match the configured class split")
    return split


# -- commands ------------------------------------------------------------------------


def cmd_generate_open(args) -> int:
    cfg = effective_config(args)
    suite = build_suite(cfg)
    split = pick_split(cfg, suite, args.target)
    tc = cfg.train.to_train_config()
    pool, manifest = open_pool_for(cfg, tc, suite, split, make_generator(cfg))
    out = Path(cfg.eval.output_dir) / "open_pool" / split.target
    echo_config(cfg, out)
    path = write_json(out / "manifest.json", manifest)
    print(f"accepted {len(pool)}/{len(pool.candidates)} (acceptance rate {pool.acceptance_rate:.3f})")
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = effective_config(args)
    suite = build_suite(cfg)
    split = pick_split(cfg, suite, args.target)
    tc = cfg.train.to_train_config()
    backend = make_backend(cfg.backend.spec())
    pool = []
    if tc.open_fraction > 0:
        pool = open_pool_for(cfg, tc, suite, split, _CacheOnly())[0].samples
    out = Path(cfg.eval.output_dir) / "train" / split.target / f"seed{tc.seed}"
    echo_config(cfg, out)
    result = train(split, suite, pool, backend, tc, log_path=out / "train_log.jsonl",
                   resume_path=args.resume, epoch_checkpoint=out / "last.odg")
    path = save_checkpoint(result.checkpoint, out / "checkpoint.odg")
    print(path)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = effective_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    suite = build_suite(cfg)
    split = checkpoint_split(cfg, suite, ckpt)
    model = ckpt.to_model(make_backend(cfg.backend.spec()))
    metrics = evalkit.evaluate_model(model, target_pool(suite, split), split.known_labels, ckpt.config.tau)
    out = Path(cfg.eval.output_dir) / "evaluate" / split.target
    echo_config(cfg, out)
    path = write_json(out / "metrics.json", {"target": split.target, "checkpoint_config": ckpt.meta["config"],
                                             **metrics})
    print(json.dumps({k: metrics[k] for k in evalkit.METRIC_KEYS}, sort_keys=True))
    print(path)
    return EXIT_OK


def cmd_lodo(args) -> int:
    cfg = effective_config(args)
    suite = build_suite(cfg)
    out = Path(cfg.eval.output_dir) / "lodo"
    echo_config(cfg, out)
    report = evalkit.run_lodo(
        suite, class_split_of(cfg), cfg.train.to_train_config(), make_backend(cfg.backend.spec()),
        make_generator(cfg), n_seeds=cfg.eval.seeds, targets=args.targets or cfg.eval.targets,
        open_count=cfg.opengen.count, threshold=cfg.opengen.threshold, closed_set=cfg.eval.closed_set,
        out_dir=out, cache_dir=cache_dir_of(cfg), workers=cfg.opengen.workers,
        on_split=lambda t, row: print(f"{t}: acc_closed={row['acc_closed']:.2f} h_score={row['h_score']}"))
    paths = report.write(out)
    if cfg.eval.plots:
        paths.append(evalkit.plot_h_scores(report, out / "h_scores.png"))
    for p in paths:
        print(p)
    return EXIT_OK


def _cosine_table(cfg, suite, ckpt_path: str, backend: EncoderBackend):
    ckpt = load_checkpoint(ckpt_path)
    split = checkpoint_split(cfg, suite, ckpt)
    model = ckpt.to_model(backend)
    pool = []
    if ckpt.config.open_fraction > 0:
        pool = open_pool_for(cfg, ckpt.config, suite, split, _CacheOnly())[0].samples
    items = evalkit.diagnostic_items(suite, split, pool)
    return ckpt, split, model, evalkit.xhat_cosine_diagnostic(model, items)


def cmd_diagnose(args) -> int:
    cfg = effective_config(args)
    suite = build_suite(cfg)
    backend = make_backend(cfg.backend.spec())
    ckpt, split, model, cos = _cosine_table(cfg, suite, args.checkpoint, backend)
    tables = {"main": cos}
    if args.compare:
        tables["compare"] = _cosine_table(cfg, suite, args.compare, backend)[3]
    out = Path(cfg.eval.output_dir) / "diagnose" / split.target
    echo_config(cfg, out)
    paths = []
    cpath = out / "xhat_cosine.csv"
    with open(cpath, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["class", *tables])
        for c in sorted(set().union(*[t.keys() for t in tables.values()])):
            w.writerow([c, *("" if c not in t else f"{t[c]:.6f}" for t in tables.values())])
    paths.append(cpath)
    paths.append(write_json(out / "frechet.json", evalkit.frechet_matrix(model, suite, ckpt.config.tau)))
    tgt = target_pool(suite, split)
    if split.target_open_labels:
        curve = evalkit.openness_sweep(model, tgt, evalkit.default_partitions(split.known_labels,
                                                                            split.target_open_labels),
                                       ckpt.config.tau)
        paths.append(write_json(out / "openness.json", curve))
        if cfg.eval.plots:
            paths.append(evalkit.plot_openness(curve, out / "openness.png"))
    if cfg.eval.plots and cos:
        paths.append(evalkit.plot_cosines(tables, out / "xhat_cosine.png"))
    for p in paths:
        print(p)
    return EXIT_OK


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="odgclip", description="Open domain generalization with prompt differentials.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="YAML run config (defaults when omitted)")
        sp.add_argument("--out", help="output directory (overrides eval.output_dir)")
        sp.add_argument("--seed", type=int, help="training seed (overrides train.seed)")

    def train_flags(sp):
        sp.add_argument("--ablate", action="append", choices=sorted(ABLATIONS), type=str.lower,
                        help="ablation arm, repeatable")
        sp.add_argument("--dom-position", choices=["front", "middle", "end"])
        sp.add_argument("--pp-only", action="store_true", help="positive-only generation prompts")
        sp.add_argument("--entropy-threshold", type=float)
        sp.add_argument("--count", type=int, help="open images per source domain")
        sp.add_argument("--workers", type=int)

    g = sub.add_parser("generate-open", help="build and cache the pseudo-open pool")
    common(g)
    train_flags(g)
    g.add_argument("--target", help="held-out domain; sources are the others")
    g.set_defaults(func=cmd_generate_open)

    t = sub.add_parser("train", help="train one split")
    common(t)
    train_flags(t)
    t.add_argument("--target")
    t.add_argument("--resume", help="continue from an epoch checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on its held-out domain")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.set_defaults(func=cmd_evaluate)

    lo = sub.add_parser("lodo", help="leave-one-domain-out campaign")
    common(lo)
    train_flags(lo)
    lo.add_argument("--seeds", type=int, help="runs per split")
    lo.add_argument("--closed-set", action="store_true")
    lo.add_argument("--targets", nargs="+")
    lo.set_defaults(func=cmd_lodo)

    d = sub.add_parser("diagnose", help="cosine table, Frechet matrix, openness sweep")
    common(d)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--compare", help="second checkpoint for a paired cosine table")
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, DataError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except ODGError as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        logger.exception("unexpected failure")
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
