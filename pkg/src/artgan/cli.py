"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 I/O or format error, 3 verification
failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .data import FormatError, parse_dataset_spec, split_train_test
from .evaluation import (DEFAULT_SIGMA_GRID, LinearProbe, ParzenModel, class_fidelity, format_report,
                         generate_images, make_grid, nearest_neighbour, parzen_ll, select_sigma, write_grid)
from .nn import GradCheckError
from .tensor import Rng
from .train import ConfigFileError, TrainConfig, Trainer, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_dataset_args(p, default_split):
    p.add_argument("--dataset", required=True,
                   help="synth:K=3,per_class=500,seed=0 | cifar10:<dir> | dir:<root>")
    p.add_argument("--test-frac", type=float, default=0.3, help="held-out fraction of each class (default 0.3)")
    p.add_argument("--split-seed", type=int, default=0, help="seed of the stratified split (default 0)")
    p.add_argument("--split", choices=["train", "test"], default=default_split,
                   help=f"which side of the split to use (default {default_split})")


def build_parser():
    parser = Parser(prog="artgan", description="Label-feedback GAN: training, sampling and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("train", help="train from a key = value config file")
    p.add_argument("config", help="config file (key = value lines, # comments)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value; repeatable")
    p.add_argument("--epochs", type=int, help="override epochs")
    p.add_argument("--seed", type=int, help="override seed")
    p.add_argument("--out", help="override out_dir")
    p.add_argument("--resume", help="continue from this checkpoint")

    p = sub.add_parser("generate", help="sample a grid of images for one or all classes")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--class", dest="klass", type=int, help="class to draw, 1..K")
    g.add_argument("--all-classes", action="store_true", help="one row per class")
    p.add_argument("--count", type=int, default=8, help="images per class (default 8)")
    p.add_argument("--cols", type=int, help="grid columns (default: --count)")
    p.add_argument("--seed", type=int, default=0, help="noise seed (default 0)")
    p.add_argument("--out", required=True, help="output PPM path")

    p = sub.add_parser("reconstruct", help="Dec(Enc(x)) next to x for dataset images")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    _add_dataset_args(p, "test")
    p.add_argument("--count", type=int, default=8, help="number of images (default 8)")
    p.add_argument("--seed", type=int, default=0, help="seed for picking images (default 0)")
    p.add_argument("--out", required=True, help="output PPM path")

    p = sub.add_parser("eval-parzen", help="Parzen-window log-likelihood of held-out images")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    _add_dataset_args(p, "test")
    p.add_argument("--samples", type=int, default=10000, help="generated kernel centres (default 10000)")
    p.add_argument("--validation", type=int, default=1000,
                   help="training images used to pick sigma (default 1000)")
    p.add_argument("--sigma-grid", help="comma-separated sigma values (default: 20 log-spaced in [0.01, 1])")
    p.add_argument("--seed", type=int, default=0, help="seed (default 0)")
    p.add_argument("--report", help="also write the report to this file")

    p = sub.add_parser("nearest", help="pair generated images with their nearest training images")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    _add_dataset_args(p, "train")
    p.add_argument("--count", type=int, default=8, help="number of generated queries (default 8)")
    p.add_argument("--seed", type=int, default=0, help="seed (default 0)")
    p.add_argument("--out", required=True, help="output PPM path")

    p = sub.add_parser("fidelity", help="agreement between assigned class and a linear probe")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    _add_dataset_args(p, "train")
    p.add_argument("--samples-per-class", type=int, default=1000, help="generated images per class (default 1000)")
    p.add_argument("--seed", type=int, default=0, help="seed (default 0)")

    p = sub.add_parser("gradcheck", help="finite-difference check of both networks at width 1/32")
    p.add_argument("--seed", type=int, default=7, help="seed (default 7)")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error (default 1e-4)")
    p.add_argument("--coords", type=int, default=200, help="coordinates per tensor (default 200)")
    p.add_argument("--step", type=float, default=1e-5, help="finite-difference step in [1e-7, 1e-4] (default 1e-5)")

    p = sub.add_parser("info", help="print checkpoint metadata")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    return parser


def _load_trainer(path):
    return Trainer.from_checkpoint(ckpt.load(path))


def _dataset(args):
    full = parse_dataset_spec(args.dataset)
    train_set, test_set = split_train_test(full, args.test_frac, args.split_seed)
    return train_set, test_set, (train_set if args.split == "train" else test_set)


def _positive(value, flag):
    if value < 1:
        raise UsageError(f"{flag} must be >= 1")


def cmd_train(args):
    overrides = {}
    for item in args.set:
        key, eq, value = item.partition("=")
        if not eq:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    for key, value in (("epochs", args.epochs), ("seed", args.seed), ("out_dir", args.out), ("resume", args.resume)):
        if value is not None:
            overrides[key] = str(value)
    try:
        config = TrainConfig.load(args.config, overrides)
    except ConfigFileError as e:
        raise UsageError(str(e)) from None
    trainer = train(config)
    print(f"trained {trainer.epoch} epochs, {trainer.step} steps; checkpoint {Path(config.out_dir) / 'final.ckpt'}")


def cmd_generate(args):
    if args.klass is not None and args.klass < 1:
        raise UsageError("--class must be in 1..K")
    _positive(args.count, "--count")
    model = _load_trainer(args.checkpoint).model
    K = model.config.K
    if args.klass is not None and args.klass > K:
        raise UsageError(f"--class must be in 1..{K}")
    classes = np.arange(1, K + 1) if args.all_classes else np.array([args.klass])
    images = generate_images(model, np.repeat(classes, args.count), Rng(args.seed))
    write_grid(images, args.cols or args.count, args.out)
    print(f"wrote {len(images)} images to {args.out}")


def cmd_reconstruct(args):
    _positive(args.count, "--count")
    model = _load_trainer(args.checkpoint).model
    _, _, ds = _dataset(args)
    idx = np.sort(Rng(args.seed).permutation(len(ds))[:args.count])
    x = ds.images[idx]
    rec = model.reconstruct(x, mode="eval")
    pairs = np.stack([x, rec], axis=1).reshape(-1, *x.shape[1:])
    write_grid(pairs, 2, args.out)
    err = np.sum((rec - x) ** 2, axis=(1, 2, 3))
    print(format_report([("reconstruction_l2", float(err.mean()), float(err.std(ddof=1) / np.sqrt(err.size))
                          if err.size > 1 else 0.0)]), end="")


def cmd_eval_parzen(args):
    _positive(args.samples, "--samples")
    _positive(args.validation, "--validation")
    try:
        grid = [float(s) for s in args.sigma_grid.split(",")] if args.sigma_grid else list(DEFAULT_SIGMA_GRID)
    except ValueError:
        raise UsageError("--sigma-grid must be comma-separated numbers") from None
    model = _load_trainer(args.checkpoint).model
    train_set, _, ds = _dataset(args)
    rng = Rng(args.seed)
    K = model.config.K
    samples = generate_images(model, rng.integers(1, K + 1, size=args.samples), rng)
    val_idx = np.sort(rng.permutation(len(train_set))[:args.validation])
    sigma = select_sigma(samples, train_set.images[val_idx], grid)
    ll = parzen_ll(ParzenModel(samples, sigma), ds.images)
    report = format_report([("sigma", sigma, float("nan")), ("parzen_ll", ll.mean, ll.stderr)])
    print(report, end="")
    if args.report:
        Path(args.report).write_text(report, encoding="utf-8")


def cmd_nearest(args):
    _positive(args.count, "--count")
    model = _load_trainer(args.checkpoint).model
    _, _, corpus = _dataset(args)
    rng = Rng(args.seed)
    K = model.config.K
    classes = (np.arange(args.count) % K) + 1
    queries = generate_images(model, classes, rng)
    idx, dist = nearest_neighbour(queries, corpus.images)
    pairs = np.stack([queries, corpus.images[idx]], axis=1).reshape(-1, *queries.shape[1:])
    write_grid(pairs, 2, args.out)
    for q, (i, d) in enumerate(zip(idx, dist)):
        print(f"{q}\t{int(i)}\t{d!r}")


def cmd_fidelity(args):
    _positive(args.samples_per_class, "--samples-per-class")
    model = _load_trainer(args.checkpoint).model
    train_set, test_set, ds = _dataset(args)
    if ds.K != model.config.K:
        raise UsageError(f"dataset has K={ds.K}, checkpoint has K={model.config.K}")
    probe = LinearProbe(ds.K).fit(ds.images, ds.labels)
    report = class_fidelity(model, probe, args.samples_per_class, Rng(args.seed))
    report.probe_accuracy = probe.accuracy(test_set.images, test_set.labels)
    print(format_report(report.rows()), end="")


def cmd_gradcheck(args):
    from .verify import run_suite
    if not 1e-7 <= args.step <= 1e-4:
        raise UsageError("--step must lie in [1e-7, 1e-4]")
    _positive(args.coords, "--coords")
    failed = False
    for label, rep in run_suite(seed=args.seed, h=args.step, max_coords=args.coords):
        ok = rep.passed(args.tol)
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'}\t{label}\tmax_rel_error={rep.max_rel_error:.3e}\t"
              f"worst={rep.worst}\tkink_skips={rep.kinks_skipped}")
        for line in rep.lines():
            print(f"\t{line}")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_info(args):
    ck = ckpt.load(args.checkpoint)
    c = ck.config
    print(f"K\t{c.K}\nd\t{c.d}\nwidth_mult\t{c.width_mult}\nimage_size\t{c.image_size}\n"
          f"leaky_alpha\t{c.leaky_alpha}\nepoch\t{ck.epoch}\nstep\t{ck.step}\nrng_seed\t{ck.rng_seed}")
    for section in ckpt.SECTIONS:
        tensors = ck.tensors[section]
        print(f"{section}\t{len(tensors)} tensors\t{sum(a.size for a in tensors.values())} values")
    for which, (steps, lr, rho, eps) in ck.optim_scalars.items():
        print(f"optim_{which}\tsteps={steps}\tlr={lr!r}\trho={rho!r}\teps={eps!r}")


COMMANDS = {
    "train": cmd_train, "generate": cmd_generate, "reconstruct": cmd_reconstruct,
    "eval-parzen": cmd_eval_parzen, "nearest": cmd_nearest, "fidelity": cmd_fidelity,
    "gradcheck": cmd_gradcheck, "info": cmd_info,
}


def run(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args) or EXIT_OK
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError, ckpt.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except GradCheckError as e:
        print(f"verification failure: {e}", file=sys.stderr)
        return EXIT_VERIFY
    except ValueError as e:  # bad dataset contents or a model/data mismatch
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except SystemExit as e:  # --help
        return int(e.code or 0)


def main():
    sys.exit(run())
