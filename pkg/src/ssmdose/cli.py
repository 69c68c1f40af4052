"""Command-line entry point: ``ssmdose gen | train | sample | eval``.

Every subcommand exits 0 on success. On failure it prints a single line
``error: <kind>: <message>`` to stderr and exits 1 (2 for bad arguments).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import container
from .metrics import dvh_curve, evaluate, structures_of, write_dvh_csv, write_metric_csv
from .phantoms import (
    STRUCTURE_NAMES,
    PhantomSpec,
    build_dataset,
    dataset_checksum,
    dataset_entries,
    load_sample,
    load_split,
    read_manifest,
    split_counts,
)
from .training import (
    RunConfig,
    Trainer,
    load_model,
    parameter_report,
    predict_doses,
)

logger = logging.getLogger("ssmdose")

DEFAULT_TOTAL = 75  # 50 / 5 / 20, the 200/20/80 ratio at a quarter scale
CHECKPOINT = "checkpoint.bin"


class CliError(Exception):
    """A user-facing failure with a one-line message."""


def _load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        return RunConfig.load(path)
    except FileNotFoundError:
        raise CliError(f"config file {path} not found") from None
    except (TypeError, json.JSONDecodeError) as exc:
        raise CliError(f"invalid config {path}: {exc}") from None


def _check_dir(path: Path, force: bool, what: str) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise CliError(f"{what} directory {path} is not empty (use --force to replace)")


def _prepare_dir(path: Path, force: bool, what: str) -> None:
    _check_dir(path, force, what)
    if path.exists() and any(path.iterdir()):
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


# -- gen -------------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _load_config(args.config)
    model_cfg = replace(cfg.model, image_size=args.size)
    try:
        model_cfg.validate()
    except ValueError as exc:
        raise CliError(f"--size {args.size}: {exc}") from None
    if args.n_train is not None:
        counts = (args.n_train, args.n_val or 1, args.n_test or 1)
    else:
        counts = split_counts(args.total)
    template = PhantomSpec(H=args.size, W=args.size)
    out = Path(args.out)
    build_dataset(out, *counts, base_seed=args.seed, template=template, overwrite=args.force)
    print(f"dataset {out}: train={counts[0]} val={counts[1]} test={counts[2]} size={args.size} seed={args.seed}")
    print(f"sha256 {dataset_checksum(out)}")
    return 0


# -- train -----------------------------------------------------------------------


LOSS_HEADER = ("epoch", "step", "loss", "lr", "seconds")


def cmd_train(args) -> int:
    run = Path(args.out)
    ckpt = run / CHECKPOINT
    if args.resume:
        if not ckpt.exists():
            raise CliError(f"--resume: no checkpoint at {ckpt}")
        data = Path(args.data or RunConfig.load(run / "config.json").data)
        train_set = load_split(data, "train")
        trainer = Trainer.restore(ckpt, train_set)
        cfg = trainer.cfg
        if args.epochs is not None:
            cfg.epochs = args.epochs
            cfg.validate()
        logger.info("resuming %s at epoch %d", run, trainer.epoch)
    else:
        cfg = _load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.epochs is not None:
            cfg.epochs = args.epochs
        if args.data is not None:
            cfg.data = args.data
        try:
            cfg.validate()
        except ValueError as exc:
            raise CliError(f"invalid config: {exc}") from None
        _check_dir(run, args.force, "run")
        read_manifest(cfg.data)
        _prepare_dir(run, args.force, "run")
        train_set = load_split(cfg.data, "train")
        trainer = Trainer(cfg, train_set)
        (run / "config.json").write_text(cfg.dumps())
        with open(run / "loss.csv", "w", newline="") as fh:
            csv.writer(fh).writerow(LOSS_HEADER)

    report = parameter_report(trainer.model)
    print(
        f"parameters total={report['total']} unet={report['unet']} "
        f"structure_encoder={report['structure_encoder']}"
    )
    times: list[float] = []
    with open(run / "loss.csv", "a", newline="") as fh:
        writer = csv.writer(fh)

        def log_step(rec):
            writer.writerow((rec.epoch, rec.step, repr(rec.loss), repr(rec.lr), f"{rec.seconds:.4f}"))
            times.append(rec.seconds)

        while trainer.epoch < cfg.epochs:
            recs = trainer.train_epoch(log_step)
            fh.flush()
            trainer.save(ckpt)
            if cfg.keep_every and trainer.epoch % cfg.keep_every == 0:
                shutil.copyfile(ckpt, run / f"checkpoint_e{trainer.epoch:04d}.bin")
            mean_loss = float(np.mean([r.loss for r in recs]))
            print(f"epoch {trainer.epoch - 1} loss {mean_loss:.4f} lr {recs[0].lr:.3g}", flush=True)

    if times:
        sec = float(np.mean(times))
        print(f"timing {sec:.4f} s/iter over {len(times)} iterations (batch {cfg.batch_size})")
        (run / "report.json").write_text(
            json.dumps({"parameters": report, "seconds_per_iter": sec, "iterations": len(times)}, indent=2) + "\n"
        )
    print(f"checkpoint {ckpt}")
    return 0


# -- sample ----------------------------------------------------------------------


def _write_dose(path: Path, dose: np.ndarray, meta: dict) -> None:
    container.save(path, {"dose": np.asarray(dose, dtype=np.float64)}, meta)


def cmd_sample(args) -> int:
    model, cfg = load_model(args.checkpoint)
    entries = dataset_entries(args.data, args.split)
    n = len(entries) if args.n is None else args.n
    if not 1 <= n <= len(entries):
        raise CliError(f"--n {n} but split {args.split!r} has {len(entries)} samples")
    samples = [load_sample(args.data, i, args.split) for i in range(n)]
    got = samples[0].structure.shape
    want = (cfg.model.cond_channels, cfg.model.image_size, cfg.model.image_size)
    if got != want:
        raise CliError(f"dataset structures have shape {got} but checkpoint model expects {want}")
    stride = args.stride or cfg.sample_stride

    out = Path(args.out)
    _prepare_dir(out, args.force, "output")
    (out / "reference").mkdir()
    rng = np.random.default_rng(args.seed)
    sched = cfg.make_schedule()
    outside, per_step = [], []
    with open(out / "diagnostics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("batch", "t", "mean", "std"))
        for b0 in range(0, n, args.batch):
            chunk = samples[b0 : b0 + args.batch]
            pred = predict_doses(
                model, np.stack([s.structure for s in chunk]), sched, rng, stride, prediction=cfg.prediction
            )
            for t, m, s in pred.diagnostics:
                w.writerow((b0 // args.batch, t, repr(m), repr(s)))
            outside.append((pred.outside_fraction, len(chunk)))
            per_step.append(pred.seconds_per_step)
            for j, ph in enumerate(chunk):
                e = entries[b0 + j]
                meta = {"id": e["id"], "seed": e["seed"]}
                _write_dose(out / f"{e['id']}.bin", pred.dose[j], {**meta, "kind": "prediction"})
                _write_dose(out / "reference" / f"{e['id']}.bin", ph.dose, {**meta, "kind": "reference"})
    frac = sum(f * k for f, k in outside) / n
    summary = {
        "checkpoint": str(args.checkpoint),
        "split": args.split,
        "n": n,
        "seed": args.seed,
        "stride": stride,
        "outside_fraction": frac,
        "seconds_per_step": float(np.mean(per_step)),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"sampled {n} dose maps to {out}")
    print(f"outside [0, 1.2] before clipping: {frac:.6f}")
    print(f"timing {summary['seconds_per_step']:.4f} s/step")
    return 0


# -- eval ------------------------------------------------------------------------


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred)
    entries = dataset_entries(args.data, args.split)
    if args.n is not None:
        if not 1 <= args.n <= len(entries):
            raise CliError(f"--n {args.n} but split {args.split!r} has {len(entries)} samples")
        entries = entries[: args.n]
    missing = [e["id"] for e in entries if not (pred_dir / f"{e['id']}.bin").exists()]
    if missing:
        raise CliError(f"missing predictions for sample ids {','.join(missing)} in {pred_dir}")
    out = Path(args.out or pred_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, curves = [], []
    for i, e in enumerate(entries):
        ph = load_sample(args.data, i, args.split)
        arrays, _ = container.load(pred_dir / f"{e['id']}.bin")
        pred = arrays["dose"]
        if pred.shape != ph.dose.shape:
            raise CliError(f"prediction {e['id']} has shape {pred.shape}, reference {ph.dose.shape}")
        rep = evaluate(pred[0], ph.dose[0], ph.body, ph.structure, STRUCTURE_NAMES)
        rows.append((e["id"], rep))
        top = float(max(pred.max(), ph.dose.max()))
        for name, mask, _ in structures_of(ph.structure, STRUCTURE_NAMES):
            curves.append((e["id"], f"{name}/pred", dvh_curve(pred[0], mask, max_dose=top)))
            curves.append((e["id"], f"{name}/ref", dvh_curve(ph.dose[0], mask, max_dose=top)))
        print(f"{e['id']} dose_score {rep.dose_score:.6f} dvh_score {rep.dvh_score:.6f} hi {rep.hi:.6f}")
    summary = write_metric_csv(out / "metrics.csv", rows)
    write_dvh_csv(out / "dvh.csv", curves)
    for k, (m, s) in summary.items():
        print(f"{k} {m:.6f} +- {s:.6f}")
    return 0


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssmdose", description="Mamba-based diffusion dose prediction on phantoms.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a phantom dataset")
    g.add_argument("--out", required=True, help="dataset directory")
    g.add_argument("--seed", type=int, default=0, help="seed of the first phantom")
    g.add_argument("--size", type=int, default=64, help="image height and width")
    g.add_argument("--total", type=int, default=DEFAULT_TOTAL, help="total phantoms, split 200:20:80")
    g.add_argument("--n-train", type=int, help="explicit train count (overrides --total)")
    g.add_argument("--n-val", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--config", help="run config whose model checks --size")
    g.add_argument("--force", action="store_true", help="replace an existing dataset")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the denoiser")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--data", help="dataset directory (overrides the config)")
    t.add_argument("--config", help="JSON run config")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")
    t.add_argument("--force", action="store_true", help="replace an existing run directory")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="sample dose maps for a dataset split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--n", type=int, help="number of samples (default: whole split)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--stride", type=int, help="reverse-step stride (default: from the config)")
    s.add_argument("--batch", type=int, default=16)
    s.add_argument("--out", required=True, help="prediction directory")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score predictions against the reference dose")
    e.add_argument("--pred", required=True, help="prediction directory")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--n", type=int, help="evaluate only the first n samples of the split")
    e.add_argument("--out", help="where to write metrics.csv and dvh.csv (default: --pred)")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: InvalidArgument: {exc}", file=sys.stderr)
    except (FileNotFoundError, FileExistsError, IndexError, KeyError, ValueError, FloatingPointError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
