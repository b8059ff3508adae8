"""Command-line pipeline: train -> sample/distill -> fid / train-classifier /
eval -> report.

Commands communicate only through files. Flags beat config-file values; the
config file comes from --config or the DD_CONFIG environment variable.
Exit codes: 0 success, 2 configuration/usage error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import asdict

import numpy as np

from . import (datastore, denoiser, distillery, downstream, metrics, plotting,
               sampler, schedule as sched_mod, toydata, trainer)
from .errors import ConfigError, DataError, NumericError

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


# ---------------------------------------------------------------------------
# shared option plumbing


def _pick(flag_value, file_cfg: dict, key: str, default):
    """Resolution order: command-line flag, config file, built-in default."""
    if flag_value is not None:
        return flag_value
    if key in file_cfg:
        return file_cfg[key]
    return default


def _build_schedule(args, fc) -> sched_mod.NoiseSchedule:
    return sched_mod.build_schedule(
        _pick(args.schedule_kind, fc, "schedule.kind", "linear"),
        _pick(args.schedule_steps, fc, "schedule.steps", 1000),
        _pick(args.beta_start, fc, "schedule.beta_start", 1e-4),
        _pick(args.beta_end, fc, "schedule.beta_end", 0.02))


def _build_model_config(args, fc, image_size, channels, num_classes,
                        max_steps) -> denoiser.DenoiserConfig:
    preset = _pick(args.preset, fc, "model.preset", None)
    patch = _pick(args.patch, fc, "model.patch", None)
    skip_mode = _pick(args.skip_mode, fc, "model.skip_mode", "add")
    explicit = {
        "layers": _pick(args.layers, fc, "model.layers", None),
        "hidden": _pick(args.hidden, fc, "model.hidden", None),
        "mlp": _pick(args.mlp, fc, "model.mlp", None),
        "heads": _pick(args.heads, fc, "model.heads", None),
    }
    given = {k: v for k, v in explicit.items() if v is not None}
    if preset is None and len(given) < 4:
        preset = "tiny"
    base = dict(denoiser.PRESETS[preset]) if preset is not None else {}
    base.update(given)
    if patch is None:
        patch = 2 if image_size[0] <= 32 else 4
    return denoiser.DenoiserConfig(patch=patch, image_size=image_size,
                                   channels=channels, num_classes=num_classes,
                                   max_steps=max_steps, skip_mode=skip_mode, **base)


def _sampler_config(args, fc, sched_steps) -> sampler.SamplerConfig:
    steps = _pick(args.steps, fc, "sample.steps", min(50, sched_steps))
    return sampler.SamplerConfig(
        method=_pick(args.method, fc, "sample.method", "fast-ode"),
        steps=steps,
        variance=_pick(args.variance, fc, "sample.variance", "beta-tilde"),
        guidance=_pick(args.guidance, fc, "sample.guidance", 1.0),
        seed=_pick(args.seed, fc, "sample.seed", 0),
        order=_pick(args.order, fc, "sample.order", 2))


def _add_sampler_flags(p):
    p.add_argument("--method", choices=sampler.METHODS, help="sampling method")
    p.add_argument("--steps", type=int, help="solver/chain step count")
    p.add_argument("--variance", choices=sampler.VARIANCE_MODES,
                   help="ancestral noise variance mode")
    p.add_argument("--guidance", type=float, help="guidance scale (1.0 = off)")
    p.add_argument("--order", type=int, choices=(1, 2), help="fast solver order")
    p.add_argument("--seed", type=int, help="sampling seed")
    p.add_argument("--use-ema", action="store_true",
                   help="sample with EMA weights when the checkpoint has them")
    p.add_argument("--workers", type=int, default=1, help="parallel sampling workers")


def _load_denoiser(path, use_ema=False):
    ckpt = datastore.read_checkpoint(path)
    if ckpt.kind != "denoiser":
        raise DataError(f"{path}: checkpoint kind {ckpt.kind!r}, expected 'denoiser'")
    model_cfg = trainer.model_config_from_dict(ckpt.config["model"])
    sched = sched_mod.schedule_from_dict(ckpt.config["schedule"])
    tensors = ckpt.tensors
    if use_ema:
        if not ckpt.ema:
            raise DataError(f"{path}: no EMA weights in checkpoint")
        tensors = ckpt.ema
    denoiser.audit_shapes(model_cfg, tensors)
    return denoiser.Denoiser(config=model_cfg, params=tensors), sched, ckpt


def _classifier_config_from(args, fc, data: datastore.Dataset,
                            epochs_default=100) -> downstream.ConvNetConfig:
    h, w, c = data.image_shape
    return downstream.ConvNetConfig(
        num_classes=data.num_classes, image_size=(h, w), channels=c,
        blocks=_pick(args.blocks, fc, "classifier.blocks", default_blocks(h, w)),
        width=_pick(args.width, fc, "classifier.width", 64),
        epochs=_pick(args.epochs, fc, "classifier.epochs", epochs_default),
        lr=_pick(args.lr, fc, "classifier.lr", 1e-3),
        weight_decay=_pick(args.clf_weight_decay, fc, "classifier.weight_decay", 0.0),
        batch_size=_pick(args.batch_size, fc, "classifier.batch_size", 64),
        augment=bool(_pick(getattr(args, "augment", None) or None, fc,
                           "classifier.augment", False)))


def default_blocks(h, w):
    return max(1, min(3, min(h, w).bit_length() - 2))


def _get_extractor(args, fc, real: datastore.Dataset, cache_path=None):
    """Load a cached feature extractor or train one on the real data."""
    if cache_path and os.path.exists(cache_path):
        ckpt = datastore.read_checkpoint(cache_path)
        if ckpt.kind != "extractor":
            raise DataError(f"{cache_path}: not an extractor checkpoint")
        cfg_d = dict(ckpt.config)
        cfg_d["image_size"] = tuple(cfg_d["image_size"])
        cfg = downstream.ConvNetConfig(**cfg_d)
        return metrics.FeatureExtractor(
            config=cfg, params=ckpt.tensors,
            fingerprint=metrics.extractor_fingerprint(cfg, ckpt.tensors))
    ext = metrics.build_feature_extractor(
        real,
        seed=_pick(getattr(args, "extractor_seed", None), fc, "fid.extractor_seed", 7),
        width=_pick(getattr(args, "extractor_width", None), fc, "fid.extractor_width", 64),
        epochs=_pick(getattr(args, "extractor_epochs", None), fc, "fid.extractor_epochs", 20))
    if cache_path:
        cfg_d = asdict(ext.config)
        cfg_d["image_size"] = list(ext.config.image_size)
        datastore.write_checkpoint(
            datastore.Checkpoint(kind="extractor", config=cfg_d,
                                 tensors=ext.params), cache_path)
    return ext


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    fc = datastore.load_config(args.config)
    data = datastore.read_dataset(args.data)
    os.makedirs(args.out_dir, exist_ok=True)
    sched = _build_schedule(args, fc)
    cfg = trainer.TrainConfig(
        lr=_pick(args.lr, fc, "train.lr", 2e-4),
        weight_decay=_pick(args.weight_decay, fc, "train.weight_decay", 0.03),
        beta1=_pick(args.beta1, fc, "train.beta1", 0.99),
        beta2=_pick(args.beta2, fc, "train.beta2", 0.999),
        batch_size=_pick(args.batch_size, fc, "train.batch_size", 64),
        iterations=_pick(args.iterations, fc, "train.iterations", 10_000),
        fid_every=_pick(args.fid_every, fc, "train.fid_every", 1000),
        checkpoint_every=_pick(args.checkpoint_every, fc, "train.checkpoint_every", 1000),
        seed=_pick(args.seed, fc, "train.seed", 0),
        ema=bool(_pick(args.ema or None, fc, "train.ema", False)),
        ema_decay=_pick(args.ema_decay, fc, "train.ema_decay", 0.9999),
        grad_accum=_pick(args.grad_accum, fc, "train.grad_accum", 1),
        uncond_prob=_pick(args.uncond_prob, fc, "train.uncond_prob", 0.0))
    h, w, ch = data.image_shape
    model_cfg = _build_model_config(args, fc, (h, w), ch, data.num_classes,
                                    sched.steps)
    if args.resume and args.warm_start:
        raise ConfigError("--resume conflicts with --warm-start; pick one")

    start_iteration, opt_state, ema = 0, None, None
    if args.resume:
        ckpt = datastore.read_checkpoint(args.resume)
        resumed_cfg = trainer.model_config_from_dict(ckpt.config["model"])
        if resumed_cfg != model_cfg:
            raise ConfigError("--resume checkpoint was produced by a different "
                              "model configuration")
        params = ckpt.tensors
        if ckpt.opt_m is None:
            raise DataError(f"{args.resume}: checkpoint has no optimizer state")
        opt_state = trainer.OptimizerState(m=ckpt.opt_m, v=ckpt.opt_v,
                                           step=ckpt.opt_step)
        ema = ckpt.ema
        start_iteration = ckpt.iteration
    else:
        params = denoiser.init_params(model_cfg,
                                      datastore.seed_substream(cfg.seed, "init"))
        if args.warm_start:
            ckpt = datastore.read_checkpoint(args.warm_start)
            params = trainer.warm_start(params, ckpt, skip=args.skip or ())

    fid_fn = None
    if not args.no_fid:
        ext = _get_extractor(args, fc, data,
                             cache_path=os.path.join(args.out_dir, "extractor.ddck"))
        ref_path = os.path.join(args.out_dir, "ref_stats.ddgs")
        if os.path.exists(ref_path):
            ref, ref_fp = metrics.load_stats(ref_path)
            if ref_fp != ext.fingerprint:
                raise DataError(f"{ref_path}: extractor fingerprint mismatch")
        else:
            ref = metrics.reference_stats(data, ext)
            metrics.save_stats(ref, ext.fingerprint, ref_path)
        n_fid = _pick(args.fid_samples, fc, "fid.n_samples", 256)
        fid_batch = _pick(args.fid_batch, fc, "fid.batch_size", 128)
        fid_cfg = sampler.SamplerConfig(method="fast-ode",
                                        steps=min(50, sched.steps),
                                        seed=cfg.seed)

        def fid_fn(params_now, iteration):
            model = denoiser.Denoiser(config=model_cfg, params=params_now)
            return metrics.fid_eval(model, sched, ext, ref, n_fid, fid_cfg,
                                    reference_fingerprint=ext.fingerprint,
                                    batch_size=fid_batch)

    log = trainer.MetricLog(os.path.join(args.out_dir, "metrics.csv"),
                            append=start_iteration > 0)
    ckpt_path = os.path.join(args.out_dir, "checkpoint.ddck")
    result = trainer.train(params, data, cfg, model_cfg, sched,
                           fid_fn=fid_fn, checkpoint_path=ckpt_path,
                           metric_log=log, opt_state=opt_state, ema=ema,
                           start_iteration=start_iteration)
    losses = [r["loss"] for r in result.log if r["loss"] is not None]
    print(f"trained {cfg.iterations} iterations; checkpoint: {ckpt_path}")
    if losses:
        print(f"final loss {losses[-1]:.4f}")
    fids = [(r["iteration"], r["fid"]) for r in result.log if r["fid"] is not None]
    for it, v in fids:
        print(f"fid @ {it}: {v:.4f}")
    return 0


def _parse_labels(args, num_classes) -> np.ndarray:
    modes = [args.per_class is not None, args.labels is not None,
             args.count is not None]
    if sum(modes) != 1:
        raise ConfigError("specify exactly one of --per-class, --labels, --count")
    if args.per_class is not None:
        if args.per_class < 1:
            raise ConfigError("--per-class must be >= 1")
        return np.arange(num_classes * args.per_class) % num_classes
    if args.count is not None:
        if args.count < 1:
            raise ConfigError("--count must be >= 1")
        return np.arange(args.count) % num_classes
    try:
        return np.array([int(tok) for tok in args.labels.split(",") if tok.strip()],
                        dtype=np.int64)
    except ValueError as exc:
        raise ConfigError(f"--labels must be comma-separated integers: {exc}") from exc


def cmd_sample(args) -> int:
    fc = datastore.load_config(args.config)
    model, sched, _ = _load_denoiser(args.ckpt, use_ema=args.use_ema)
    cfg = _sampler_config(args, fc, sched.steps)
    labels = _parse_labels(args, model.config.num_classes)
    batch = sampler.sample_class_batch(model, sched, labels, cfg,
                                       workers=args.workers)
    ds = datastore.Dataset(images=batch.images, labels=batch.labels,
                           num_classes=model.config.num_classes)
    datastore.write_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    return 0


def cmd_distill(args) -> int:
    fc = datastore.load_config(args.config)
    model, sched, _ = _load_denoiser(args.ckpt, use_ema=args.use_ema)
    cfg = _sampler_config(args, fc, sched.steps)
    ipc = _pick(args.ipc, fc, "distill.ipc", None)
    seconds = _pick(args.budget_seconds, fc, "distill.budget_seconds", None)
    if (ipc is None) == (seconds is None):
        raise ConfigError("specify exactly one of --ipc or --budget-seconds")
    budget = (distillery.Budget(mode="ipc", ipc=ipc) if ipc is not None
              else distillery.Budget(mode="wall-clock", seconds=seconds))
    gen_batch = _pick(args.gen_batch, fc, "distill.batch_size", 32)
    result = distillery.distill(model, sched, cfg, budget,
                                gen_batch=gen_batch, workers=args.workers)
    result.save(args.out, model.config.num_classes)
    counts = result.per_class_counts(model.config.num_classes)
    print(f"distilled {len(result)} images to {args.out} "
          f"(per-class {counts.min()}..{counts.max()})")
    print(f"wall seconds: {result.manifest['wall_seconds']}")
    print(f"images/second: {result.manifest['images_per_second']}")
    return 0


def cmd_fid(args) -> int:
    fc = datastore.load_config(args.config)
    model, sched, _ = _load_denoiser(args.ckpt, use_ema=args.use_ema)
    real = datastore.read_dataset(args.data)
    ext = _get_extractor(args, fc, real, cache_path=args.extractor)
    if args.ref_stats and os.path.exists(args.ref_stats):
        ref, ref_fp = metrics.load_stats(args.ref_stats)
    else:
        ref = metrics.reference_stats(real, ext)
        ref_fp = ext.fingerprint
        if args.ref_stats:
            metrics.save_stats(ref, ref_fp, args.ref_stats)
    cfg = _sampler_config(args, fc, sched.steps)
    n = _pick(args.n_samples, fc, "fid.n_samples", 256)
    batch = _pick(args.batch, fc, "fid.batch_size", 128)
    value = metrics.fid_eval(model, sched, ext, ref, n, cfg,
                             reference_fingerprint=ref_fp, batch_size=batch)
    print(f"fid {value:.6f}")
    return 0


def cmd_train_classifier(args) -> int:
    fc = datastore.load_config(args.config)
    data = datastore.read_dataset(args.data)
    cfg = _classifier_config_from(args, fc, data)
    params = downstream.train_classifier(data, cfg, seed=args.seed)
    cfg_d = asdict(cfg)
    cfg_d["image_size"] = list(cfg.image_size)
    datastore.write_checkpoint(
        datastore.Checkpoint(kind="classifier", config=cfg_d, tensors=params,
                             extra={"train_fingerprint": data.fingerprint(),
                                    "seed": args.seed}),
        args.out)
    acc = downstream.evaluate(params, cfg, data)
    print(f"classifier saved to {args.out} (train accuracy {acc:.4f})")
    return 0


def _budget_label(train_path, size) -> str:
    manifest = f"{os.fspath(train_path)}.manifest.txt"
    if os.path.exists(manifest):
        fields = {}
        with open(manifest, encoding="utf-8") as f:
            for line in f:
                if "=" in line:
                    k, v = line.split("=", 1)
                    fields[k.strip()] = v.strip()
        if fields.get("budget.mode") == "ipc":
            return f"ipc={fields.get('budget.ipc')}"
        if fields.get("budget.mode") == "wall-clock":
            return f"seconds={fields.get('budget.seconds')}"
    return f"n={size}"


def cmd_eval(args) -> int:
    fc = datastore.load_config(args.config)
    test = datastore.read_dataset(args.data)
    single = args.classifier is not None
    proto = args.train_data is not None
    if single == proto:
        raise ConfigError("specify exactly one of --classifier (single model) "
                          "or --train-data (full protocol)")
    if single:
        for flag in ("seeds", "baseline_data", "out_prefix", "ledger"):
            if getattr(args, flag) not in (None,):
                raise ConfigError(f"--{flag.replace('_', '-')} requires --train-data mode")
        ckpt = datastore.read_checkpoint(args.classifier)
        if ckpt.kind != "classifier":
            raise DataError(f"{args.classifier}: not a classifier checkpoint")
        cfg_d = dict(ckpt.config)
        cfg_d["image_size"] = tuple(cfg_d["image_size"])
        cfg = downstream.ConvNetConfig(**cfg_d)
        acc = downstream.evaluate(ckpt.tensors, cfg, test)
        print(f"accuracy {acc:.4f}")
        return 0

    train_ds = datastore.read_dataset(args.train_data)
    if train_ds.num_classes != test.num_classes:
        raise DataError("train/test class counts differ")
    cfg = _classifier_config_from(args, fc, train_ds)
    seeds = args.seeds if args.seeds is not None else _pick(None, fc, "classifier.seeds", 3)
    baseline = datastore.read_dataset(args.baseline_data) if args.baseline_data else None
    label = args.label or _budget_label(args.train_data, len(train_ds))
    report = downstream.protocol(train_ds, test, cfg, seeds=seeds,
                                 baseline_source=baseline, label=label)
    for line in report.lines():
        print(line)
    if args.out_prefix:
        _write_eval_report(report, args.out_prefix)
    if args.ledger:
        dd = distillery.DistilledDataset(
            images=train_ds.images, labels=train_ds.labels,
            manifest={"fingerprint": report.train_fingerprint})
        for acc in report.accuracies:
            distillery.risk_proxy(dd, acc, args.ledger)
    return 0


def _write_eval_report(report: downstream.EvalReport, prefix) -> None:
    prefix = os.fspath(prefix)
    with open(prefix + ".csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("dataset_fingerprint", "ipc_or_budget", "seed",
                    "accuracy", "mean", "std"))
        for s, a in zip(report.seeds, report.accuracies):
            w.writerow((report.train_fingerprint, report.label, s,
                        f"{a:.6f}", f"{report.mean:.6f}", f"{report.std:.6f}"))
    with open(prefix + ".txt", "w", encoding="utf-8") as f:
        f.write("\n".join(report.lines()) + "\n")


def cmd_report(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    fid_rows = []
    for path in args.metrics or ():
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                if row.get("fid"):
                    fid_rows.append({"iteration": int(row["iteration"]),
                                     "fid": float(row["fid"]),
                                     "wall_seconds": row.get("wall_seconds", "")})
    fid_rows.sort(key=lambda r: r["iteration"])
    stride = max(1, args.fid_stride)
    fid_rows = [r for i, r in enumerate(fid_rows) if i % stride == 0 or
                i == len(fid_rows) - 1]
    fid_csv = os.path.join(args.out_dir, "fid_curve.csv")
    with open(fid_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("iteration", "fid", "wall_seconds"))
        for r in fid_rows:
            w.writerow((r["iteration"], r["fid"], r["wall_seconds"]))

    acc_rows = []
    for path in args.results or ():
        with open(path, newline="") as f:
            acc_rows.extend(csv.DictReader(f))
    acc_csv = os.path.join(args.out_dir, "accuracy_table.csv")
    with open(acc_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("dataset_fingerprint", "ipc_or_budget", "seed",
                    "accuracy", "mean", "std"))
        for r in acc_rows:
            w.writerow((r.get("dataset_fingerprint", r.get("fingerprint", "")),
                        r.get("ipc_or_budget", ""), r.get("seed", ""),
                        r.get("accuracy", ""), r.get("mean", ""), r.get("std", "")))

    plotting.save_fid_curve(fid_rows, os.path.join(args.out_dir, "fid_curve.png"))
    groups = {}
    for r in acc_rows:
        key = (r.get("dataset_fingerprint", r.get("fingerprint", "")),
               r.get("ipc_or_budget", ""))
        groups.setdefault(key, []).append(float(r["accuracy"]))
    chart = [{"label": f"{k[1] or k[0][:6]}", "mean": float(np.mean(v)),
              "std": float(np.std(v))} for k, v in sorted(groups.items())]
    plotting.save_accuracy_chart(chart, os.path.join(args.out_dir, "accuracy.png"))
    print(f"wrote {fid_csv} ({len(fid_rows)} rows), {acc_csv} ({len(acc_rows)} rows), "
          f"and figures in {args.out_dir}")
    return 0


def cmd_make_toy(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    train, test = toydata.make_train_test(args.train, args.test, args.seed,
                                          args.size)
    train_path = os.path.join(args.out_dir, "train.dds")
    test_path = os.path.join(args.out_dir, "test.dds")
    datastore.write_dataset(train, train_path)
    datastore.write_dataset(test, test_path)
    print(f"wrote {train_path} ({len(train)} images) and {test_path} "
          f"({len(test)} images), {len(toydata.CLASS_NAMES)} classes")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    root = argparse.ArgumentParser(
        prog="diffdistill",
        description="Diffusion-based dataset distillation pipeline.")
    sub = root.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat 'section.key = value' config file "
                       "(default: $DD_CONFIG)")

    p = sub.add_parser("train", help="train the class-conditional denoiser")
    common(p)
    p.add_argument("--data", required=True, help="training dataset (.dds)")
    p.add_argument("--out-dir", required=True, help="run directory for outputs")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--fid-every", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--grad-accum", type=int)
    p.add_argument("--uncond-prob", type=float)
    p.add_argument("--ema", action="store_true", help="track EMA weights")
    p.add_argument("--ema-decay", type=float)
    p.add_argument("--preset", choices=sorted(denoiser.PRESETS))
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--mlp", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--patch", type=int)
    p.add_argument("--skip-mode", choices=("add", "concat"))
    p.add_argument("--schedule-kind", choices=sched_mod.SCHEDULE_KINDS)
    p.add_argument("--schedule-steps", type=int)
    p.add_argument("--beta-start", type=float)
    p.add_argument("--beta-end", type=float)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--warm-start", help="checkpoint to initialize from")
    p.add_argument("--skip", action="append",
                   help="tensor-name glob excluded from --warm-start (repeatable)")
    p.add_argument("--no-fid", action="store_true", help="disable the FID hook")
    p.add_argument("--fid-samples", type=int)
    p.add_argument("--fid-batch", type=int)
    p.add_argument("--extractor-seed", type=int)
    p.add_argument("--extractor-epochs", type=int)
    p.add_argument("--extractor-width", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate labeled samples to a dataset file")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="output dataset (.dds)")
    p.add_argument("--per-class", type=int, help="images per class")
    p.add_argument("--labels", help="explicit comma-separated labels")
    p.add_argument("--count", type=int, help="total images, round-robin classes")
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("distill", help="build a distilled set under a budget")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="output dataset (.dds)")
    p.add_argument("--ipc", type=int, help="images per class")
    p.add_argument("--budget-seconds", type=float, help="wall-clock allowance")
    p.add_argument("--gen-batch", type=int, help="generation chunk size")
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("fid", help="score a checkpoint against real data")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="real reference dataset (.dds)")
    p.add_argument("--n-samples", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--extractor", help="extractor checkpoint cache path")
    p.add_argument("--ref-stats", help="reference statistics cache path")
    p.add_argument("--extractor-seed", type=int)
    p.add_argument("--extractor-epochs", type=int)
    p.add_argument("--extractor-width", type=int)
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_fid)

    p = sub.add_parser("train-classifier", help="train the ConvNet on a dataset")
    common(p)
    p.add_argument("--data", required=True, help="training dataset (.dds)")
    p.add_argument("--out", required=True, help="classifier checkpoint path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--width", type=int)
    p.add_argument("--blocks", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--clf-weight-decay", type=float)
    p.add_argument("--augment", action="store_true")
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("eval", help="evaluate a classifier or run the protocol")
    common(p)
    p.add_argument("--data", required=True, help="real test dataset (.dds)")
    p.add_argument("--classifier", help="classifier checkpoint (single-model mode)")
    p.add_argument("--train-data", help="distilled train set (protocol mode)")
    p.add_argument("--seeds", type=int, help="protocol run count")
    p.add_argument("--baseline-data", help="real train set for the upper baseline")
    p.add_argument("--out-prefix", help="write <prefix>.csv and <prefix>.txt")
    p.add_argument("--ledger", help="results ledger CSV to append")
    p.add_argument("--label", help="ipc_or_budget label for report rows")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--width", type=int)
    p.add_argument("--blocks", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--clf-weight-decay", type=float)
    p.add_argument("--augment", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge logs into CSV tables and figures")
    p.add_argument("--metrics", action="append",
                   help="trainer metrics.csv (repeatable)")
    p.add_argument("--results", action="append",
                   help="eval accuracy CSV (repeatable)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--fid-stride", type=int, default=1,
                   help="keep every Nth fid row")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("make-toy", help="write the procedural shape dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--train", type=int, default=2000)
    p.add_argument("--test", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=16)
    p.set_defaults(func=cmd_make_toy)

    return root


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
