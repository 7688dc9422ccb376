"""Command-line surface for reproducible experiments.

Exit codes: 0 success, 1 usage/config error, 2 data error,
3 training contract error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import data as dm
from . import synth as sm
from . import train as tm
from .errors import ConfigError, ContractError, DataError, MeltpoolError
from .networks import (ModelBundle, checkpoint_digest, load_checkpoint,
                       save_checkpoint)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _add_config_flags(p: _Parser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr-encoder", type=float, dest="lr_encoder")
    p.add_argument("--lr-task", type=float, dest="lr_task")
    p.add_argument("--lr-domain", type=float, dest="lr_domain")
    p.add_argument("--lambda", type=float, dest="lambda_")
    p.add_argument("--disc-metric", choices=["symmetric-bce", "l1"], dest="disc_metric")
    p.add_argument("--strict", action="store_const", const=True, default=None)
    p.add_argument("--copies", type=int)
    p.add_argument("--zoom-lo", type=float, dest="zoom_lo")
    p.add_argument("--zoom-hi", type=float, dest="zoom_hi")


def _resolve(args) -> dict:
    overrides = {}
    for key in cfgmod.DEFAULTS:
        attr = "lambda_" if key == "lambda" else key
        if hasattr(args, attr) and getattr(args, attr) is not None:
            overrides[key] = getattr(args, attr)
    return cfgmod.load_config(getattr(args, "config", None), overrides)


def _out_dir(args) -> Path:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.overwrite:
        raise DataError(f"output directory {out} is not empty (use --overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_benchmark_dir(data_dir) -> dict[str, dm.DomainDataset]:
    d = Path(data_dir)
    out = {}
    for name in ("src_train", "src_val", "src_test", "tgt_train", "tgt_val", "tgt_test"):
        p = d / f"{name}.mpds"
        if p.is_file():
            out[name] = dm.load_dataset(p)
    if "src_train" not in out:
        raise DataError(f"no src_train.mpds under {data_dir}")
    return out


def _phase_cfg(phase: str, cfg: dict) -> tm.PhaseConfig:
    return tm.PhaseConfig(
        phase=phase, epochs=cfg["epochs"], batch_size=cfg["batch_size"],
        lam=cfg["lambda"], disc_metric=cfg["disc_metric"],
        conv_tol=cfg["conv_tol"] or None, conv_window=cfg["conv_window"],
        seed=cfg["seed"], strict=cfg["strict"])


def _write_run_outputs(out: Path, bundle, records, cfg) -> None:
    bundle.meta["config_digest"] = cfgmod.write_snapshot(cfg, out)
    save_checkpoint(bundle, out / "checkpoint.mpck")
    (out / "metrics.csv").write_text(tm.metrics_to_csv(records))


def _augment_config(cfg: dict) -> dm.AugmentationConfig:
    override = None
    if cfg["zoom_lo"] or cfg["zoom_hi"]:
        override = (cfg["zoom_lo"], cfg["zoom_hi"])
    return dm.AugmentationConfig(
        pixel_size_source=cfg["pixel_size_source"],
        pixel_size_target=cfg["pixel_size_target"],
        zoom_factor=cfg["zoom_factor"], zoom_override=override,
        blur_prob=cfg["blur_prob"],
        blur_sigma=(cfg["blur_sigma_lo"], cfg["blur_sigma_hi"]),
        dihedral=cfg["dihedral"], copies=cfg["copies"],
        include_originals=cfg["include_originals"], seed=cfg["seed"])


# --- commands -------------------------------------------------------------

def cmd_gen_synth(args) -> int:
    spec_path = Path(args.spec)
    if not spec_path.is_file():
        raise ConfigError(f"spec file not found: {spec_path}")
    source_kv, target_kv = {}, {}
    for lineno, line in enumerate(spec_path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line or "." not in line.split("=")[0]:
            raise ConfigError(
                f"{spec_path}:{lineno}: expected 'source.key = value' or 'target.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        domain, field = key.split(".", 1)
        if domain == "source":
            source_kv[field] = value
        elif domain == "target":
            target_kv[field] = value
        else:
            raise ConfigError(f"{spec_path}:{lineno}: unknown domain prefix {domain!r}")
    try:
        src_spec = sm.spec_from_dict(source_kv)
        tgt_spec = sm.spec_from_dict(target_kv)
    except DataError as exc:
        raise ConfigError(f"{spec_path}: {exc}") from exc

    out = _out_dir(args)
    bench = sm.generate_domain_pair(src_spec, tgt_spec, table2_counts=args.table2_counts)
    for name, ds in bench.datasets().items():
        dm.save_dataset(ds, out / f"{name}.mpds")
        dm.write_image_dir(ds, out / "images" / ds.domain)
    sm.save_sealed_labels(bench.sealed_labels, bench.target_train.ids,
                          out / "sealed_target_train_labels.mpsl")
    print(f"wrote {sum(len(d) for d in bench.datasets().values())} images to {out}")
    return 0


def cmd_prepare(args) -> int:
    cfg = _resolve(args)
    ds = dm.load_image_dir(args.input, args.domain, args.split)
    denoise = cfg["denoise_source"] if args.domain == "source" else cfg["denoise_target"]
    prepared = dm.prepare(ds.images, denoise=denoise)
    out = dm.DomainDataset(ds.domain, ds.split, prepared, ds.labels, ds.ids)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    dm.save_dataset(out, args.out)
    print(f"prepared {len(out)} images -> {args.out}")
    return 0


def cmd_augment(args) -> int:
    cfg = _resolve(args)
    ds = dm.load_dataset(args.input)
    aug = dm.augment_dataset(ds, _augment_config(cfg))
    dm.save_dataset(aug, args.out)
    print(f"augmented {len(ds)} -> {len(aug)} examples -> {args.out}")
    return 0


def _training_command(args, phase: str) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    sets = _load_benchmark_dir(args.data)
    eval_sets = {"src_val": sets.get("src_val"), "tgt_val": sets.get("tgt_val"),
                 "tgt_test": sets.get("tgt_test")}

    source_train = sets["src_train"]
    if args.augment:
        source_train = dm.augment_dataset(
            dm.balance_downsample(source_train, seed=cfg["seed"]), _augment_config(cfg))

    if args.from_ckpt:
        bundle = load_checkpoint(args.from_ckpt)
        # a checkpoint carries its learning rates; an explicit flag wins so a
        # resumed phase can run at its own rate (e.g. a slow decision-align)
        if args.lr_encoder is not None:
            bundle.opt_encoder.lr = args.lr_encoder
        if args.lr_task is not None:
            bundle.opt_task1.lr = bundle.opt_task2.lr = args.lr_task
        if args.lr_domain is not None:
            bundle.opt_domain.lr = args.lr_domain
    else:
        if phase != "pretrain":
            msg = f"{phase} should resume from a pretrain checkpoint (--from)"
            if cfg["strict"]:
                raise ContractError(msg)
            import warnings
            warnings.warn(msg)
        bundle = ModelBundle.build(seed=cfg["seed"], lr_encoder=cfg["lr_encoder"],
                                   lr_task=cfg["lr_task"], lr_domain=cfg["lr_domain"],
                                   domain_head=cfg["domain_head"])
    pcfg = _phase_cfg(phase, cfg)
    start = int(bundle.meta.get("epoch", 0))
    if phase == "pretrain":
        records = tm.pretrain(bundle, source_train, pcfg, eval_sets, start)
    elif phase == "domain-align":
        records = tm.domain_align(bundle, source_train, sets["tgt_train"], pcfg,
                                  eval_sets, start)
    elif phase == "decision-align":
        records = tm.decision_align(bundle, source_train, sets["tgt_train"], pcfg,
                                    eval_sets, start)
    else:
        raise ConfigError(f"unknown phase {phase}")
    _write_run_outputs(out, bundle, records, cfg)
    last = records[-1] if records else None
    if last and last.tgt_test_acc is not None:
        print(f"{phase} done: epoch {last.epoch}, target test acc {last.tgt_test_acc:.3f}")
    else:
        print(f"{phase} done: {len(records)} epochs")
    return 0


def cmd_evaluate(args) -> int:
    bundle = load_checkpoint(args.from_ckpt)
    sets = _load_benchmark_dir(args.data)
    key = {"source": "src", "target": "tgt"}[args.domain]
    name = f"{key}_{'val' if args.split == 'validation' else args.split}"
    if name not in sets:
        raise DataError(f"dataset {name}.mpds not found under {args.data}")
    res = tm.evaluate(bundle, sets[name])
    print(f"classifier1 accuracy: {res.acc1:.4f}")
    print(f"classifier2 accuracy: {res.acc2:.4f}")
    print(f"average accuracy:     {res.average:.4f}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    sets = _load_benchmark_dir(args.data)
    bundle = load_checkpoint(args.from_ckpt)
    labels, _ = sm.load_sealed_labels(args.labels)
    tgt = sets["tgt_train"]
    rng = np.random.default_rng(cfg["seed"])
    idx = rng.choice(len(tgt), size=args.n, replace=False)
    subset = dm.DomainDataset(tgt.domain, tgt.split, tgt.images[idx],
                              labels[idx], [tgt.ids[i] for i in idx])
    records = tm.finetune(bundle, subset, _phase_cfg("pretrain", cfg),
                          {"tgt_test": sets.get("tgt_test")},
                          int(bundle.meta.get("epoch", 0)))
    _write_run_outputs(out, bundle, records, cfg)
    res = tm.evaluate(bundle, sets["tgt_test"])
    print(f"finetuned on {args.n} labeled target examples; "
          f"target test acc {res.average:.4f}")
    return 0


def cmd_baseline(args) -> int:
    cfg = _resolve(args)
    sets = _load_benchmark_dir(args.data)
    labels, _ = sm.load_sealed_labels(args.labels)
    tgt = sets["tgt_train"]
    rng = np.random.default_rng(cfg["seed"])
    idx = rng.choice(len(tgt), size=args.n, replace=False)
    subset = dm.DomainDataset(tgt.domain, "train", tgt.images[idx],
                              labels[idx], [tgt.ids[i] for i in idx])
    acc = tm.train_baseline(subset, sets["tgt_test"], _phase_cfg("pretrain", cfg),
                            seed=cfg["seed"], lr_encoder=cfg["lr_encoder"],
                            lr_task=cfg["lr_task"])
    print(f"supervised baseline (n={args.n}): target test acc {acc:.4f}")
    return 0


def cmd_embed(args) -> int:
    bundle = load_checkpoint(args.from_ckpt)
    sets = _load_benchmark_dir(args.data)
    names = ["src_train", "src_val", "src_test", "tgt_train", "tgt_val", "tgt_test"]
    datasets = [sets[n] for n in names if n in sets]
    csv_text = tm.export_embeddings(bundle, datasets, project_2d=args.project_2d)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(csv_text)
    print(f"wrote embeddings for {sum(len(d) for d in datasets)} examples -> {args.out}")
    return 0


def run_pipeline(sets: dict, cfg: dict, seed: int,
                 epochs: tuple[int, int, int]) -> dict:
    """Full three-phase run; returns accuracies after each phase."""
    source_train = dm.augment_dataset(
        dm.balance_downsample(sets["src_train"], seed=seed), _augment_config({**cfg, "seed": seed}))
    bundle = ModelBundle.build(seed=seed, lr_encoder=cfg["lr_encoder"],
                               lr_task=cfg["lr_task"], lr_domain=cfg["lr_domain"],
                               domain_head=cfg["domain_head"])
    accs = {}

    def pcfg(phase, n):
        return tm.PhaseConfig(phase=phase, epochs=n, batch_size=cfg["batch_size"],
                              lam=cfg["lambda"], disc_metric=cfg["disc_metric"],
                              seed=seed)

    tm.pretrain(bundle, source_train, pcfg("pretrain", epochs[0]))
    accs["pretrain"] = tm.evaluate(bundle, sets["tgt_test"]).average
    tm.domain_align(bundle, source_train, sets["tgt_train"], pcfg("domain-align", epochs[1]))
    accs["domain-align"] = tm.evaluate(bundle, sets["tgt_test"]).average
    tm.decision_align(bundle, source_train, sets["tgt_train"], pcfg("decision-align", epochs[2]))
    accs["decision-align"] = tm.evaluate(bundle, sets["tgt_test"]).average
    accs["src_test"] = tm.evaluate(bundle, sets["src_test"]).average
    return accs


def cmd_sweep_zoom(args) -> int:
    cfg = _resolve(args)
    sets = _load_benchmark_dir(args.data)
    ranges = []
    for spec in args.ranges.split(";"):
        try:
            lo, hi = (float(v) for v in spec.split(","))
        except ValueError as exc:
            raise ConfigError(f"malformed zoom range {spec!r} (expected 'lo,hi')") from exc
        ranges.append((lo, hi))
    if not ranges:
        raise ConfigError("at least one zoom range is required")
    epochs = (cfg["epochs"],) * 3 if args.phase_epochs is None else \
        tuple(int(v) for v in args.phase_epochs.split(","))
    rows = ["zoom_lo,zoom_hi,mean_acc,min_acc,max_acc"]
    for lo, hi in ranges:
        run_cfg = {**cfg, "zoom_lo": lo, "zoom_hi": hi}
        accs = [run_pipeline(sets, run_cfg, cfg["seed"] + t, epochs)["decision-align"]
                for t in range(args.trials)]
        rows.append(f"{lo},{hi},{np.mean(accs)},{np.min(accs)},{np.max(accs)}")
        print(rows[-1])
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text("\n".join(rows) + "\n")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="meltpool-da",
                     description="Unsupervised domain adaptation for melt-pool anomaly detection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate the synthetic two-domain benchmark")
    p.add_argument("--spec", required=True, help="flat source.*/target.* spec file")
    p.add_argument("--out", required=True)
    p.add_argument("--table2-counts", action="store_true",
                   help="use the bundled benchmark split sizes (323/323, 5819, 50/50)")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("prepare", help="ingest an image tree, denoise, resize to 80x80")
    p.add_argument("--input", required=True, help="directory holding <split>/<class>/ images")
    p.add_argument("--domain", choices=["source", "target"], required=True)
    p.add_argument("--split", choices=["train", "validation", "test"], required=True)
    p.add_argument("--out", required=True, help="output dataset container (.mpds)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("augment", help="sensor-aware augmentation of a prepared dataset")
    p.add_argument("--input", required=True, help="input dataset container")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_augment)

    for phase, help_text in (("pretrain", "phase 1: supervised source pre-training"),
                             ("adapt", "phase 2: adversarial domain alignment"),
                             ("decision-align", "phase 3: classifier-discrepancy alignment")):
        p = sub.add_parser(phase, help=help_text)
        p.add_argument("--data", required=True, help="directory of .mpds containers")
        p.add_argument("--out", required=True)
        p.add_argument("--from", dest="from_ckpt", help="checkpoint to resume from")
        p.add_argument("--augment", action="store_true",
                       help="balance + augment the source training set first")
        p.add_argument("--overwrite", action="store_true")
        _add_config_flags(p)
        canonical = {"adapt": "domain-align"}.get(phase, phase)
        p.set_defaults(func=lambda a, ph=canonical: _training_command(a, ph))

    p = sub.add_parser("evaluate", help="accuracy of both task classifiers")
    p.add_argument("--from", dest="from_ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["validation", "test"], default="test")
    p.add_argument("--domain", choices=["source", "target"], default="target")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("finetune", help="supervised fine-tuning on n labeled target examples")
    p.add_argument("--from", dest="from_ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True, help="sealed answer file (.mpsl)")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("baseline", help="supervised-only target model for comparison")
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--n", type=int, required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("embed", help="export 20-d encodings as CSV")
    p.add_argument("--from", dest="from_ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--project-2d", action="store_true", dest="project_2d")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("sweep-zoom", help="full-pipeline sweep over zoom ranges")
    p.add_argument("--data", required=True)
    p.add_argument("--ranges", required=True, help="semicolon-separated lo,hi pairs")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--phase-epochs", dest="phase_epochs",
                   help="comma-separated epochs for the three phases")
    p.add_argument("--out")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep_zoom)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except ContractError as exc:
        print(f"training contract error: {exc}", file=sys.stderr)
        return 3
    except MeltpoolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
