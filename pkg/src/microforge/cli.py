"""Command-line interface: microforge <subcommand>."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import homogenize, microgen, mmae, pipeline, saliency as saliency_mod, transfer
from .checkpoint import load_checkpoint
from .imageio import read_pgm, write_pgm, write_png
from .manifest import DatasetManifest


def _parse_mode(text: str) -> transfer.ProbeConfig:
    if text == "linear":
        return transfer.ProbeConfig(mode="linear")
    if text == "full":
        return transfer.ProbeConfig(mode="full", head="mlp")
    if text.startswith("partial:"):
        return transfer.ProbeConfig(mode="partial", k=int(text.split(":", 1)[1]), head="mlp")
    raise argparse.ArgumentTypeError(f"mode must be linear, full, or partial:K, got {text!r}")


def _load_model(path) -> mmae.MmaeModel:
    return mmae.MmaeModel.from_checkpoint(load_checkpoint(path))


def _labeled_split(manifest_path, seed):
    manifest = DatasetManifest.load(manifest_path)
    records = manifest.labeled_records()
    train, val = transfer.split_80_20(records, seed)
    return manifest, train, val


def cmd_gen(args) -> int:
    _, stats = microgen.generate_dataset(args.kind, args.n, args.res, args.seed, args.out)
    print(f"wrote {stats.records} images to {args.out} ({stats.retries} placement retries)")
    return 0


def cmd_label(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    cfg = homogenize.SolverConfig(tolerance=args.tol)
    labeled, report = homogenize.label_dataset(
        manifest, homogenize.MATRIX, homogenize.INCLUSION, cfg, resolution=args.res)
    labeled.save(args.out or args.manifest)
    print(f"labeled {report.labeled} records; {len(report.failed_ids)} failures")
    return 1 if report.failed_ids else 0


def cmd_pretrain(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    model_kwargs = {}
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            model_kwargs = json.load(f)
    model_kwargs.setdefault("mask_ratio", args.mask_ratio)
    cfg = mmae.MmaeConfig(**model_kwargs)
    train_cfg = mmae.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                                 learning_rate=args.lr)
    curve = Path(args.out).with_suffix(".curve.csv")
    mmae.pretrain(manifest, cfg, train_cfg, args.seed, args.out, curve_path=curve)
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_probe(args) -> int:
    model = _load_model(args.ckpt)
    manifest, train, val = _labeled_split(args.manifest, args.seed)
    report, reg = transfer.fit_linear_probe(model, manifest, train, val, args.seed)
    if args.out:
        reg.save(args.out)
    transfer.reports_to_csv([report], args.report)
    print(f"linear probe avg R^2 = {report.r2_avg:.4f}")
    return 0


def cmd_finetune(args) -> int:
    model = _load_model(args.ckpt)
    probe = _parse_mode(args.mode)
    manifest, train, val = _labeled_split(args.manifest, args.seed)
    if probe.mode == "linear":
        report, reg = transfer.fit_linear_probe(model, manifest, train, val, args.seed)
    else:
        train_cfg = transfer.TransferTrainConfig(epochs=args.epochs,
                                                 batch_size=args.batch_size,
                                                 learning_rate=args.lr)
        report, reg = transfer.finetune(model, probe, manifest, train, val,
                                        args.seed, train_cfg)
    if args.out:
        reg.save(args.out)
    transfer.reports_to_csv([report], args.report)
    print(f"{args.mode} avg R^2 = {report.r2_avg:.4f}")
    return 0


def cmd_sweep(args) -> int:
    with open(args.spec, encoding="utf-8") as f:
        spec = json.load(f)
    kind = spec["kind"]
    seed = spec.get("seed", 0)
    manifest, train, val = _labeled_split(spec["manifest"], seed)
    train_cfg = transfer.TransferTrainConfig(**spec.get("train", {}))
    if kind == "masking":
        ckpts = {float(k): Path(v) for k, v in spec["checkpoints"].items()}
        reports = transfer.run_masking_ratio_sweep(ckpts, manifest, train, val,
                                                   seed, train_cfg=train_cfg)
    elif kind == "blocks":
        model = _load_model(spec["checkpoint"])
        reports = transfer.run_blocks_sweep(model, manifest, train, val, seed,
                                            ks=spec.get("ks"), train_cfg=train_cfg)
    elif kind == "size":
        model = _load_model(spec["checkpoint"])
        records = DatasetManifest.load(spec["manifest"]).labeled_records()
        reports = transfer.run_size_sweep(model, manifest, records, spec["sizes"],
                                          seed, train_cfg=train_cfg)
    else:
        print(f"unknown sweep kind {kind!r}", file=sys.stderr)
        return 2
    transfer.reports_to_csv(reports, args.report)
    pipeline.emit_figures(reports, Path(args.report).parent)
    return 0


def cmd_saliency(args) -> int:
    reg = transfer.Regressor.load(args.ckpt)
    manifest = DatasetManifest.load(args.manifest)
    by_id = {r.id: r for r in manifest.records}
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for record_id in args.ids:
        record = by_id[record_id]
        image = read_pgm(manifest.resolve(record))
        label = getattr(record, f"{args.component}_gpa")
        if label is None:
            print(f"record {record_id} has no {args.component} label", file=sys.stderr)
            return 1
        smap = saliency_mod.saliency(reg, image, args.component, label,
                                     image_id=record_id)
        saliency_mod.save_map_csv(smap, out_dir / f"saliency-{record_id}.csv")
        write_png(out_dir / f"saliency-{record_id}.png",
                  saliency_mod.render_overlay(smap.values, image))
    return 0


def cmd_reconstruct(args) -> int:
    model = _load_model(args.ckpt)
    image = read_pgm(args.image)
    trip = mmae.reconstruct(model, image, args.mask_ratio, args.seed)
    write_pgm(args.out, pipeline.compose_triptych(trip))
    return 0


def cmd_run(args) -> int:
    config = pipeline.load_config(args.config) if args.config else pipeline.validate_config({})
    if args.seed is not None:
        config["seed"] = args.seed
    run_dir = pipeline.run_pipeline(config, args.out, force=args.force)
    print(f"run complete: {run_dir}")
    return 0


def cmd_report(args) -> int:
    reports = pipeline.read_report_csv(args.reports)
    written = pipeline.emit_figures(reports, args.out)
    print(f"wrote {len(written)} figures to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="microforge",
                                description="composite microstructure MAE pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate an RVE image dataset")
    g.add_argument("--kind", choices=("fiber", "circle"), required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--res", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    l = sub.add_parser("label", help="attach homogenized stiffness labels")
    l.add_argument("--manifest", required=True)
    l.add_argument("--res", type=int, default=None)
    l.add_argument("--tol", type=float, default=1e-8)
    l.add_argument("--out", default=None)
    l.set_defaults(fn=cmd_label)

    t = sub.add_parser("pretrain", help="masked-autoencoder pre-training")
    t.add_argument("--manifest", required=True)
    t.add_argument("--config", default=None, help="JSON file of model hyperparameters")
    t.add_argument("--mask-ratio", type=float, default=0.85)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--lr", type=float, default=1.5e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_pretrain)

    pr = sub.add_parser("probe", help="linear probe on frozen embeddings")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--manifest", required=True)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--report", default="probe-report.csv")
    pr.add_argument("--out", default=None)
    pr.set_defaults(fn=cmd_probe)

    ft = sub.add_parser("finetune", help="fine-tune encoder + regression head")
    ft.add_argument("--ckpt", required=True)
    ft.add_argument("--manifest", required=True)
    ft.add_argument("--mode", default="full", help="linear | partial:K | full")
    ft.add_argument("--epochs", type=int, default=20)
    ft.add_argument("--batch-size", type=int, default=32)
    ft.add_argument("--lr", type=float, default=1e-3)
    ft.add_argument("--seed", type=int, default=0)
    ft.add_argument("--report", default="finetune-report.csv")
    ft.add_argument("--out", default=None)
    ft.set_defaults(fn=cmd_finetune)

    sw = sub.add_parser("sweep", help="run a sweep described by a JSON spec")
    sw.add_argument("--spec", required=True)
    sw.add_argument("--report", default="sweep-report.csv")
    sw.set_defaults(fn=cmd_sweep)

    sa = sub.add_parser("saliency", help="gradient saliency maps")
    sa.add_argument("--ckpt", required=True, help="regressor checkpoint")
    sa.add_argument("--manifest", required=True)
    sa.add_argument("--ids", nargs="+", required=True)
    sa.add_argument("--component", choices=transfer.COMPONENTS, default="c1111")
    sa.add_argument("--out", default="saliency-out")
    sa.set_defaults(fn=cmd_saliency)

    rc = sub.add_parser("reconstruct", help="triptych for one image")
    rc.add_argument("--ckpt", required=True)
    rc.add_argument("--image", required=True)
    rc.add_argument("--mask-ratio", type=float, default=0.85)
    rc.add_argument("--seed", type=int, default=0)
    rc.add_argument("--out", required=True)
    rc.set_defaults(fn=cmd_reconstruct)

    rn = sub.add_parser("run", help="full pipeline from a run config")
    rn.add_argument("--config", default=None)
    rn.add_argument("--out", required=True)
    rn.add_argument("--seed", type=int, default=None)
    rn.add_argument("--force", action="store_true")
    rn.set_defaults(fn=cmd_run)

    rp = sub.add_parser("report", help="redraw figures from a report CSV")
    rp.add_argument("--reports", required=True)
    rp.add_argument("--out", required=True)
    rp.set_defaults(fn=cmd_report)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # surface a clean message, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
