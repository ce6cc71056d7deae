"""End-to-end orchestration: config, workspace layout, stages, figures.

A run is keyed by the hash of its config; stages stamp completion
markers so an interrupted run resumes at module boundaries. CSV files
are the authoritative outputs; SVG charts are drawn beside them.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import homogenize, microgen, mmae, plotsvg, saliency as saliency_mod, transfer
from .checkpoint import load_checkpoint
from .imageio import read_pgm, write_pgm, write_png
from .manifest import DatasetManifest

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "generation": {
        "n_fiber": 300,
        "n_circle": 0,
        "resolution": 64,
        "circle_radius": microgen.DEFAULT_CIRCLE_RADIUS,
    },
    "solver": {
        "scheme": "spectral",
        "tolerance": 1e-8,
        "max_iterations": 10_000,
        "plane_strain": True,
        "resolution": None,
    },
    "model": {
        "image_size": 64,
        "patch_size": 8,
        "embed_dim": 64,
        "encoder_depth": 4,
        "encoder_heads": 4,
        "decoder_dim": 48,
        "decoder_depth": 2,
        "decoder_heads": 4,
    },
    "training": {"epochs": 30, "batch_size": 64, "learning_rate": 1.5e-3},
    "transfer": {
        "epochs": 20,
        "batch_size": 32,
        "learning_rate": 1e-3,
        "n_labeled": None,
    },
    "sweeps": {
        "mask_ratios": [0.85],
        "blocks": None,
        "dataset_sizes": [],
    },
    "saliency": {"n_images": 2, "component": "c1111"},
}


class ConfigError(ValueError):
    pass


def validate_config(config: dict) -> dict:
    """Merge over defaults; unknown keys are rejected."""

    def merge(defaults, given, path):
        if not isinstance(given, dict):
            raise ConfigError(f"section {path or '<root>'} must be an object")
        out = {}
        for key in given:
            if key not in defaults:
                raise ConfigError(f"unknown config key {path + key!r}")
        for key, dval in defaults.items():
            if key in given and isinstance(dval, dict):
                out[key] = merge(dval, given[key], path + key + ".")
            elif key in given:
                out[key] = copy.deepcopy(given[key])
            else:
                out[key] = copy.deepcopy(dval)
        return out

    return merge(DEFAULT_CONFIG, config, "")


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


def load_config(path) -> dict:
    with open(path, encoding="utf-8") as f:
        return validate_config(json.load(f))


class Workspace:
    """Per-run directory schema keyed by the config hash."""

    def __init__(self, out_root, config: dict):
        self.config = validate_config(config)
        self.hash = config_hash(self.config)
        self.run_dir = Path(out_root) / f"run-{self.hash}"
        self.datasets = self.run_dir / "datasets"
        self.checkpoints = self.run_dir / "checkpoints"
        self.reports = self.run_dir / "reports"
        self.figures = self.run_dir / "figures"

    def prepare(self) -> None:
        for d in (self.datasets, self.checkpoints, self.reports, self.figures):
            d.mkdir(parents=True, exist_ok=True)
        with open(self.run_dir / "config.json", "w", encoding="utf-8") as f:
            json.dump(self.config, f, indent=2, sort_keys=True)

    def marker(self, stage: str) -> Path:
        return self.run_dir / f".done-{stage}"

    def is_done(self, stage: str) -> bool:
        return self.marker(stage).exists()

    def stamp(self, stage: str) -> None:
        self.marker(stage).write_text("done\n", encoding="utf-8")


def _log(stage: str, message: str) -> None:
    print(f"[{stage}] {message}", file=sys.stderr)


def _timed(stage, ws, force, fn):
    if ws.is_done(stage) and not force:
        _log(stage, "already complete, skipping")
        return
    start = time.perf_counter()
    fn()
    ws.stamp(stage)
    _log(stage, f"finished in {time.perf_counter() - start:.1f}s (seed {ws.config['seed']})")


def run_pipeline(config: dict, out_root, force: bool = False) -> Path:
    """gen -> label -> pretrain (per ratio) -> sweeps -> saliency -> figures.

    Returns the run directory. A stage failure halts dependents but the
    partial outputs and markers remain for resumption.
    """
    ws = Workspace(out_root, config)
    ws.prepare()
    cfg = ws.config
    seed = cfg["seed"]
    gen = cfg["generation"]
    solver_cfg = homogenize.SolverConfig(
        scheme=cfg["solver"]["scheme"], tolerance=cfg["solver"]["tolerance"],
        max_iterations=cfg["solver"]["max_iterations"],
        plane_strain=cfg["solver"]["plane_strain"])

    def stage_generate():
        microgen.generate_dataset("fiber", gen["n_fiber"], gen["resolution"],
                                  seed, ws.datasets / "fiber")
        if gen["n_circle"] > 0:
            microgen.generate_dataset("circle", gen["n_circle"], gen["resolution"],
                                      seed, ws.datasets / "circle",
                                      circle_radius=gen["circle_radius"])

    _timed("gen", ws, force, stage_generate)

    def stage_label():
        for kind in ("fiber", "circle"):
            mpath = ws.datasets / kind / "manifest.jsonl"
            if not mpath.exists():
                continue
            manifest = DatasetManifest.load(mpath)
            labeled, report = homogenize.label_dataset(
                manifest, homogenize.MATRIX, homogenize.INCLUSION, solver_cfg,
                resolution=cfg["solver"]["resolution"])
            labeled.save(mpath)
            if report.failed_ids:
                _log("label", f"{kind}: {len(report.failed_ids)} solver failures: "
                     + ",".join(report.failed_ids))

    _timed("label", ws, force, stage_label)

    ratios = list(cfg["sweeps"]["mask_ratios"])
    train_cfg = mmae.TrainConfig(**cfg["training"])

    def ckpt_path(ratio: float) -> Path:
        return ws.checkpoints / f"mmae-mask{int(round(ratio * 100)):02d}.ckpt"

    def stage_pretrain():
        manifest = DatasetManifest.load(ws.datasets / "fiber" / "manifest.jsonl")
        for ratio in ratios:
            model_cfg = mmae.MmaeConfig(**cfg["model"], mask_ratio=ratio)
            mmae.pretrain(manifest, model_cfg, train_cfg, seed, ckpt_path(ratio),
                          curve_path=ws.reports / f"pretrain-mask{int(round(ratio * 100)):02d}.csv")

    _timed("pretrain", ws, force, stage_pretrain)

    transfer_cfg = transfer.TransferTrainConfig(
        epochs=cfg["transfer"]["epochs"], batch_size=cfg["transfer"]["batch_size"],
        learning_rate=cfg["transfer"]["learning_rate"])

    def labeled_records(kind: str):
        mpath = ws.datasets / kind / "manifest.jsonl"
        if not mpath.exists():
            return None, []
        manifest = DatasetManifest.load(mpath)
        records = manifest.labeled_records()
        limit = cfg["transfer"]["n_labeled"]
        if limit:
            records = records[:limit]
        return manifest, records

    def stage_transfer():
        manifest, records = labeled_records("fiber")
        reports: list[transfer.ExperimentReport] = []
        if len(records) < 5:
            (ws.reports / "report.csv").write_text(
                transfer.ExperimentReport.CSV_HEADER
                + "\n# transfer skipped: no labeled instances\n", encoding="utf-8")
            _log("transfer", "skipped: fewer than 5 labeled instances")
            return
        train, val = transfer.split_80_20(records, seed)
        ckpts = {r: ckpt_path(r) for r in ratios}
        reports += transfer.run_masking_ratio_sweep(
            ckpts, manifest, train, val, seed, train_cfg=transfer_cfg)
        primary = mmae.MmaeModel.from_checkpoint(load_checkpoint(ckpt_path(ratios[-1])))
        blocks = cfg["sweeps"]["blocks"]
        reports += transfer.run_blocks_sweep(primary, manifest, train, val, seed,
                                             ks=blocks, train_cfg=transfer_cfg)
        sizes = cfg["sweeps"]["dataset_sizes"]
        if sizes:
            reports += transfer.run_size_sweep(primary, manifest, records, sizes,
                                               seed, train_cfg=transfer_cfg)
        cmanifest, crecords = labeled_records("circle")
        if len(crecords) >= 5:
            ctrain, cval = transfer.split_80_20(crecords, seed)
            report, _ = transfer.fit_linear_probe(primary, cmanifest, ctrain, cval,
                                                  seed, experiment="circle_probe")
            reports.append(report)
        transfer.reports_to_csv(reports, ws.reports / "report.csv")

        # persist one fine-tuned regressor for saliency
        _, reg = transfer.finetune(primary, transfer.ProbeConfig(mode="full", head="mlp"),
                                   manifest, train, val, seed, transfer_cfg)
        reg.save(ws.checkpoints / "regressor-full.ckpt", {"config_hash": ws.hash})

    _timed("transfer", ws, force, stage_transfer)

    def stage_saliency():
        reg_path = ws.checkpoints / "regressor-full.ckpt"
        manifest, records = labeled_records("fiber")
        if not reg_path.exists() or len(records) < 5:
            _log("saliency", "skipped: no regressor available")
            return
        reg = transfer.Regressor.load(reg_path)
        component = cfg["saliency"]["component"]
        _, val = transfer.split_80_20(records, seed)
        for record in val[:cfg["saliency"]["n_images"]]:
            image = read_pgm(manifest.resolve(record))
            label = getattr(record, f"{component}_gpa")
            smap = saliency_mod.saliency(reg, image, component, label,
                                         image_id=record.id, checkpoint_id=ws.hash)
            saliency_mod.save_map_csv(smap, ws.figures / f"saliency-{record.id}.csv")
            overlay = saliency_mod.render_overlay(smap.values, image)
            write_png(ws.figures / f"saliency-{record.id}.png", overlay)

    _timed("saliency", ws, force, stage_saliency)

    def stage_figures():
        report_csv = ws.reports / "report.csv"
        if report_csv.exists():
            emit_figures(read_report_csv(report_csv), ws.figures)
        manifest = DatasetManifest.load(ws.datasets / "fiber" / "manifest.jsonl")
        model = mmae.MmaeModel.from_checkpoint(load_checkpoint(ckpt_path(ratios[-1])))
        for record in manifest.records[:3]:
            image = read_pgm(manifest.resolve(record))
            trip = mmae.reconstruct(model, image, model.cfg.mask_ratio, seed)
            write_pgm(ws.figures / f"triptych-{record.id}.pgm",
                      compose_triptych(trip))

    _timed("figures", ws, force, stage_figures)
    return ws.run_dir


def compose_triptych(trip: dict) -> np.ndarray:
    """(ground truth | masked | reconstruction) laid out left to right."""
    gap = 4
    panels = (trip["original"], trip["masked"], trip["composite"])
    h = panels[0].shape[0]
    sep = np.full((h, gap), 255, dtype=np.uint8)
    pieces = []
    for i, p in enumerate(panels):
        if i:
            pieces.append(sep)
        pieces.append(p)
    return np.concatenate(pieces, axis=1)


# -- figures ------------------------------------------------------------


def read_report_csv(path) -> list[transfer.ExperimentReport]:
    reports = []
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip().split(",")
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            row = dict(zip(header, line.split(",")))
            reports.append(transfer.ExperimentReport(
                experiment=row["experiment"], mask_ratio=float(row["mask_ratio"]),
                mode=row["mode"], k=int(row["k"]), n_data=int(row["n_data"]),
                r2_c1111=float(row["r2_c1111"]), r2_c2222=float(row["r2_c2222"]),
                r2_c1212=float(row["r2_c1212"]), r2_avg=float(row["r2_avg"]),
                seed=int(row["seed"])))
    return reports


_SWEEP_AXES = {
    "masking_ratio_sweep": ("mask_ratio", "pre-training masking ratio"),
    "blocks_sweep": ("k", "encoder blocks fine-tuned"),
    "size_sweep": ("n_data", "labeled data instances"),
}


def emit_figures(reports: list[transfer.ExperimentReport], fig_dir) -> list[Path]:
    """Two-panel (average / per-component) charts per sweep, SVG files."""
    fig_dir = Path(fig_dir)
    written: list[Path] = []
    if not reports:
        print("emit_figures: empty report set, nothing to draw", file=sys.stderr)
        return written
    for experiment, (attr, xlabel) in _SWEEP_AXES.items():
        rows = [r for r in reports if r.experiment == experiment]
        if not rows:
            continue
        modes = sorted({r.mode for r in rows})
        avg_series, comp_series = [], []
        for mode in modes:
            sel = sorted((r for r in rows if r.mode == mode),
                         key=lambda r: getattr(r, attr))
            xs = [float(getattr(r, attr)) for r in sel]
            avg_series.append((f"average ({mode})", xs, [r.r2_avg for r in sel]))
            for comp in ("r2_c1111", "r2_c2222", "r2_c1212"):
                label = comp[3:].upper() + (f" ({mode})" if len(modes) > 1 else "")
                comp_series.append((label, xs, [getattr(r, comp) for r in sel]))
        avg_path = fig_dir / f"{experiment}_avg.svg"
        comp_path = fig_dir / f"{experiment}_components.svg"
        plotsvg.line_chart(avg_path, avg_series, xlabel, "validation R^2",
                           title=experiment.replace("_", " "))
        plotsvg.line_chart(comp_path, comp_series, xlabel, "validation R^2",
                           title=experiment.replace("_", " ") + " (components)")
        written += [avg_path, comp_path]
    return written
