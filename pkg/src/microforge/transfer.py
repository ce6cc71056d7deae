"""Transfer learning on top of the pre-trained encoder.

Linear probing on frozen [cls] embeddings, partial fine-tuning of the
last k encoder blocks, end-to-end fine-tuning, R-squared evaluation of
the three stiffness targets, and the experiment sweeps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint, save_checkpoint, load_checkpoint, params_digest
from .imageio import read_pgm
from .manifest import DatasetManifest, ManifestRecord, ManifestError
from .mmae import MmaeConfig, MmaeModel, patchify

COMPONENTS = ("c1111", "c2222", "c1212")


class DegenerateTargetError(RuntimeError):
    """A target component has zero variance; R-squared is undefined."""


@dataclass(frozen=True)
class ProbeConfig:
    mode: str = "linear"  # linear | partial | full
    k: int = 0            # blocks fine-tuned, counted from the output end
    head: str = "linear"  # linear | mlp
    hidden: int = 64

    def __post_init__(self):
        if self.mode not in ("linear", "partial", "full"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.head not in ("linear", "mlp"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.mode == "linear" and self.head != "linear":
            raise ValueError("linear probing requires a linear head")
        if self.k < 0:
            raise ValueError("k must be non-negative")


@dataclass(frozen=True)
class TransferTrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3


@dataclass
class ExperimentReport:
    experiment: str
    mask_ratio: float
    mode: str
    k: int
    n_data: int
    r2_c1111: float
    r2_c2222: float
    r2_c1212: float
    r2_avg: float
    seed: int

    CSV_HEADER = "experiment,mask_ratio,mode,k,n_data,r2_c1111,r2_c2222,r2_c1212,r2_avg,seed"

    def csv_row(self) -> str:
        return (f"{self.experiment},{self.mask_ratio!r},{self.mode},{self.k},{self.n_data},"
                f"{self.r2_c1111!r},{self.r2_c2222!r},{self.r2_c1212!r},{self.r2_avg!r},"
                f"{self.seed}")


def reports_to_csv(reports: list[ExperimentReport], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(ExperimentReport.CSV_HEADER + "\n")
        for r in reports:
            f.write(r.csv_row() + "\n")


# -- metric and split ---------------------------------------------------


def r2_score(preds: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-component and average coefficient of determination."""
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if preds.shape != targets.shape:
        raise ValueError(f"shape mismatch: preds {preds.shape} vs targets {targets.shape}")
    if preds.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    ss_tot = np.sum((targets - targets.mean(axis=0)) ** 2, axis=0)
    for j, s in enumerate(ss_tot):
        if s == 0.0:
            raise DegenerateTargetError(f"target component {j} has zero variance")
    ss_res = np.sum((targets - preds) ** 2, axis=0)
    per = 1.0 - ss_res / ss_tot
    return per, float(np.mean(per))


def split_80_20(records: list[ManifestRecord], seed: int
                ) -> tuple[list[ManifestRecord], list[ManifestRecord]]:
    """Deterministic shuffle then 80/20 split (floor on the train size)."""
    if len(records) < 5:
        raise ManifestError("need at least 5 labeled records to split")
    for r in records:
        if not r.labeled:
            raise ManifestError(f"record {r.id} is unlabeled")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x5B11])))
    order = rng.permutation(len(records))
    n_train = int(math.floor(0.8 * len(records)))
    train = [replace(records[i], split="train") for i in order[:n_train]]
    val = [replace(records[i], split="val") for i in order[n_train:]]
    return train, val


# -- target scaling -----------------------------------------------------


@dataclass(frozen=True)
class TargetScaler:
    mean: tuple
    std: tuple

    @classmethod
    def fit(cls, targets: np.ndarray) -> "TargetScaler":
        mean = targets.mean(axis=0)
        std = targets.std(axis=0)
        for j, s in enumerate(std):
            if s == 0.0:
                raise DegenerateTargetError(
                    f"target component {COMPONENTS[j]} has zero variance on the train split")
        return cls(tuple(float(x) for x in mean), tuple(float(x) for x in std))

    def transform(self, y: np.ndarray) -> np.ndarray:
        return (y - np.array(self.mean)) / np.array(self.std)

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return z * np.array(self.std) + np.array(self.mean)


def record_targets(records: list[ManifestRecord]) -> np.ndarray:
    return np.array([r.labels for r in records], dtype=np.float64)


def load_record_tokens(manifest: DatasetManifest, records: list[ManifestRecord],
                       cfg: MmaeConfig) -> np.ndarray:
    return np.stack([patchify(read_pgm(manifest.resolve(r)), cfg.patch_size)
                     for r in records])


# -- embeddings ---------------------------------------------------------


def extract_cls(model: MmaeModel, image: np.ndarray) -> np.ndarray:
    """The [cls] latent of a single image, all patches visible."""
    tokens = patchify(image, model.cfg.patch_size)[None]
    return model.encode_all(tokens).data[0, 0].copy()


def embed_tokens(model: MmaeModel, tokens_all: np.ndarray,
                 batch_size: int = 64) -> np.ndarray:
    """[cls] embeddings for a token stack, shape (N, embed_dim)."""
    out = []
    for start in range(0, tokens_all.shape[0], batch_size):
        latents = model.encode_all(tokens_all[start:start + batch_size])
        out.append(latents.data[:, 0, :].copy())
    return np.concatenate(out)


# -- heads --------------------------------------------------------------


def init_head(cfg: ProbeConfig, embed_dim: int, seed: int) -> dict[str, Tensor]:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x4EAD])))
    if cfg.head == "linear":
        arrays = {
            "head.w": ad.truncated_normal(rng, (embed_dim, 3)),
            "head.b": np.zeros(3),
        }
    else:
        arrays = {
            "head.w1": ad.truncated_normal(rng, (embed_dim, cfg.hidden)),
            "head.b1": np.zeros(cfg.hidden),
            "head.w2": ad.truncated_normal(rng, (cfg.hidden, 3)),
            "head.b2": np.zeros(3),
        }
    return {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}


def head_forward(head: dict[str, Tensor], cls_latent: Tensor) -> Tensor:
    if "head.w" in head:
        return ad.matmul(cls_latent, head["head.w"]) + head["head.b"]
    hidden = ad.gelu(ad.matmul(cls_latent, head["head.w1"]) + head["head.b1"])
    return ad.matmul(hidden, head["head.w2"]) + head["head.b2"]


# -- linear probing -----------------------------------------------------


def least_squares_probe(x_train, y_train, x_val) -> np.ndarray:
    """Closed-form least squares on raw embeddings (independent oracle)."""
    xa = np.column_stack([x_train, np.ones(len(x_train))])
    w, *_ = np.linalg.lstsq(xa, y_train, rcond=None)
    return np.column_stack([x_val, np.ones(len(x_val))]) @ w


def _fit_linear_gd(x: np.ndarray, y: np.ndarray, iters: int = 400) -> tuple[np.ndarray, np.ndarray]:
    """Gradient descent on the MSE of a linear map, in whitened coordinates.

    Whitening is an affine reparameterization, so the optimum is the
    ordinary least-squares fit; GD converges geometrically because the
    whitened Hessian is (2/3) I. Returns raw-space (weights, bias).
    """
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / len(x)
    evals, evecs = np.linalg.eigh(cov)
    whiten = evecs / np.sqrt(np.maximum(evals, 1e-12))
    xw = xc @ whiten

    w = np.zeros((x.shape[1], y.shape[1]))
    b = y.mean(axis=0).copy()
    lr = 1.2
    n = len(x)
    for _ in range(iters):
        diff = xw @ w + b - y
        gw = 2.0 * xw.T @ diff / (n * y.shape[1])
        gb = 2.0 * diff.sum(axis=0) / (n * y.shape[1])
        w -= lr * gw
        b -= lr * gb
    w_raw = whiten @ w
    return w_raw, b - mu @ w_raw


def fit_linear_probe(model: MmaeModel, manifest: DatasetManifest,
                     train: list[ManifestRecord], val: list[ManifestRecord],
                     seed: int, experiment: str = "linear_probe",
                     mask_ratio: float | None = None
                     ) -> tuple[ExperimentReport, "Regressor"]:
    """MSE-trained linear map on frozen [cls] embeddings; report in GPa."""
    cfg = model.cfg
    before = params_digest(model.state())
    x_train = embed_tokens(model, load_record_tokens(manifest, train, cfg))
    x_val = embed_tokens(model, load_record_tokens(manifest, val, cfg))
    scaler = TargetScaler.fit(record_targets(train))
    y_train = scaler.transform(record_targets(train))
    w, b = _fit_linear_gd(x_train, y_train)
    preds = scaler.inverse(x_val @ w + b)
    per, avg = r2_score(preds, record_targets(val))
    if params_digest(model.state()) != before:
        raise RuntimeError("linear probing mutated the encoder")
    report = ExperimentReport(
        experiment=experiment,
        mask_ratio=_ckpt_ratio(model, mask_ratio),
        mode="linear", k=0, n_data=len(train) + len(val),
        r2_c1111=float(per[0]), r2_c2222=float(per[1]), r2_c1212=float(per[2]),
        r2_avg=avg, seed=seed)
    head = {"head.w": Tensor(w, requires_grad=True), "head.b": Tensor(b, requires_grad=True)}
    return report, Regressor(model=model, head=head, scaler=scaler,
                             probe=ProbeConfig(mode="linear"))


def _ckpt_ratio(model: MmaeModel, override: float | None) -> float:
    return model.cfg.mask_ratio if override is None else override


# -- fine-tuning --------------------------------------------------------


@dataclass
class Regressor:
    """Encoder plus regression head; predicts the stiffness triplet."""

    model: MmaeModel
    head: dict[str, Tensor]
    scaler: TargetScaler
    probe: ProbeConfig

    def predict_graph(self, tokens) -> Tensor:
        """Standardized predictions (B, 3) with the graph kept for backward."""
        latents = self.model.encode_all(tokens)
        cls_latent = ad.reshape(ad.slice_axis(latents, 1, 0, 1),
                                (latents.shape[0], latents.shape[2]))
        return head_forward(self.head, cls_latent)

    def predict(self, tokens_all: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Predictions in GPa for a token stack."""
        out = []
        for start in range(0, tokens_all.shape[0], batch_size):
            out.append(self.predict_graph(tokens_all[start:start + batch_size]).data.copy())
        return self.scaler.inverse(np.concatenate(out))

    def save(self, path, extra_metadata: dict | None = None) -> None:
        params = self.model.state()
        params.update({k: t.data.copy() for k, t in self.head.items()})
        meta = {
            "probe": asdict(self.probe),
            "target_mean": list(self.scaler.mean),
            "target_std": list(self.scaler.std),
        }
        meta.update(extra_metadata or {})
        save_checkpoint(path, asdict(self.model.cfg), params, meta)

    @classmethod
    def load(cls, path) -> "Regressor":
        ckpt = load_checkpoint(path)
        head = {k: Tensor(v, requires_grad=True)
                for k, v in ckpt.params.items() if k.startswith("head.")}
        encoder = {k: v for k, v in ckpt.params.items() if not k.startswith("head.")}
        model = MmaeModel(MmaeConfig(**ckpt.config), params=encoder)
        return cls(model=model, head=head,
                   scaler=TargetScaler(tuple(ckpt.metadata["target_mean"]),
                                       tuple(ckpt.metadata["target_std"])),
                   probe=ProbeConfig(**ckpt.metadata["probe"]))


def trainable_param_names(cfg: MmaeConfig, probe: ProbeConfig) -> set[str]:
    """Encoder parameters updated by the given fine-tuning mode.

    Decoder parameters never train during transfer. Patch projection and
    [cls] token stay frozen except in full fine-tuning; the final
    encoder norm trains whenever at least one block does.
    """
    names: set[str] = set()
    if probe.mode == "linear" or (probe.mode == "partial" and probe.k == 0):
        return names
    if probe.mode == "full":
        names.add("patch_embed.w")
        names.add("patch_embed.b")
        names.add("cls_token")
        k = cfg.encoder_depth
    else:
        k = min(probe.k, cfg.encoder_depth)
    for i in range(cfg.encoder_depth - k, cfg.encoder_depth):
        names.update({f"enc.blocks.{i}.{suffix}" for suffix in _BLOCK_SUFFIXES})
    names.add("enc.norm.g")
    names.add("enc.norm.b")
    return names


_BLOCK_SUFFIXES = (
    "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk",
    "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
)


def finetune(source: MmaeModel, probe: ProbeConfig, manifest: DatasetManifest,
             train: list[ManifestRecord], val: list[ManifestRecord], seed: int,
             train_cfg: TransferTrainConfig = TransferTrainConfig(),
             experiment: str = "finetune", mask_ratio: float | None = None
             ) -> tuple[ExperimentReport, Regressor]:
    """Fine-tune per the probe mode; returns the best-validation regressor.

    Only the parameters designated by the mode change; everything else
    is bitwise identical to the source checkpoint.
    """
    cfg = source.cfg
    model = MmaeModel(cfg, params=source.state())
    head = init_head(probe, cfg.embed_dim, seed)

    scaler = TargetScaler.fit(record_targets(train))
    tokens_train = load_record_tokens(manifest, train, cfg)
    tokens_val = load_record_tokens(manifest, val, cfg)
    y_train = scaler.transform(record_targets(train))
    y_val = record_targets(val)

    allowed = trainable_param_names(cfg, probe)
    trainable = {name: model.params[name] for name in sorted(allowed)}
    trainable.update(head)
    opt = ad.Adam(trainable, lr=train_cfg.learning_rate)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xF17E])))
    reg = Regressor(model=model, head=head, scaler=scaler, probe=probe)

    best: tuple[float, dict, dict] | None = None
    n = len(train)
    for _epoch in range(train_cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, train_cfg.batch_size):
            idx = perm[start:start + train_cfg.batch_size]
            preds = reg.predict_graph(tokens_train[idx])
            diff = preds - Tensor(y_train[idx])
            loss = ad.mean(diff * diff)
            if not loss.is_finite():
                raise ad.NonFiniteError(f"non-finite fine-tuning loss (epoch {_epoch})")
            loss.backward()
            opt.step()
            for p in model.params.values():  # drop grads on frozen parameters
                p.grad = None
        _, avg = r2_score(reg.predict(tokens_val), y_val)
        if best is None or avg > best[0]:
            best = (avg, model.state(), {k: t.data.copy() for k, t in head.items()})

    best_avg, best_state, best_head = best
    best_model = MmaeModel(cfg, params=best_state)
    best_reg = Regressor(model=best_model,
                         head={k: Tensor(v, requires_grad=True) for k, v in best_head.items()},
                         scaler=scaler, probe=probe)
    per, avg = r2_score(best_reg.predict(tokens_val), y_val)
    report = ExperimentReport(
        experiment=experiment,
        mask_ratio=_ckpt_ratio(source, mask_ratio),
        mode=probe.mode, k=(cfg.encoder_depth if probe.mode == "full" else probe.k),
        n_data=len(train) + len(val),
        r2_c1111=float(per[0]), r2_c2222=float(per[1]), r2_c1212=float(per[2]),
        r2_avg=avg, seed=seed)
    return report, best_reg


# -- sweeps -------------------------------------------------------------


def run_blocks_sweep(source: MmaeModel, manifest: DatasetManifest,
                     train: list[ManifestRecord], val: list[ManifestRecord],
                     seed: int, ks: list[int] | None = None,
                     train_cfg: TransferTrainConfig = TransferTrainConfig()
                     ) -> list[ExperimentReport]:
    """R-squared versus the number of encoder blocks fine-tuned.

    k = 0 reports both the linear-head probe and the head-only
    feedforward run (the two readings of "0 blocks"); k = depth is the
    end-to-end run.
    """
    depth = source.cfg.encoder_depth
    if ks is None:
        ks = list(range(depth + 1))
    reports = []
    for k in ks:
        if k == 0:
            report, _ = fit_linear_probe(source, manifest, train, val, seed,
                                         experiment="blocks_sweep")
            reports.append(report)
            report, _ = finetune(source, ProbeConfig(mode="partial", k=0, head="mlp"),
                                 manifest, train, val, seed, train_cfg,
                                 experiment="blocks_sweep")
            reports.append(report)
        elif k >= depth:
            report, _ = finetune(source, ProbeConfig(mode="full", head="mlp"),
                                 manifest, train, val, seed, train_cfg,
                                 experiment="blocks_sweep")
            reports.append(report)
        else:
            report, _ = finetune(source, ProbeConfig(mode="partial", k=k, head="mlp"),
                                 manifest, train, val, seed, train_cfg,
                                 experiment="blocks_sweep")
            reports.append(report)
    return reports


def run_masking_ratio_sweep(checkpoints: dict[float, Path], manifest: DatasetManifest,
                            train: list[ManifestRecord], val: list[ManifestRecord],
                            seed: int, modes: tuple[str, ...] = ("linear", "full"),
                            train_cfg: TransferTrainConfig = TransferTrainConfig()
                            ) -> list[ExperimentReport]:
    """Probe and fine-tune against checkpoints pre-trained at each ratio."""
    reports = []
    for ratio in sorted(checkpoints):
        ckpt = load_checkpoint(checkpoints[ratio])
        source = MmaeModel.from_checkpoint(ckpt)
        header_ratio = float(ckpt.metadata.get("mask_ratio", ratio))
        if "linear" in modes:
            report, _ = fit_linear_probe(source, manifest, train, val, seed,
                                         experiment="masking_ratio_sweep",
                                         mask_ratio=header_ratio)
            reports.append(report)
        if "full" in modes:
            report, _ = finetune(source, ProbeConfig(mode="full", head="mlp"),
                                 manifest, train, val, seed, train_cfg,
                                 experiment="masking_ratio_sweep", mask_ratio=header_ratio)
            reports.append(report)
    return reports


def run_size_sweep(source: MmaeModel, manifest: DatasetManifest,
                   records: list[ManifestRecord], sizes: list[int], seed: int,
                   mode: str = "full",
                   train_cfg: TransferTrainConfig = TransferTrainConfig()
                   ) -> list[ExperimentReport]:
    """R-squared versus the number of labeled instances used for transfer."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x517E])))
    order = rng.permutation(len(records))
    reports = []
    for size in sizes:
        if size > len(records):
            raise ValueError(f"size {size} exceeds available labeled records {len(records)}")
        subset = [records[i] for i in order[:size]]
        train, val = split_80_20(subset, seed)
        if mode == "linear":
            report, _ = fit_linear_probe(source, manifest, train, val, seed,
                                         experiment="size_sweep")
        else:
            report, _ = finetune(source, ProbeConfig(mode=mode, head="mlp"), manifest,
                                 train, val, seed, train_cfg, experiment="size_sweep")
        reports.append(report)
    return reports
