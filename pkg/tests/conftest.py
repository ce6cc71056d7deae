"""Shared fixtures: a tiny model configuration and a small labeled dataset.

Session-scoped so the (relatively) expensive generation + labeling work
runs once for the whole unit suite.
"""

import re

import numpy as np
import pytest

from microforge import homogenize, microgen, mmae
from microforge.manifest import DatasetManifest


TINY_CFG = mmae.MmaeConfig(
    image_size=32, patch_size=8, embed_dim=16, encoder_depth=2,
    encoder_heads=2, decoder_dim=16, decoder_depth=1, decoder_heads=2,
    mask_ratio=0.75,
)


@pytest.fixture(scope="session")
def tiny_cfg():
    return TINY_CFG


@pytest.fixture(scope="session")
def fiber_dataset(tmp_path_factory):
    """40 labeled short-fiber images at 32^2: (manifest, directory)."""
    out = tmp_path_factory.mktemp("fiber32")
    manifest, _ = microgen.generate_dataset("fiber", 40, 32, seed=404, out_dir=out)
    labeled, report = homogenize.label_dataset(
        manifest, homogenize.MATRIX, homogenize.INCLUSION)
    assert not report.failed_ids
    labeled.save(out / "manifest.jsonl")
    return DatasetManifest.load(out / "manifest.jsonl"), out


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg):
    return mmae.MmaeModel(tiny_cfg, seed=7)


_CRITERION = re.compile(r"test_criterion_(\d+)_")

_CRITERION_LABELS = {
    1: "gradient correctness",
    2: "mask-count pin",
    3: "patch-geometry pin",
    4: "uniform closed forms",
    5: "solver oracle equivalence",
    6: "pre-training efficacy",
    7: "transfer ordering",
    8: "dataset-size trend",
    9: "cross-composite probe",
    10: "R-squared identities",
    11: "saliency oracle",
    12: "CLI determinism",
}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per numbered release criterion."""
    results: dict[int, bool] = {}
    for status, ok in (("passed", True), ("failed", False), ("error", False)):
        for rep in terminalreporter.stats.get(status, []):
            match = _CRITERION.search(getattr(rep, "nodeid", ""))
            if not match:
                continue
            num = int(match.group(1))
            results[num] = results.get(num, True) and ok
    if not results:
        return
    terminalreporter.section("release criteria")
    for num in sorted(results):
        label = _CRITERION_LABELS.get(num, "")
        terminalreporter.write_line(
            f"CRITERION {num:02d} {label}: {'PASS' if results[num] else 'FAIL'}")


@pytest.fixture(scope="session")
def pretrained_tiny(tiny_cfg, fiber_dataset, tmp_path_factory):
    """A briefly pre-trained tiny model (enough to beat random init)."""
    manifest, _ = fiber_dataset
    out = tmp_path_factory.mktemp("ckpt") / "tiny.ckpt"
    train_cfg = mmae.TrainConfig(epochs=8, batch_size=20, learning_rate=2e-3)
    model = mmae.pretrain(manifest, tiny_cfg, train_cfg, seed=5, out_path=out)
    return model, out
