"""Invariant checks runnable against any parameter set (used by ``dcal check``)."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .embedding import ImageSample
from .model import MODES, DcalConfig, DcalModel, DcalParams, PairBatch, forward_batch, forward_train
from .rollout import rollout

ROW_SUM_TOL = 1e-5
PAIR_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def probe_images(cfg: DcalConfig, count: int = 4, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    shape = (count, cfg.image_height, cfg.image_width, cfg.channels)
    return np.floor(rng.random(shape) * 256).clip(0, 255).astype(np.float32) / 255.0


def check_rollout_stochastic(cfg: DcalConfig, params: DcalParams, images: np.ndarray) -> CheckResult:
    out = forward_batch(images, cfg, params)
    s_hat = rollout(out.attention).s_hat
    dev = float(np.abs(s_hat.sum(-1) - 1.0).max())
    ok = dev <= ROW_SUM_TOL and bool((s_hat >= 0).all())
    return CheckResult("rollout-stochastic", ok, f"max |row sum - 1| = {dev:.3e}")


def check_duplicate_pair(cfg: DcalConfig, params: DcalParams, images: np.ndarray) -> CheckResult:
    if not cfg.pwca_blocks:
        return CheckResult("duplicate-pair", True, "no PWCA blocks configured")
    quiet = dataclasses.replace(cfg, drop_path_max=0.0)
    worst = 0.0
    for img in images:
        sample = ImageSample(img)
        first, _ = forward_train(PairBatch(sample, sample), quiet, params)
        worst = max(worst, float(np.abs(first.logits_pwca.data - first.logits_sa.data).max()))
    return CheckResult("duplicate-pair", worst < PAIR_TOL, f"max |pwca - sa| logits = {worst:.3e}")


def check_pwca_removal(cfg: DcalConfig, params: DcalParams, images: np.ndarray) -> CheckResult:
    full = DcalModel(cfg, params)
    stripped = full.without_pwca()
    modes = MODES if cfg.glca_blocks else ("sa",)
    for mode in modes:
        a, b = full.infer(images, mode), stripped.infer(images, mode)
        if a.probs.tobytes() != b.probs.tobytes():
            return CheckResult("pwca-removal", False, f"mode {mode}: outputs differ")
    return CheckResult("pwca-removal", True, f"bitwise identical in modes {', '.join(modes)}")


def run_checks(cfg: DcalConfig, params: DcalParams) -> list[CheckResult]:
    images = probe_images(cfg)
    return [
        check_rollout_stochastic(cfg, params, images),
        check_duplicate_pair(cfg, params, images),
        check_pwca_removal(cfg, params, images),
    ]
