"""Paired sequential-vs-joint experiment on synthetic data.

Both models share data and the sequential pre-training: the joint model is
fine-tuned from the sequential one, as in the training pipeline.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data_io import SyntheticConfig, generate_synthetic, synthetic_layout
from .features import HogConfig
from .training import (
    TrainConfig, augment_flip, prepare, pretrain_sequential, split_validation, stage_bias_variance,
    train_joint,
)


@dataclass
class BenchmarkConfig:
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 500
    synthetic: SyntheticConfig = field(default_factory=lambda: SyntheticConfig(P=5, sample_count=0, seed=1))
    # Patches are scaled to the 64 px synthetic faces (inter-eye distance ~16 px).
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        T=5, learning_rate=0.1, patch_sizes=(16, 16, 16, 8, 8), validation_count=200, seed=0))
    hog: HogConfig = field(default_factory=HogConfig)


@dataclass
class BenchmarkResult:
    sequential: np.ndarray   # (T+1, 2) mean / std of test normalized error per stage
    joint: np.ndarray
    seconds: float
    sequential_model: object = None
    joint_model: object = None

    @staticmethod
    def drop_fractions(bv: np.ndarray) -> np.ndarray:
        """Share of the total stage-0 -> stage-T error reduction made by each stage."""
        m = bv[:, 0]
        return -np.diff(m) / (m[0] - m[-1])

    def table(self) -> str:
        rows = ["stage  seq_mean  seq_std  joint_mean  joint_std"]
        for t, (s, j) in enumerate(zip(self.sequential, self.joint)):
            rows.append(f"{t:5d}  {s[0]:.5f}  {s[1]:.5f}  {j[0]:.5f}    {j[1]:.5f}")
        return "\n".join(rows)


def run_paired(cfg: BenchmarkConfig = BenchmarkConfig(), logger=None) -> BenchmarkResult:
    start = time.perf_counter()
    tc = replace(cfg.train, validation_count=cfg.n_val)
    syn = replace(cfg.synthetic, sample_count=cfg.n_train + cfg.n_val + cfg.n_test)
    layout = synthetic_layout(syn.P)
    samples = generate_synthetic(syn)
    fit_set, test_set = samples[:cfg.n_train + cfg.n_val], samples[cfg.n_train + cfg.n_val:]

    rng = np.random.default_rng(tc.seed)
    train_s, val_s = split_validation(fit_set, tc.validation_count, rng)
    if tc.flip:
        train_s = augment_flip(train_s, layout)
    local_cfgs = tc.local_cfgs()
    train = prepare(train_s, cfg.hog, local_cfgs)
    val = prepare(val_s, cfg.hog, local_cfgs) if val_s else None
    test = prepare(test_set, cfg.hog, local_cfgs)
    del train_s, samples

    seq = pretrain_sequential(train, val, tc, layout, cfg.hog, rng=rng, logger=logger)
    joint = train_joint(seq, train, val, tc, rng=rng, logger=logger)
    return BenchmarkResult(stage_bias_variance(seq, test), stage_bias_variance(joint, test),
                           time.perf_counter() - start, seq, joint)
