"""Training: AdamW with decoupled weight decay, gradient clipping, and the
pretraining / fine-tuning / from-scratch loops."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ArgumentError, DatasetError, EquivalenceError, TrainingDiverged
from .numerics import GradRecord, RngStream, Tensor, tensor

DENOISER_LR = 1e-4
VISION_LR = 3e-5
TEXT_LR = 3e-5  # tiny trainable embedder stands in for a frozen text encoder


@dataclass
class TrainConfig:
    steps: int = 50_000
    batch_size: int = 64
    seed: int = 0
    lr_denoiser: float = DENOISER_LR
    lr_vision: float = VISION_LR
    lr_text: float = TEXT_LR
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    freeze_base: bool = False
    zero_init: bool = True  # False gives the randomly initialized adapter ablation
    checkpoint_every: int = 5000
    log_every: int = 100

    def __post_init__(self):
        if self.steps <= 0 or self.batch_size <= 0:
            raise ArgumentError("steps and batch_size must be positive")
        for lr in (self.lr_denoiser, self.lr_vision, self.lr_text):
            if lr <= 0:
                raise ArgumentError("learning rates must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    wz_norms: list = field(default_factory=list)  # (step, norm) pairs, fine-tune only
    wall_clock: float = 0.0
    checkpoint_path: str = ""
    config: dict = field(default_factory=dict)
    equivalence_checked: bool = False
    param_counts: dict = field(default_factory=dict)


def lr_for_param(name: str, config: TrainConfig) -> float:
    """Learning-rate groups: vision encoders, text embedder, everything else."""
    if name.startswith("image_enc.") or name.startswith("fphi.geo."):
        return config.lr_vision
    if name.startswith("instr_embed."):
        return config.lr_text
    return config.lr_denoiser


def clip_grad_norm(params: dict, max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


class AdamW:
    """Adaptive moments with decoupled weight decay, per-name learning rates."""

    def __init__(self, params: dict, config: TrainConfig, lr_override: float | None = None):
        self.params = params
        self.config = config
        self.lr_override = lr_override
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self):
        c = self.config
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            g = g.astype(p.data.dtype, copy=False)
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            lr = self.lr_override if self.lr_override is not None else lr_for_param(name, c)
            update = (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)
            p.data -= lr * update + lr * c.weight_decay * p.data

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None
