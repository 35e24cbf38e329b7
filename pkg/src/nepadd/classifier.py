"""Frame-level backend: Transformer encoder -> BiLSTM -> ReLU -> FC -> sigmoid.

Outputs are probabilities that each frame is authentic (label 1). Metrics
use the spoof score ``1 - p``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from nepadd import tensor as nt
from nepadd.errors import ConfigError, ShapeError
from nepadd.layers import (BiLSTM, BiLstmSpec, Linear, Module, TransformerEncoder,
                           TransformerEncoderSpec)

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class ClassifierConfig:
    dim: int = 16
    layers: int = 2
    heads: int = 2
    ff_dim: int = 64
    lstm_hidden: int = 16
    fc_width: int = 32
    positional: bool = True

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"classifier dim {self.dim} not divisible by {self.heads} heads")
        if self.fc_width != 2 * self.lstm_hidden:
            raise ConfigError(
                f"fc_width {self.fc_width} must equal the BiLSTM output 2*{self.lstm_hidden}"
            )


class Classifier(Module):
    def __init__(self, cfg: ClassifierConfig, rng):
        self.cfg = cfg
        self.encoder = TransformerEncoder(TransformerEncoderSpec(cfg.layers, cfg.heads, cfg.ff_dim),
                                          cfg.dim, rng, positional=cfg.positional)
        self.lstm = BiLSTM(BiLstmSpec(cfg.dim, cfg.lstm_hidden, 1), rng)
        self.head = Linear(cfg.fc_width, 1, rng)

    def forward(self, h):
        h = nt.as_tensor(h)
        if h.ndim != 2 or h.shape[1] != self.cfg.dim:
            raise ShapeError(f"classifier expects (T, {self.cfg.dim}) input, got {h.shape}")
        z = nt.relu(self.lstm(self.encoder(h)))
        return nt.reshape(nt.sigmoid(self.head(z)), (h.shape[0],))


def bce_frame_loss(probs, labels, spoof_weight=None):
    """Mean binary cross-entropy over frames; labels are 1=authentic, 0=spoof.

    ``spoof_weight`` optionally scales the loss on spoof frames.
    """
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if probs.shape != y.shape:
        raise ShapeError(f"{probs.shape[0] if probs.ndim else 0} probabilities vs {y.size} labels")
    if np.any((y != 0.0) & (y != 1.0)):
        raise ShapeError("labels must be 0/1")
    p = nt.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    w_neg = 1.0 if spoof_weight is None else float(spoof_weight)
    ll = nt.Tensor(y) * nt.log(p) + nt.Tensor(w_neg * (1.0 - y)) * nt.log(1.0 - p)
    return nt.mean(ll) * -1.0
