"""Student branch: ResNet-1D frontend over frame features, then self-attention."""
from __future__ import annotations

from dataclasses import asdict, dataclass

from nepadd import tensor as nt
from nepadd.errors import ConfigError, ShapeError
from nepadd.layers import (Conv1d, Conv1dSpec, Module, ResidualBlock, SelfAttention,
                           SelfAttentionSpec)


@dataclass(frozen=True)
class PaddBranchConfig:
    d_in: int = 16
    hidden_channels: int = 32
    model_dim: int = 16
    residual_blocks: int = 4
    head_count: int = 1

    def __post_init__(self):
        dims = (self.d_in, self.hidden_channels, self.model_dim, self.head_count)
        if min(dims) <= 0 or self.residual_blocks < 0:
            raise ConfigError(f"PaddBranchConfig needs positive dims, got {asdict(self)}")
        if self.model_dim % self.head_count:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by head_count {self.head_count}"
            )

    @property
    def widths(self):
        return (self.d_in, self.hidden_channels, self.hidden_channels, self.model_dim)


PADD_PRESETS = {
    "desk": PaddBranchConfig(),
    # documentation only: the published sizes on top of 768-d SSL features
    "paper-scale": PaddBranchConfig(d_in=768, hidden_channels=512, model_dim=128,
                                    residual_blocks=12, head_count=1),
}


class PaddBranch(Module):
    """Produces (H_ADD, alpha_ADD, H_ADD_attended) for one utterance of shape (T, d_in)."""

    def __init__(self, cfg: PaddBranchConfig, rng):
        self.cfg = cfg
        self.conv_in = Conv1d(Conv1dSpec(5, 2, 1, cfg.d_in, cfg.hidden_channels, bias=False), rng)
        self.blocks = [ResidualBlock(cfg.hidden_channels, rng) for _ in range(cfg.residual_blocks)]
        self.conv_out = Conv1d(Conv1dSpec(1, 0, 1, cfg.hidden_channels, cfg.model_dim), rng)
        self.attention = SelfAttention(SelfAttentionSpec(cfg.model_dim, cfg.head_count), rng)

    def encode(self, x):
        if x.ndim != 2 or x.shape[1] != self.cfg.d_in:
            raise ShapeError(f"PADD branch expects (T, {self.cfg.d_in}) features, got {x.shape}")
        h = self.conv_in(nt.transpose(x))
        for block in self.blocks:
            h = block(h)
        return nt.transpose(self.conv_out(h))

    def forward(self, x):
        h_add = self.encode(nt.as_tensor(x))
        attended, alpha = self.attention(h_add)
        return h_add, alpha, attended
