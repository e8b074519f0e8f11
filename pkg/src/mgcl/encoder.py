"""Online encoder, momentum twin, projection heads, and negative queues.

The backbone is a small 4-stage BatchNorm CNN; inputs in [0, 1] are
standardized around mid-gray on entry. The global head is a 2-layer MLP
on mean-pooled features; the dense head is two stacked 1x1 convolutions
producing one embedding per output cell. Both heads share the output
dimension and L2-normalize.

In train mode BatchNorm uses batch statistics (the usual contrastive
setup); evaluation and probing run in eval mode, where encoding is a pure
function of parameters and buffers.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError

INPUT_MEAN = 0.5
INPUT_STD = 0.25


@dataclass
class EncoderConfig:
    width: int = 32  # base channel count, doubled per stage
    depth: int = 1  # extra 3x3 convs per stage beyond the strided one
    embed_dim: int = 32
    proj_hidden: int = 0  # 0 = use the backbone output width
    output_stride: int = 8
    in_channels: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.width < 4:
            raise ConfigError(f"width must be >= 4, got {self.width}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.embed_dim < 2:
            raise ConfigError(f"embed_dim must be >= 2, got {self.embed_dim}")
        if self.output_stride not in (2, 4, 8, 16):
            raise ConfigError(
                f"output_stride must be one of 2/4/8/16, got {self.output_stride}"
            )


class Encoder(nn.Module):
    def __init__(self, config: EncoderConfig) -> None:
        super().__init__()
        self.config = config
        w = config.width
        channels = [w, 2 * w, 4 * w, 8 * w]
        n_down = int(math.log2(config.output_stride))
        torch.manual_seed(config.seed)

        stages = []
        in_ch = config.in_channels
        for i, out_ch in enumerate(channels):
            stride = 2 if i >= len(channels) - n_down else 1
            blocks = [
                nn.Conv2d(in_ch, out_ch, 3, stride, 1),
                nn.BatchNorm2d(out_ch),
                nn.ReLU(inplace=True),
            ]
            for _ in range(config.depth - 1):
                blocks += [
                    nn.Conv2d(out_ch, out_ch, 3, 1, 1),
                    nn.BatchNorm2d(out_ch),
                    nn.ReLU(inplace=True),
                ]
            stages.append(nn.Sequential(*blocks))
            in_ch = out_ch
        self.backbone = nn.Sequential(*stages)
        self.feature_dim = channels[-1]

        hidden = config.proj_hidden or self.feature_dim
        self.global_proj = nn.Sequential(
            nn.Linear(self.feature_dim, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, config.embed_dim),
        )
        # BatchNorm between the two 1x1 convs keeps per-channel variance
        # alive across cells; without it the dense map can go spatially
        # constant under the attraction-only part of the pixel objective
        self.dense_proj = nn.Sequential(
            nn.Conv2d(self.feature_dim, config.embed_dim, 1),
            nn.BatchNorm2d(config.embed_dim),
            nn.ReLU(inplace=True),
            nn.Conv2d(config.embed_dim, config.embed_dim, 1),
        )

    def _check_input(self, images: torch.Tensor) -> None:
        if images.dim() != 4 or images.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected (B, {self.config.in_channels}, H, W) input, "
                f"got {tuple(images.shape)}"
            )
        if min(images.shape[2], images.shape[3]) < self.config.output_stride * 2:
            raise ValueError(
                f"input {images.shape[2]}x{images.shape[3]} leaves a dense grid "
                f"smaller than 2x2 at stride {self.config.output_stride}"
            )

    def features(self, images: torch.Tensor) -> torch.Tensor:
        self._check_input(images)
        return self.backbone((images - INPUT_MEAN) / INPUT_STD)

    def encode_global(self, images: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) -> (B, D) unit-norm global embeddings."""
        pooled = self.features(images).mean(dim=(2, 3))
        return F.normalize(self.global_proj(pooled), dim=1)

    def encode_dense(self, images: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) -> (B, D, S, S) with unit-norm cell embeddings."""
        return F.normalize(self.dense_proj(self.features(images)), dim=1)

    def encode(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """One backbone pass shared by both heads: (global, dense)."""
        feats = self.features(images)
        z = F.normalize(self.global_proj(feats.mean(dim=(2, 3))), dim=1)
        v = F.normalize(self.dense_proj(feats), dim=1)
        return z, v


def make_momentum_encoder(online: Encoder) -> Encoder:
    target = copy.deepcopy(online)
    for p in target.parameters():
        p.requires_grad_(False)
    return target


@torch.no_grad()
def momentum_update(online: nn.Module, target: nn.Module, m: float) -> None:
    """EMA update: target <- m * target + (1 - m) * online, elementwise."""
    if not 0.0 <= m <= 1.0:
        raise ConfigError(f"momentum coefficient must be in [0, 1], got {m}")
    online_params = dict(online.named_parameters())
    target_params = dict(target.named_parameters())
    if online_params.keys() != target_params.keys():
        raise ValueError("online and momentum encoders have different parameters")
    for name, p_t in target_params.items():
        p_o = online_params[name]
        if p_t.shape != p_o.shape:
            raise ValueError(f"shape mismatch for {name}")
        p_t.mul_(m).add_(p_o.detach(), alpha=1.0 - m)


class NegativeQueue:
    """Fixed-capacity FIFO of unit-norm embedding rows."""

    def __init__(self, capacity: int, dim: int, dtype: torch.dtype = torch.float32):
        if capacity < 1:
            raise ConfigError(f"queue capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.dim = dim
        self.buffer = torch.zeros(capacity, dim, dtype=dtype)
        self.cursor = 0
        self.size = 0

    def push(self, batch: torch.Tensor) -> None:
        if batch.numel() == 0:
            return
        if batch.dim() != 2 or batch.shape[1] != self.dim:
            raise ValueError(
                f"expected (N, {self.dim}) batch, got {tuple(batch.shape)}"
            )
        norms = torch.linalg.vector_norm(batch, dim=1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-4):
            raise ValueError("queue entries must be unit-norm")
        batch = batch.detach().to(self.buffer.dtype)
        if batch.shape[0] > self.capacity:
            batch = batch[-self.capacity :]
        n = batch.shape[0]
        first = min(n, self.capacity - self.cursor)
        self.buffer[self.cursor : self.cursor + first] = batch[:first]
        if n > first:
            self.buffer[: n - first] = batch[first:]
        self.cursor = (self.cursor + n) % self.capacity
        self.size = min(self.size + n, self.capacity)

    def negatives(self) -> torch.Tensor:
        """Snapshot of current contents, oldest first; callers own the copy."""
        if self.size == 0:
            return torch.zeros(0, self.dim, dtype=self.buffer.dtype)
        if self.size < self.capacity:
            return self.buffer[: self.size].clone()
        return torch.cat(
            [self.buffer[self.cursor :], self.buffer[: self.cursor]]
        ).clone()

    def state_dict(self) -> dict:
        return {
            "buffer": self.buffer.clone(),
            "cursor": self.cursor,
            "size": self.size,
        }

    def load_state_dict(self, state: dict) -> None:
        if state["buffer"].shape != self.buffer.shape:
            raise ValueError("queue buffer shape mismatch")
        self.buffer = state["buffer"].clone()
        self.cursor = int(state["cursor"])
        self.size = int(state["size"])
