"""Contrastive losses over unit-norm embeddings.

Similarities are plain dot products: every caller feeds unit-norm vectors,
so dots equal cosines. All losses reduce with an arithmetic mean over
anchors so magnitudes stay comparable across batch and grid sizes. View-b
tensors are expected to arrive gradient-isolated (momentum branch); the
losses themselves propagate through whatever requires grad.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigError

TRIPLET_ORIENTATIONS = ("as_written", "corrected")


@dataclass
class Temperature:
    tau_ins: float = 0.2
    tau_pix: float = 0.2
    tau_km: float = 0.2

    def __post_init__(self) -> None:
        for name in ("tau_ins", "tau_pix", "tau_km"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")


@dataclass
class Margin:
    alpha: float = 0.3

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ConfigError(f"margin must be >= 0, got {self.alpha}")


def _as_tensor(x, ref: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    # python scalars and lists get full precision so scalar calls are exact
    dtype = ref.dtype if ref is not None else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def _nce(
    pos: torch.Tensor, extra_pos: torch.Tensor | None, negs: torch.Tensor, tau: float
) -> torch.Tensor:
    """-log((e^{pos/t} + sum e^{extra/t}) / (same + sum e^{neg/t})), stabilized.

    pos: (...,), extra_pos: (..., E) or None, negs: (..., N); returns (...,).
    The numerator terms are a subset of the denominator, so the result is
    always >= 0. With E = N = 0 the loss is exactly 0.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    pos = pos.unsqueeze(-1)
    num_terms = pos if extra_pos is None else torch.cat([pos, extra_pos], dim=-1)
    den_terms = torch.cat([num_terms, negs], dim=-1) if negs.shape[-1] else num_terms
    numerator = torch.logsumexp(num_terms / tau, dim=-1)
    denominator = torch.logsumexp(den_terms / tau, dim=-1)
    return denominator - numerator


def info_nce(pos_sim, neg_sims, tau: float) -> torch.Tensor:
    """InfoNCE for one anchor (or a batch of anchors on the leading dims)."""
    pos = _as_tensor(pos_sim)
    negs = _as_tensor(neg_sims, ref=pos)
    if negs.dim() == pos.dim():  # shared negative set
        negs = negs.expand(*pos.shape, negs.shape[-1]) if pos.dim() else negs
    if negs.numel() == 0:
        negs = negs.reshape(*pos.shape, 0)
    return _nce(pos, None, negs, tau)


def instance_loss(
    z_a: torch.Tensor, z_b: torch.Tensor, queue_negs: torch.Tensor, tau_ins: float
) -> torch.Tensor:
    """Batch-mean InfoNCE between paired global embeddings and queue negatives."""
    if z_a.shape != z_b.shape:
        raise ValueError(f"view shapes differ: {tuple(z_a.shape)} vs {tuple(z_b.shape)}")
    if queue_negs.numel() and queue_negs.shape[-1] != z_a.shape[-1]:
        raise ValueError("queue negative dim does not match embeddings")
    pos = (z_a * z_b).sum(dim=-1)
    negs = z_a @ queue_negs.T if queue_negs.numel() else z_a.new_zeros(z_a.shape[0], 0)
    return _nce(pos, None, negs, tau_ins).mean()


def _gather_pos(
    rows_a: torch.Tensor, rows_b: torch.Tensor, corr: torch.Tensor
) -> torch.Tensor:
    """Per-cell similarity to the corresponding cell in the other view."""
    if corr.shape != rows_a.shape[:-1]:
        raise ValueError(f"correspondence shape {tuple(corr.shape)} does not match maps")
    if corr.numel() and (corr.min() < 0 or corr.max() >= rows_b.shape[-2]):
        raise ValueError("correspondence index out of range")
    matched = torch.gather(
        rows_b, -2, corr.unsqueeze(-1).expand(*corr.shape, rows_b.shape[-1])
    )
    return (rows_a * matched).sum(dim=-1)


def _gather_neighbor_sims(rows_a: torch.Tensor, neighbors: torch.Tensor) -> torch.Tensor:
    """(B, P, N) similarities between each cell and its same-view neighbors."""
    if neighbors.shape[:-1] != rows_a.shape[:-1]:
        raise ValueError("neighbor index shape does not match maps")
    b_shape = neighbors.shape
    flat = neighbors.reshape(*b_shape[:-2], -1)
    gathered = torch.gather(
        rows_a, -2, flat.unsqueeze(-1).expand(*flat.shape, rows_a.shape[-1])
    ).reshape(*b_shape, rows_a.shape[-1])
    return (rows_a.unsqueeze(-2) * gathered).sum(dim=-1)


def pixel_loss(
    rows_a: torch.Tensor,
    rows_b: torch.Tensor,
    corr: torch.Tensor,
    dense_negs: torch.Tensor,
    tau_pix: float,
) -> torch.Tensor:
    """Mean per-cell InfoNCE with most-similar-cell positives.

    rows_a, rows_b: (B, P, D) or (P, D); corr indexes cells of rows_b.
    """
    pos = _gather_pos(rows_a, rows_b, corr)
    if dense_negs.numel():
        negs = rows_a @ dense_negs.T
    else:
        negs = rows_a.new_zeros(*rows_a.shape[:-1], 0)
    return _nce(pos, None, negs, tau_pix).mean()


def neighbor_loss(
    rows_a: torch.Tensor,
    rows_b: torch.Tensor,
    corr: torch.Tensor,
    neighbors: torch.Tensor,
    dense_negs: torch.Tensor,
    tau_pix: float,
) -> torch.Tensor:
    """Pixel InfoNCE with same-view neighbor terms added to numerator and
    denominator. With zero neighbors per cell this is exactly pixel_loss."""
    pos = _gather_pos(rows_a, rows_b, corr)
    extra = _gather_neighbor_sims(rows_a, neighbors) if neighbors.shape[-1] else None
    if dense_negs.numel():
        negs = rows_a @ dense_negs.T
    else:
        negs = rows_a.new_zeros(*rows_a.shape[:-1], 0)
    return _nce(pos, extra, negs, tau_pix).mean()


def triplet_loss(
    rows_a: torch.Tensor,
    rows_b: torch.Tensor,
    corr: torch.Tensor,
    neighbors: torch.Tensor,
    alpha: float,
    orientation: str = "as_written",
) -> torch.Tensor:
    """Hinge over (anchor, cross-view positive, same-view neighbor) triples.

    as_written: [s(a, b) - s(a, n) + alpha]_+ per neighbor.
    corrected:  [s(a, n) - s(a, b) + alpha]_+ (the intent implied by making
    the cross-view pair the closest); both kept selectable.
    Sum over neighbors, mean over cells.
    """
    if alpha < 0:
        raise ConfigError(f"margin must be >= 0, got {alpha}")
    if orientation not in TRIPLET_ORIENTATIONS:
        raise ConfigError(
            f"orientation must be one of {TRIPLET_ORIENTATIONS}, got {orientation!r}"
        )
    pos = _gather_pos(rows_a, rows_b, corr).unsqueeze(-1)
    nbr = _gather_neighbor_sims(rows_a, neighbors)
    if orientation == "as_written":
        hinge = torch.clamp(pos - nbr + alpha, min=0.0)
    else:
        hinge = torch.clamp(nbr - pos + alpha, min=0.0)
    return hinge.sum(dim=-1).mean()
