"""Cosine similarity kernels, cross-view correspondence, neighbor discovery.

Dense maps are handled as (P, D) row matrices, P = S*S cells flattened in
row-major order; `map_to_rows` converts from the (D, S, S) conv layout.
All ties break toward the lowest index so results are reproducible.
"""

from __future__ import annotations

import torch


def map_to_rows(dense_map: torch.Tensor) -> torch.Tensor:
    """(D, S, S) or (B, D, S, S) -> (P, D) or (B, P, D), row-major cells."""
    if dense_map.dim() == 3:
        d = dense_map.shape[0]
        return dense_map.reshape(d, -1).transpose(0, 1)
    if dense_map.dim() == 4:
        b, d = dense_map.shape[:2]
        return dense_map.reshape(b, d, -1).transpose(1, 2)
    raise ValueError(f"expected 3d or 4d dense map, got shape {tuple(dense_map.shape)}")


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of two vectors; scale invariant in each argument."""
    na = torch.linalg.vector_norm(a)
    nb = torch.linalg.vector_norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for zero vectors")
    return (a @ b) / (na * nb)


def pairwise_similarity(rows_a: torch.Tensor, rows_b: torch.Tensor) -> torch.Tensor:
    """All-pairs cosine matrix, entry (i, j) = cos(a_i, b_j).

    Accepts (P, D) x (Q, D) or batched (B, P, D) x (B, Q, D).
    """
    if rows_a.shape[-1] != rows_b.shape[-1]:
        raise ValueError(
            f"embedding dims differ: {rows_a.shape[-1]} vs {rows_b.shape[-1]}"
        )
    a = rows_a / torch.linalg.vector_norm(rows_a, dim=-1, keepdim=True)
    b = rows_b / torch.linalg.vector_norm(rows_b, dim=-1, keepdim=True)
    return a @ b.transpose(-2, -1)


def correspondence(sim: torch.Tensor) -> torch.Tensor:
    """Row-wise argmax of a similarity matrix; first index wins on ties."""
    if sim.numel() == 0:
        raise ValueError("correspondence of an empty similarity matrix")
    return torch.argmax(sim, dim=-1)


def discover_neighbors(rows: torch.Tensor, n_neighbors: int) -> torch.Tensor:
    """Top-n most similar cells within the same view, self excluded.

    Returns (P, n_neighbors) indices ranked by descending similarity,
    lowest index first among ties.
    """
    p = rows.shape[0]
    if not 0 <= n_neighbors < p:
        raise ValueError(
            f"n_neighbors must be in [0, {p - 1}] for {p} cells, got {n_neighbors}"
        )
    if n_neighbors == 0:
        return torch.zeros((p, 0), dtype=torch.long, device=rows.device)
    sims = pairwise_similarity(rows, rows)
    sims.fill_diagonal_(float("-inf"))
    order = torch.argsort(sims, dim=-1, descending=True, stable=True)
    return order[:, :n_neighbors]
