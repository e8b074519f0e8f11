"""Cross-image semantic granularity: batch k-means with cluster alignment,
prototype codes via Sinkhorn balancing, swapped prediction, and the
hardened cross-entropy variant.

All clustering operates on the concatenated cells of a whole mini-batch,
never per image, so clusters can span images.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ConfigError
from .losses import _nce


@dataclass
class Centroids:
    """Unit-norm cluster centers plus member counts (counts sum to P)."""

    vectors: torch.Tensor  # (K, D)
    counts: torch.Tensor  # (K,) long


@dataclass
class KMeansResult:
    centroids: Centroids
    assignments: torch.Tensor  # (P,) long
    # inertia sum(1 - cos(x, centroid_of(x))) after each Lloyd iteration,
    # plus one final entry after the closing assignment pass
    inertia_history: list[float] = field(default_factory=list)


def _normalize_rows(x: torch.Tensor) -> torch.Tensor:
    return x / torch.linalg.vector_norm(x, dim=-1, keepdim=True).clamp_min(1e-12)


def _init_centroids(
    pixels: torch.Tensor, k: int, init, rng: np.random.Generator | None
) -> torch.Tensor:
    if isinstance(init, Centroids):
        init = init.vectors
    if isinstance(init, torch.Tensor):
        if init.shape != (k, pixels.shape[1]):
            raise ConfigError(
                f"init centroids must be ({k}, {pixels.shape[1]}), got {tuple(init.shape)}"
            )
        norms = torch.linalg.vector_norm(init.detach(), dim=1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-4):
            raise ValueError("init centroids must be unit-norm")
        return init.detach().clone()
    # kmeans++-style seeding on cosine distance: later centers are drawn
    # proportional to (1 - best similarity to the centers chosen so far)
    seed_rng = rng if rng is not None else np.random.default_rng(int(init))
    x = pixels.detach()
    chosen = [int(seed_rng.integers(x.shape[0]))]
    best_sim = (x @ x[chosen[0]]).clamp(-1.0, 1.0)
    for _ in range(k - 1):
        weights = (1.0 - best_sim).double().numpy().clip(min=0.0)
        weights[chosen] = 0.0
        total = weights.sum()
        if total <= 0:
            remaining = [i for i in range(x.shape[0]) if i not in chosen]
            nxt = int(seed_rng.choice(remaining))
        else:
            nxt = int(seed_rng.choice(x.shape[0], p=weights / total))
        chosen.append(nxt)
        best_sim = torch.maximum(best_sim, (x @ x[nxt]).clamp(-1.0, 1.0))
    return x[torch.as_tensor(chosen, device=pixels.device)].clone()


def minibatch_kmeans(
    pixels: torch.Tensor,
    k: int,
    init: int | torch.Tensor | Centroids = 0,
    iters: int = 10,
    rng: np.random.Generator | None = None,
    restarts: int = 1,
) -> KMeansResult:
    """Lloyd iterations on unit-norm vectors with cosine similarity.

    Assignment maximizes the dot product; the update is the member mean
    renormalized to unit norm (which maximizes within-cluster cosine).
    Empty clusters are reseeded from the point currently farthest from its
    own centroid. The returned assignments are recomputed against the final
    centroids, so every pixel maps to its most similar centroid; with
    iters=0 the init centroids are returned unchanged. The final centroid
    matrix is rebuilt from `pixels` with autograd intact, so gradients
    reach the member embeddings.

    With a seed init and restarts > 1, Lloyd runs from several kmeans++
    draws and the run with the lowest final inertia wins (first on ties).
    """
    if restarts > 1 and not isinstance(init, (torch.Tensor, Centroids)):
        runs = []
        base = rng if rng is not None else np.random.default_rng(int(init))
        for _ in range(restarts):
            runs.append(minibatch_kmeans(pixels, k, init=0, iters=iters, rng=base))
        return min(runs, key=lambda r: r.inertia_history[-1])
    p, d = pixels.shape
    if p < k:
        raise ConfigError(f"need at least k={k} pixels to cluster, got {p}")
    if iters < 0:
        raise ConfigError("iters must be >= 0")

    history: list[float] = []
    last_assign: torch.Tensor | None = None
    last_reseeds: list[tuple[int, int]] = []
    with torch.no_grad():
        x = pixels.detach()
        cents = _init_centroids(x, k, init, rng)
        for _ in range(iters):
            sims = x @ cents.T
            assign = torch.argmax(sims, dim=1)
            member_sim = sims.gather(1, assign.unsqueeze(1)).squeeze(1)

            sums = torch.zeros(k, d, dtype=x.dtype, device=x.device)
            sums.index_add_(0, assign, x)
            counts = torch.bincount(assign, minlength=k)
            nonempty = counts > 0
            new_cents = cents.clone()
            new_cents[nonempty] = _normalize_rows(sums[nonempty])

            reseeds: list[tuple[int, int]] = []
            empty = (~nonempty).nonzero(as_tuple=True)[0]
            if empty.numel():
                # farthest-first reseeding; each empty slot takes a distinct point
                far_order = torch.argsort(member_sim)
                for slot, c in enumerate(empty.tolist()):
                    idx = int(far_order[slot])
                    new_cents[c] = x[idx]
                    reseeds.append((c, idx))
            cents = new_cents
            last_assign, last_reseeds = assign, reseeds
            history.append(
                float((1.0 - (x @ cents.T).gather(1, assign.unsqueeze(1))).sum())
            )
        final_sims = x @ cents.T
        final_assign = torch.argmax(final_sims, dim=1)
        history.append(
            float((1.0 - final_sims.gather(1, final_assign.unsqueeze(1))).sum())
        )
        final_counts = torch.bincount(final_assign, minlength=k)

    if last_assign is None:
        vectors = cents.to(pixels.dtype)
    else:
        # rebuild the exact same centroid values with gradient flow: member
        # means for clusters that had members, gathered pixels for reseeds
        sums = torch.zeros(k, d, dtype=pixels.dtype, device=pixels.device)
        sums = sums.index_add(0, last_assign, pixels)
        had_members = torch.bincount(last_assign, minlength=k) > 0
        norms = torch.linalg.vector_norm(sums, dim=1, keepdim=True).clamp_min(1e-12)
        vectors = sums / torch.where(had_members.unsqueeze(1), norms, torch.ones_like(norms))
        for c, idx in last_reseeds:
            vectors = torch.index_copy(
                vectors, 0, torch.tensor([c], device=pixels.device), pixels[idx : idx + 1]
            )
    return KMeansResult(
        centroids=Centroids(vectors=vectors, counts=final_counts),
        assignments=final_assign,
        inertia_history=history,
    )


def kmeans_inertia(
    pixels: torch.Tensor, centroids: torch.Tensor, assignments: torch.Tensor
) -> float:
    sims = (pixels * centroids[assignments]).sum(dim=1)
    return float((1.0 - sims).sum())


def align_centroids(cent_a: Centroids, cent_b: Centroids) -> torch.Tensor:
    """Pair the two views' centroids one-to-one.

    Greedy highest-similarity-first matching; ties break toward the lowest
    (row, column) pair. Returns perm with cent_a[i] paired to cent_b[perm[i]].
    """
    a, b = cent_a.vectors.detach(), cent_b.vectors.detach()
    if a.shape != b.shape:
        raise ValueError(f"centroid shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    k = a.shape[0]
    sims = a @ b.T
    order = torch.argsort(sims.reshape(-1), descending=True, stable=True)
    perm = torch.full((k,), -1, dtype=torch.long, device=a.device)
    used_b = torch.zeros(k, dtype=torch.bool, device=a.device)
    remaining = k
    for flat in order.tolist():
        i, j = divmod(flat, k)
        if perm[i] >= 0 or used_b[j]:
            continue
        perm[i] = j
        used_b[j] = True
        remaining -= 1
        if remaining == 0:
            break
    return perm


def km_loss(
    cent_a: Centroids,
    cent_b: Centroids,
    pairing: torch.Tensor,
    negatives: torch.Tensor,
    tau_km: float,
) -> torch.Tensor:
    """Mean InfoNCE over aligned centroid pairs.

    Negatives per centroid are the other aligned view-b centroids plus any
    extra rows passed in `negatives`.
    """
    a = cent_a.vectors
    b = cent_b.vectors
    k = a.shape[0]
    if sorted(pairing.tolist()) != list(range(k)):
        raise ValueError("pairing must be a permutation of 0..K-1")
    aligned_b = b[pairing]
    logits = a @ aligned_b.T  # (K, K), diagonal = positives
    pos = logits.diagonal()
    off_mask = ~torch.eye(k, dtype=torch.bool, device=a.device)
    negs = logits[off_mask].reshape(k, k - 1)
    if negatives.numel():
        negs = torch.cat([negs, a @ negatives.T], dim=1)
    return _nce(pos, None, negs, tau_km).mean()


class PrototypeBank(nn.Module):
    """Trainable unit-norm prototype vectors plus Sinkhorn parameters."""

    def __init__(
        self,
        num_prototypes: int,
        dim: int,
        epsilon: float = 0.05,
        sinkhorn_iters: int = 3,
        seed: int = 0,
    ) -> None:
        super().__init__()
        if epsilon <= 0:
            raise ConfigError(f"sinkhorn epsilon must be > 0, got {epsilon}")
        if sinkhorn_iters < 1:
            raise ConfigError(f"sinkhorn_iters must be >= 1, got {sinkhorn_iters}")
        self.epsilon = float(epsilon)
        self.sinkhorn_iters = int(sinkhorn_iters)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x70]))
        init = torch.as_tensor(
            rng.normal(size=(num_prototypes, dim)), dtype=torch.float32
        )
        self.vectors = nn.Parameter(_normalize_rows(init))

    @torch.no_grad()
    def renormalize(self) -> None:
        self.vectors.copy_(_normalize_rows(self.vectors))

    def scores(self, rows: torch.Tensor) -> torch.Tensor:
        return rows @ self.vectors.to(rows.dtype).T

    def codes(self, rows: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return sinkhorn_codes(
                self.scores(rows.detach()), self.epsilon, self.sinkhorn_iters
            )


def sinkhorn_codes(scores: torch.Tensor, epsilon: float, iters: int) -> torch.Tensor:
    """Balanced soft assignments from a (P, K) score matrix.

    q is proportional to exp(scores / epsilon), alternately rescaled so
    columns carry mass P/K and rows sum to 1; the row pass runs last, so
    rows are stochastic by construction. Returns float64.
    """
    if epsilon <= 0:
        raise ConfigError(f"sinkhorn epsilon must be > 0, got {epsilon}")
    if iters < 1:
        raise ConfigError(f"sinkhorn iters must be >= 1, got {iters}")
    if not torch.isfinite(scores).all():
        raise ValueError("sinkhorn scores must be finite")
    p, k = scores.shape
    s = scores.detach().to(torch.float64)
    q = torch.exp((s - s.max()) / epsilon)
    for _ in range(iters):
        q = q / q.sum(dim=0, keepdim=True) * (p / k)
        q = q / q.sum(dim=1, keepdim=True)
    return q


def swapped_prediction_loss(
    rows_a: torch.Tensor,
    rows_b: torch.Tensor,
    q_a: torch.Tensor,
    q_b: torch.Tensor,
    prototypes: PrototypeBank,
    softmax_temp: float,
) -> torch.Tensor:
    """Predict each view's code from the other view's embedding.

    l(v, q) = -sum_k q_k log softmax_k(v . c / temp); the loss is the mean
    over cells of l(v_a, q_b) + l(v_b, q_a). Codes are treated as constants.
    """
    if softmax_temp <= 0:
        raise ConfigError(f"softmax_temp must be > 0, got {softmax_temp}")

    def side(rows: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
        logp = torch.log_softmax(prototypes.scores(rows) / softmax_temp, dim=1)
        return -(q.detach().to(logp.dtype) * logp).sum(dim=1)

    return (side(rows_a, q_b) + side(rows_b, q_a)).mean()


def ce_strategy_loss(
    rows: torch.Tensor,
    prototypes: PrototypeBank,
    codes: torch.Tensor,
    softmax_temp: float = 1.0,
) -> torch.Tensor:
    """Cross-entropy against the view's own hardened codes (no swap)."""
    if softmax_temp <= 0:
        raise ConfigError(f"softmax_temp must be > 0, got {softmax_temp}")
    hard = torch.argmax(codes.detach(), dim=1)
    logits = prototypes.scores(rows) / softmax_temp
    return nn.functional.cross_entropy(logits, hard)
