"""Frozen-encoder evaluation: linear classification probe on pooled
backbone features, 1x1-conv segmentation probe on the backbone's spatial
grid (mIoU), and a similarity heatmap emitter over the dense embedding
space.

Probes read the backbone representation, the object that transfers
downstream; the contrastive projector heads are training machinery and
are not evaluated (they reshape their output spaces toward the loss
geometry, e.g. prototype balance, which says nothing about feature
quality). Probes never update encoder parameters; they train a single
linear layer on features computed once under no_grad.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn

from .encoder import Encoder
from .errors import ConfigError
from .synthdata import SyntheticSample, dominant_class
from .trainer import _RNG_PROBE, derived_rng, load_train_checkpoint
from .config import TrainConfig


@dataclass
class ProbeReport:
    run_id: str
    kind: str  # "linear" or "pixel"
    strategy: str
    k: int
    probe_accuracy: float | None
    probe_miou: float | None
    seeds: list[int]
    config_hash: str

    def to_line(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def active_cluster_count(config: TrainConfig) -> int:
    if config.loss.strategy == "km":
        return config.kmeans.k
    if config.loss.strategy in ("pm", "ce"):
        return config.proto.k
    return 0


# -- metrics -----------------------------------------------------------------


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """(C, C) counts, rows ground truth, columns prediction."""
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth shapes differ")
    flat = num_classes * gt.astype(np.int64).ravel() + pred.astype(np.int64).ravel()
    return np.bincount(flat, minlength=num_classes * num_classes).reshape(
        num_classes, num_classes
    )


def miou_from_confusion(conf: np.ndarray) -> float:
    """Mean over classes of TP / (TP + FP + FN); classes absent from both
    prediction and ground truth are excluded from the mean."""
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    present = union > 0
    if not present.any():
        raise ValueError("no classes present in prediction or ground truth")
    return float((tp[present] / union[present]).mean())


def mean_iou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    return miou_from_confusion(confusion_matrix(pred, gt, num_classes))


def downsample_mask_majority(mask: np.ndarray, grid: int) -> np.ndarray:
    """Reduce a (H, W) mask to (grid, grid) by per-cell majority vote;
    ties break toward the lowest class id."""
    h, w = mask.shape
    if h % grid or w % grid:
        raise ValueError(f"mask {h}x{w} not divisible into a {grid}x{grid} grid")
    bh, bw = h // grid, w // grid
    blocks = mask.reshape(grid, bh, grid, bw).transpose(0, 2, 1, 3).reshape(grid, grid, -1)
    num_classes = int(mask.max()) + 1
    counts = np.zeros((grid, grid, num_classes), dtype=np.int64)
    for c in range(num_classes):
        counts[:, :, c] = (blocks == c).sum(axis=-1)
    return counts.argmax(axis=-1)


# -- feature extraction --------------------------------------------------------


def _to_batch(samples: list[SyntheticSample]) -> torch.Tensor:
    arr = np.stack([s.image for s in samples]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr))


def encode_dataset(
    encoder: Encoder,
    samples: list[SyntheticSample],
    batch_size: int = 64,
    level: str = "backbone",
) -> tuple[torch.Tensor, torch.Tensor]:
    """Frozen features: (N, C) pooled and (N, C, S, S) spatial grids.

    level="backbone" reads the encoder trunk (the representation that
    transfers); level="projected" reads the contrastive heads' unit-norm
    outputs. Spatial cells are L2-normalized either way.
    """
    if level not in ("backbone", "projected"):
        raise ValueError(f"unknown feature level {level!r}")
    encoder.eval()
    pooled, grids = [], []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            batch = _to_batch(samples[i : i + batch_size])
            if level == "projected":
                z, v = encoder.encode(batch)
            else:
                feats = encoder.features(batch)
                z = feats.mean(dim=(2, 3))
                z = z / torch.linalg.vector_norm(z, dim=1, keepdim=True).clamp_min(1e-6)
                v = feats / torch.linalg.vector_norm(feats, dim=1, keepdim=True).clamp_min(1e-6)
            pooled.append(z)
            grids.append(v)
    return torch.cat(pooled), torch.cat(grids)


def _split_indices(
    n: int, val_fraction: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    return perm[n_val:], perm[:n_val]


def _train_linear(
    feats: torch.Tensor,
    labels: torch.Tensor,
    num_classes: int,
    epochs: int,
    lr: float,
    seed: int,
) -> nn.Linear:
    """Frequency-balanced cross-entropy keeps the head from collapsing to
    the background class, which dominates the cell labels."""
    torch.manual_seed(seed)
    head = nn.Linear(feats.shape[1], num_classes)
    opt = torch.optim.SGD(head.parameters(), lr=lr, momentum=0.9, nesterov=True)
    counts = torch.bincount(labels, minlength=num_classes).float()
    weight = torch.where(counts > 0, counts.sum() / counts.clamp_min(1.0), torch.zeros(()))
    weight = weight / weight.sum().clamp_min(1e-12) * num_classes
    rng = derived_rng(seed, _RNG_PROBE, 0xBA)
    batch = 256
    for epoch in range(epochs):
        order = torch.as_tensor(rng.permutation(feats.shape[0]))
        for i in range(0, len(order), batch):
            idx = order[i : i + batch]
            loss = nn.functional.cross_entropy(head(feats[idx]), labels[idx], weight=weight)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    return head


def _load_for_probe(checkpoint_path: str | Path):
    state, config, meta = load_train_checkpoint(checkpoint_path)
    return state.encoder, config, meta


def linear_probe(
    checkpoint_path: str | Path,
    samples: list[SyntheticSample],
    epochs: int | None = None,
    config: TrainConfig | None = None,
) -> tuple[float, ProbeReport]:
    """Train a linear classifier on frozen global embeddings; returns
    held-out accuracy. Image labels are the dominant shape class."""
    encoder, ckpt_config, meta = _load_for_probe(checkpoint_path)
    if config is not None and config.config_hash() != ckpt_config.config_hash():
        raise ConfigError(
            f"probe config hash {config.config_hash()} does not match "
            f"checkpoint {ckpt_config.config_hash()}"
        )
    cfg = ckpt_config
    epochs = cfg.probe.epochs if epochs is None else epochs
    seed = cfg.train.seed

    labels_np = np.array([dominant_class(s) for s in samples], dtype=np.int64)
    num_classes = cfg.data.num_classes + 1
    feats, _ = encode_dataset(encoder, samples)
    train_idx, val_idx = _split_indices(
        len(samples), cfg.probe.val_fraction, derived_rng(seed, _RNG_PROBE, 1)
    )
    present = set(np.unique(labels_np).tolist())
    missing = present - set(np.unique(labels_np[train_idx]).tolist())
    if missing:
        raise ValueError(f"classes {sorted(missing)} absent from the probe train split")

    labels = torch.from_numpy(labels_np)
    head = _train_linear(
        feats[train_idx], labels[train_idx], num_classes, epochs, cfg.probe.lr, seed
    )
    with torch.no_grad():
        pred = head(feats[val_idx]).argmax(dim=1)
    accuracy = float((pred == labels[val_idx]).float().mean())
    report = ProbeReport(
        run_id=f"{cfg.config_hash()}-s{seed}",
        kind="linear",
        strategy=cfg.loss.strategy,
        k=active_cluster_count(cfg),
        probe_accuracy=accuracy,
        probe_miou=None,
        seeds=[seed],
        config_hash=cfg.config_hash(),
    )
    return accuracy, report


def pixel_probe(
    checkpoint_path: str | Path,
    samples: list[SyntheticSample],
    epochs: int | None = None,
    config: TrainConfig | None = None,
) -> tuple[float, ProbeReport]:
    """Train a 1x1-conv classifier on the frozen dense grid against
    majority-downsampled masks; returns held-out mIoU."""
    encoder, ckpt_config, meta = _load_for_probe(checkpoint_path)
    if config is not None and config.config_hash() != ckpt_config.config_hash():
        raise ConfigError(
            f"probe config hash {config.config_hash()} does not match "
            f"checkpoint {ckpt_config.config_hash()}"
        )
    cfg = ckpt_config
    epochs = cfg.probe.epochs if epochs is None else epochs
    seed = cfg.train.seed
    num_classes = cfg.data.num_classes + 1

    _, dense = encode_dataset(encoder, samples)
    n, d, s, _ = dense.shape
    cell_labels = np.stack(
        [downsample_mask_majority(smp.mask, s) for smp in samples]
    ).reshape(n, -1)

    train_idx, val_idx = _split_indices(
        n, cfg.probe.val_fraction, derived_rng(seed, _RNG_PROBE, 2)
    )
    cells = dense.permute(0, 2, 3, 1).reshape(n, s * s, d)

    feats_train = cells[train_idx].reshape(-1, d)
    labels_train = torch.from_numpy(cell_labels[train_idx].reshape(-1))
    head = _train_linear(feats_train, labels_train, num_classes, epochs, cfg.probe.lr, seed)

    with torch.no_grad():
        pred = head(cells[val_idx].reshape(-1, d)).argmax(dim=1).numpy()
    miou = mean_iou(pred, cell_labels[val_idx].reshape(-1), num_classes)
    report = ProbeReport(
        run_id=f"{cfg.config_hash()}-s{seed}",
        kind="pixel",
        strategy=cfg.loss.strategy,
        k=active_cluster_count(cfg),
        probe_accuracy=None,
        probe_miou=miou,
        seeds=[seed],
        config_hash=cfg.config_hash(),
    )
    return miou, report


# -- heatmap -----------------------------------------------------------------


def emit_heatmap(
    checkpoint_path: str | Path,
    image: np.ndarray,
    anchor: tuple[int, int],
    out_dir: str | Path,
    stem: str = "heatmap",
) -> tuple[Path, Path, np.ndarray]:
    """Cosine similarity of every dense cell to the anchor cell.

    Writes a plain-text matrix and a rendered overlay PNG; returns both
    paths plus the (S, S) grid.
    """
    encoder, _cfg, _meta = _load_for_probe(checkpoint_path)
    encoder.eval()
    batch = torch.from_numpy(
        np.ascontiguousarray(image.transpose(2, 0, 1)[None]).astype(np.float32)
    )
    with torch.no_grad():
        dense = encoder.encode_dense(batch)[0]  # (D, S, S)
    s = dense.shape[1]
    r, c = anchor
    if not (0 <= r < s and 0 <= c < s):
        raise ValueError(f"anchor {anchor} outside the {s}x{s} grid")
    anchor_vec = dense[:, r, c]
    grid = torch.einsum("dij,d->ij", dense, anchor_vec).numpy()

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    txt_path = out_dir / f"{stem}.txt"
    np.savetxt(txt_path, grid, fmt="%.6f")

    # overlay: red where similar, blue where dissimilar
    h, w = image.shape[:2]
    up = np.repeat(np.repeat(grid, h // s, axis=0), w // s, axis=1)
    heat = np.zeros((h, w, 3), dtype=np.float32)
    heat[..., 0] = np.clip(up, 0.0, 1.0)
    heat[..., 2] = np.clip(-up, 0.0, 1.0)
    blended = np.clip(0.45 * image + 0.55 * heat, 0.0, 1.0)
    png_path = out_dir / f"{stem}.png"
    Image.fromarray((blended * 255.0 + 0.5).astype(np.uint8)).save(png_path)
    return txt_path, png_path, grid
