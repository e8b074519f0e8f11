"""Training loop: composes the three loss granularities, runs SGD with
Nesterov momentum under cosine decay, maintains the momentum encoder and
negative queues, and checkpoints with exact resumption.

Every random draw in the loop is a pure function of (train.seed, loop
indices), so resuming from a checkpoint continues the identical run.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .augment import two_views
from .checkpoint import checkpoint_name, load_checkpoint, save_checkpoint
from .cluster import Centroids, PrototypeBank, align_centroids, km_loss, minibatch_kmeans
from .cluster import ce_strategy_loss, swapped_prediction_loss
from .config import TrainConfig, config_from_dict
from .encoder import Encoder, NegativeQueue, make_momentum_encoder, momentum_update
from .errors import ConfigError, NumericsError
from .losses import instance_loss, neighbor_loss, pixel_loss, triplet_loss
from .similarity import discover_neighbors, map_to_rows
from .synthdata import SyntheticSample

METRICS_SCHEMA_VERSION = 1
METRICS_FIELDS = (
    "step",
    "epoch",
    "lr",
    "loss_total",
    "loss_ins",
    "loss_pix",
    "loss_sem",
    "wall_time",
)

# stream tags keep derived RNGs for different purposes disjoint
_RNG_PERM, _RNG_AUG, _RNG_KMEANS, _RNG_PROBE, _RNG_QUEUE = 1, 2, 3, 4, 5


def derived_rng(seed: int, *coords: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *coords]))


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """lr0 * 0.5 * (1 + cos(pi * step / total_steps))."""
    if total_steps <= 0:
        raise ConfigError("total_steps must be > 0")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def total_loss(ins: float, pix: float, sem: float, weights: tuple[float, float, float]):
    for name, value in (("ins", ins), ("pix", pix), ("sem", sem)):
        scalar = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(scalar):
            raise NumericsError(f"non-finite {name} loss component: {scalar}")
    w_ins, w_pix, w_sem = weights
    return w_ins * ins + w_pix * pix + w_sem * sem


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    lr: float
    loss_total: float
    loss_ins: float
    loss_pix: float
    loss_sem: float
    wall_time: float

    def to_line(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def from_line(line: str) -> "MetricsRecord":
        return MetricsRecord(**json.loads(line))


def write_metrics_header(fh) -> None:
    fh.write(
        json.dumps(
            {"schema_version": METRICS_SCHEMA_VERSION, "fields": list(METRICS_FIELDS)},
            sort_keys=True,
        )
        + "\n"
    )


def read_metrics(path: str | Path) -> list[MetricsRecord]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"metrics file {path} is empty")
    header = json.loads(lines[0])
    if header.get("schema_version") != METRICS_SCHEMA_VERSION:
        raise ValueError(f"unsupported metrics schema: {header}")
    return [MetricsRecord.from_line(line) for line in lines[1:]]


def canonical_metrics_lines(path: str | Path) -> list[str]:
    """Log lines with the wall_time field dropped; wall-clock time is the
    one physically nondeterministic field, everything else must reproduce
    bit for bit across identical (config, seed) runs."""
    out = [Path(path).read_text().splitlines()[0]]
    for rec in read_metrics(path):
        d = asdict(rec)
        d.pop("wall_time")
        out.append(json.dumps(d, sort_keys=True))
    return out


@dataclass
class TrainState:
    encoder: Encoder
    momentum_encoder: Encoder
    prototypes: PrototypeBank | None
    queue_global: NegativeQueue
    queue_dense: NegativeQueue
    optimizer: torch.optim.SGD
    param_names: list[str]  # checkpoint order for optimizer state
    step: int = 0


def _decay_split(encoder: Encoder) -> tuple[list[str], list[str]]:
    """Parameter names subject to weight decay vs exempt (norm layers)."""
    norm_prefixes = {
        name
        for name, module in encoder.named_modules()
        if isinstance(module, (torch.nn.BatchNorm2d, torch.nn.GroupNorm))
    }
    decay, no_decay = [], []
    for name, _ in encoder.named_parameters():
        parent = name.rsplit(".", 1)[0]
        (no_decay if parent in norm_prefixes else decay).append(name)
    return decay, no_decay


def build_state(config: TrainConfig) -> TrainState:
    if config.train.nesterov and config.train.momentum <= 0:
        raise ConfigError("train.nesterov requires train.momentum > 0")
    model_cfg = replace(config.model, seed=config.train.seed)
    encoder = Encoder(model_cfg)
    momentum_encoder = make_momentum_encoder(encoder)

    prototypes = None
    if config.loss.strategy in ("pm", "ce"):
        prototypes = PrototypeBank(
            config.proto.k,
            config.model.embed_dim,
            epsilon=config.proto.epsilon,
            sinkhorn_iters=config.proto.sinkhorn_iters,
            seed=config.train.seed,
        )

    params = dict(encoder.named_parameters())
    decay_names, no_decay_names = _decay_split(encoder)
    groups = [
        {
            "params": [params[n] for n in decay_names],
            "weight_decay": config.train.weight_decay,
        },
        {"params": [params[n] for n in no_decay_names], "weight_decay": 0.0},
    ]
    param_names = [f"encoder.{n}" for n in decay_names + no_decay_names]
    if prototypes is not None:
        groups.append({"params": [prototypes.vectors], "weight_decay": 0.0})
        param_names.append("prototypes.vectors")
    optimizer = torch.optim.SGD(
        groups,
        lr=config.train.lr0,
        momentum=config.train.momentum,
        nesterov=config.train.nesterov,
    )
    d = config.model.embed_dim

    def seeded_queue(capacity: int, tag: int) -> NegativeQueue:
        # pre-filled with random unit vectors so the negative terms are live
        # from the first step, as in the momentum-contrast baseline
        queue = NegativeQueue(capacity, d)
        q_rng = derived_rng(config.train.seed, _RNG_QUEUE, tag)
        rows = torch.as_tensor(q_rng.normal(size=(capacity, d)), dtype=torch.float32)
        queue.push(rows / torch.linalg.vector_norm(rows, dim=1, keepdim=True))
        return queue

    return TrainState(
        encoder=encoder,
        momentum_encoder=momentum_encoder,
        prototypes=prototypes,
        queue_global=seeded_queue(config.queue.global_capacity, 0),
        queue_dense=seeded_queue(config.queue.dense_capacity, 1),
        optimizer=optimizer,
        param_names=param_names,
    )


def _semantic_loss(
    rows_a: torch.Tensor,
    rows_b: torch.Tensor,
    corr: torch.Tensor,
    state: TrainState,
    config: TrainConfig,
) -> torch.Tensor:
    strategy = config.loss.strategy
    loss_cfg = config.loss
    if strategy in ("neighbor", "triplet"):
        with torch.no_grad():
            neighbors = torch.stack(
                [
                    discover_neighbors(rows_a[i].detach(), loss_cfg.n_neighbors)
                    for i in range(rows_a.shape[0])
                ]
            )
        if strategy == "neighbor":
            return neighbor_loss(
                rows_a,
                rows_b,
                corr,
                neighbors,
                state.queue_dense.negatives(),
                loss_cfg.tau_pix,
            )
        return triplet_loss(
            rows_a, rows_b, corr, neighbors, loss_cfg.margin, loss_cfg.triplet_orientation
        )
    if strategy == "km":
        pixels_a = rows_a.reshape(-1, rows_a.shape[-1])
        pixels_b = rows_b.reshape(-1, rows_b.shape[-1])
        rng_a = derived_rng(config.train.seed, _RNG_KMEANS, state.step, 0)
        res_a = minibatch_kmeans(
            pixels_a, config.kmeans.k, iters=config.kmeans.iters, rng=rng_a,
            restarts=config.kmeans.restarts,
        )
        # warm-start the second view from the first view's centroids so the
        # two clusterings track the same structure; alignment then fixes any
        # residual identity swaps
        res_b = minibatch_kmeans(
            pixels_b,
            config.kmeans.k,
            init=Centroids(
                vectors=res_a.centroids.vectors.detach(),
                counts=res_a.centroids.counts,
            ),
            iters=config.kmeans.iters,
        )
        pairing = align_centroids(res_a.centroids, res_b.centroids)
        empty_negs = rows_a.new_zeros(0, rows_a.shape[-1])
        return km_loss(
            res_a.centroids, res_b.centroids, pairing, empty_negs, loss_cfg.tau_km
        )
    if strategy in ("pm", "ce"):
        assert state.prototypes is not None
        flat_a = rows_a.reshape(-1, rows_a.shape[-1])
        flat_b = rows_b.reshape(-1, rows_b.shape[-1])
        q_a = state.prototypes.codes(flat_a)
        if strategy == "ce":
            return ce_strategy_loss(
                flat_a, state.prototypes, q_a, config.proto.softmax_temp
            )
        q_b = state.prototypes.codes(flat_b)
        return swapped_prediction_loss(
            flat_a, flat_b, q_a, q_b, state.prototypes, config.proto.softmax_temp
        )
    raise ConfigError(f"unknown semantic strategy {strategy!r}")


def train_step(
    views_a: torch.Tensor,
    views_b: torch.Tensor,
    state: TrainState,
    config: TrainConfig,
    total_steps: int,
) -> MetricsRecord:
    """One optimizer step; returns the metrics record for the step."""
    t0 = time.perf_counter()
    w_ins, w_pix, w_sem = config.loss.w_ins, config.loss.w_pix, config.loss.w_sem
    state.encoder.train()

    z_a, v_a = state.encoder.encode(views_a)
    with torch.no_grad():
        z_b, v_b = state.momentum_encoder.encode(views_b)
    for name, tensor in (("online", v_a), ("online", z_a), ("momentum", v_b)):
        if not torch.isfinite(tensor.detach()).all():
            raise NumericsError(
                f"non-finite {name} embeddings at step {state.step}; aborting"
            )

    zero = z_a.new_zeros(())
    loss_ins = (
        instance_loss(z_a, z_b, state.queue_global.negatives(), config.loss.tau_ins)
        if w_ins > 0
        else zero
    )

    rows_a = map_to_rows(v_a)
    rows_b = map_to_rows(v_b)
    with torch.no_grad():
        corr = torch.argmax(rows_a.detach() @ rows_b.transpose(1, 2), dim=2)

    loss_pix = (
        pixel_loss(rows_a, rows_b, corr, state.queue_dense.negatives(), config.loss.tau_pix)
        if w_pix > 0
        else zero
    )
    use_sem = config.loss.strategy != "none" and w_sem > 0
    loss_sem = _semantic_loss(rows_a, rows_b, corr, state, config) if use_sem else zero

    loss = total_loss(loss_ins, loss_pix, loss_sem, (w_ins, w_pix, w_sem))
    if not torch.isfinite(loss):
        raise NumericsError(
            f"non-finite loss at step {state.step}: "
            f"ins={float(loss_ins)} pix={float(loss_pix)} sem={float(loss_sem)}"
        )

    lr = cosine_lr(state.step, total_steps, config.train.lr0)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if (
        state.prototypes is not None
        and state.step < config.proto.freeze_steps
        and state.prototypes.vectors.grad is not None
    ):
        state.prototypes.vectors.grad = None
    state.optimizer.step()
    if state.prototypes is not None:
        state.prototypes.renormalize()

    momentum_update(state.encoder, state.momentum_encoder, config.train.ema_m)

    state.queue_global.push(z_b)
    # dense negatives: a few random cells per image; pooled per-image means
    # carry no spatial contrast at this scale and let the dense space collapse
    cells = map_to_rows(v_b)  # (B, P, D)
    n_cells = min(config.queue.cells_per_image, cells.shape[1])
    cell_rng = derived_rng(config.train.seed, _RNG_QUEUE, 2, state.step)
    picks = torch.as_tensor(
        cell_rng.integers(0, cells.shape[1], size=(cells.shape[0], n_cells))
    )
    sampled = torch.gather(
        cells, 1, picks.unsqueeze(-1).expand(-1, -1, cells.shape[-1])
    ).reshape(-1, cells.shape[-1])
    state.queue_dense.push(sampled)

    record = MetricsRecord(
        step=state.step,
        epoch=0,  # filled by the caller, which knows the epoch layout
        lr=lr,
        loss_total=float(loss.detach()),
        loss_ins=float(loss_ins.detach()),
        loss_pix=float(loss_pix.detach()),
        loss_sem=float(loss_sem.detach()),
        wall_time=time.perf_counter() - t0,
    )
    state.step += 1
    return record


def _collate_batch(
    dataset: list[SyntheticSample],
    indices: np.ndarray,
    config: TrainConfig,
    epoch: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    views_a, views_b = [], []
    for idx in indices:
        sample = dataset[int(idx)]
        rng = derived_rng(config.train.seed, _RNG_AUG, epoch, sample.sample_id)
        pair = two_views(sample, config.aug, rng)
        views_a.append(pair.view_a)
        views_b.append(pair.view_b)

    def stack(views: list[np.ndarray]) -> torch.Tensor:
        arr = np.stack(views).transpose(0, 3, 1, 2)
        return torch.from_numpy(np.ascontiguousarray(arr))

    return stack(views_a), stack(views_b)


# -- checkpoint round trip -------------------------------------------------


def state_to_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for name, p in state.encoder.named_parameters():
        arrays[f"online/{name}"] = p.detach().numpy().copy()
    for name, b in state.encoder.named_buffers():
        arrays[f"online_buf/{name}"] = b.detach().numpy().copy()
    for name, p in state.momentum_encoder.named_parameters():
        arrays[f"momentum/{name}"] = p.detach().numpy().copy()
    for name, b in state.momentum_encoder.named_buffers():
        arrays[f"momentum_buf/{name}"] = b.detach().numpy().copy()
    if state.prototypes is not None:
        arrays["prototypes/vectors"] = state.prototypes.vectors.detach().numpy().copy()
    flat_params = [
        p for g in state.optimizer.param_groups for p in g["params"]
    ]
    for name, p in zip(state.param_names, flat_params):
        buf = state.optimizer.state.get(p, {}).get("momentum_buffer")
        if buf is not None:
            arrays[f"opt/{name}/momentum_buffer"] = buf.detach().numpy().copy()
    for tag, queue in (("queue_global", state.queue_global), ("queue_dense", state.queue_dense)):
        qs = queue.state_dict()
        arrays[f"{tag}/buffer"] = qs["buffer"].numpy().copy()
        arrays[f"{tag}/cursor"] = np.array([qs["cursor"]], dtype=np.int64)
        arrays[f"{tag}/size"] = np.array([qs["size"]], dtype=np.int64)
    arrays["step"] = np.array([state.step], dtype=np.int64)
    return arrays


def state_from_arrays(arrays: dict[str, np.ndarray], config: TrainConfig) -> TrainState:
    state = build_state(config)
    with torch.no_grad():
        for name, p in state.encoder.named_parameters():
            p.copy_(torch.from_numpy(arrays[f"online/{name}"]))
        for name, b in state.encoder.named_buffers():
            b.copy_(torch.from_numpy(arrays[f"online_buf/{name}"]))
        for name, p in state.momentum_encoder.named_parameters():
            p.copy_(torch.from_numpy(arrays[f"momentum/{name}"]))
        for name, b in state.momentum_encoder.named_buffers():
            b.copy_(torch.from_numpy(arrays[f"momentum_buf/{name}"]))
        if state.prototypes is not None:
            state.prototypes.vectors.copy_(torch.from_numpy(arrays["prototypes/vectors"]))
    flat_params = [p for g in state.optimizer.param_groups for p in g["params"]]
    for name, p in zip(state.param_names, flat_params):
        key = f"opt/{name}/momentum_buffer"
        if key in arrays:
            state.optimizer.state[p] = {
                "momentum_buffer": torch.from_numpy(arrays[key].copy())
            }
    for tag, queue in (("queue_global", state.queue_global), ("queue_dense", state.queue_dense)):
        queue.load_state_dict(
            {
                "buffer": torch.from_numpy(arrays[f"{tag}/buffer"].copy()),
                "cursor": int(arrays[f"{tag}/cursor"][0]),
                "size": int(arrays[f"{tag}/size"][0]),
            }
        )
    state.step = int(arrays["step"][0])
    return state


def save_train_checkpoint(path: str | Path, state: TrainState, config: TrainConfig) -> Path:
    meta = {
        "config": config.resolved_text(),
        "config_hash": config.config_hash(),
        "step": state.step,
    }
    return save_checkpoint(path, state_to_arrays(state), meta)


def load_train_checkpoint(path: str | Path) -> tuple[TrainState, TrainConfig, dict]:
    arrays, meta = load_checkpoint(path)
    values = {}
    for line in meta["config"].strip().splitlines():
        key, value = line.split("=", 1)
        values[key] = value
    config = config_from_dict(values)
    return state_from_arrays(arrays, config), config, meta


# -- fit ---------------------------------------------------------------------


@dataclass
class FitResult:
    checkpoint_path: Path
    metrics_path: Path
    records: list[MetricsRecord]
    config_hash: str


def fit(
    config: TrainConfig,
    dataset: list[SyntheticSample],
    out_dir: str | Path,
    resume_from: str | Path | None = None,
) -> FitResult:
    """Run the training loop; checkpoints land in out_dir as ckpt_{step:08d}.

    With resume_from, continues the identical run: derived RNG streams are
    pure functions of (seed, epoch, step), so the continuation's metrics
    match an uninterrupted run bit for bit (wall_time aside).
    """
    torch.set_num_threads(max(1, config.train.threads))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if len(dataset) < config.train.batch_size:
        raise ConfigError(
            f"dataset of {len(dataset)} samples is smaller than one batch "
            f"({config.train.batch_size})"
        )
    if config.loss.w_ins == 0 and (config.loss.w_pix > 0 or config.loss.w_sem > 0):
        warnings.warn(
            "training without the instance term is known not to converge reliably",
            stacklevel=2,
        )

    steps_per_epoch = len(dataset) // config.train.batch_size
    total_steps = steps_per_epoch * config.train.epochs

    if resume_from is not None:
        state, ckpt_config, _ = load_train_checkpoint(resume_from)
        if ckpt_config.config_hash() != config.config_hash():
            raise ConfigError(
                f"checkpoint config hash {ckpt_config.config_hash()} does not match "
                f"requested config {config.config_hash()}"
            )
    else:
        state = build_state(config)

    metrics_path = out_dir / "metrics.jsonl"
    fresh_log = not (resume_from is not None and metrics_path.exists())
    records: list[MetricsRecord] = []

    perm_cache: dict[int, np.ndarray] = {}

    def epoch_perm(epoch: int) -> np.ndarray:
        if epoch not in perm_cache:
            perm_cache.clear()
            rng = derived_rng(config.train.seed, _RNG_PERM, epoch)
            perm_cache[epoch] = rng.permutation(len(dataset))
        return perm_cache[epoch]

    with metrics_path.open("w" if fresh_log else "a") as fh:
        if fresh_log:
            write_metrics_header(fh)
        for step in range(state.step, total_steps):
            epoch = step // steps_per_epoch
            offset = (step % steps_per_epoch) * config.train.batch_size
            indices = epoch_perm(epoch)[offset : offset + config.train.batch_size]
            views_a, views_b = _collate_batch(dataset, indices, config, epoch)
            record = train_step(views_a, views_b, state, config, total_steps)
            record.epoch = epoch
            records.append(record)
            fh.write(record.to_line() + "\n")
            if (
                config.train.checkpoint_interval > 0
                and state.step % config.train.checkpoint_interval == 0
                and state.step < total_steps
            ):
                save_train_checkpoint(out_dir / checkpoint_name(state.step), state, config)

    final_path = out_dir / checkpoint_name(state.step)
    save_train_checkpoint(final_path, state, config)
    return FitResult(
        checkpoint_path=final_path,
        metrics_path=metrics_path,
        records=records,
        config_hash=config.config_hash(),
    )
