"""Training loop: Adam optimization, per-epoch metrics, checkpointing."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .checkpoint import read_container, write_container
from .config import RunConfig, TrainConfig, derive_seed, run_config_from_dict, run_config_to_dict
from .data import (
    PatchBatch,
    SampleRecord,
    load_pair,
    make_epoch,
    normalize_image,
    reflect_pad_to,
    split_records,
)
from .errors import CheckpointError, TrainingError
from .losses import bce_loss, combined_loss, dice_loss
from .metrics import dice_score, iou_score
from .model import SegmentationModel, build_model

METRICS_HEADER = ["epoch", "mean_loss", "mean_dice", "mean_iou", "wall_seconds"]


@dataclass
class MetricsRecord:
    epoch: int
    mean_loss: float
    mean_dice: float
    mean_iou: float
    wall_seconds: float


@dataclass
class TrainState:
    """Everything needed to continue or reproduce a training run."""

    model: SegmentationModel
    optimizer: torch.optim.Adam
    run_config: RunConfig
    epoch: int = 0
    step: int = 0
    best_metric: float = -1.0
    rng_state: torch.Tensor = field(default_factory=torch.get_rng_state)
    # populated by train_step for the metrics loop
    last_dice: float = 0.0
    last_iou: float = 0.0


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.parameters(),
        lr=cfg.learning_rate,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_epsilon,
    )


def init_train_state(run_config: RunConfig) -> TrainState:
    model = build_model(run_config.model, derive_seed(run_config.seed, "init"))
    optimizer = make_optimizer(model, run_config.train)
    # pin the process-level torch generator to the run seed so the captured
    # rng state (and thus the checkpoint bytes) depend only on the config
    torch.manual_seed(derive_seed(run_config.seed, "torch"))
    return TrainState(model=model, optimizer=optimizer, run_config=run_config,
                      rng_state=torch.get_rng_state())


def _batch_scores(logits: torch.Tensor, targets: torch.Tensor) -> tuple[float, float]:
    with torch.no_grad():
        pred = (torch.sigmoid(logits) > 0.5).to(torch.uint8).cpu().numpy()
        true = targets.to(torch.uint8).cpu().numpy()
    return dice_score(pred, true), iou_score(pred, true)


def train_step(state: TrainState, batch: PatchBatch,
               cfg: TrainConfig) -> tuple[TrainState, float]:
    """One forward/backward/Adam update. Returns the updated state and loss."""
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    logits = state.model(batch.images)
    loss = combined_loss(logits, batch.masks, cfg.dice_weight, cfg.bce_weight)
    if not torch.isfinite(loss):
        with torch.no_grad():
            d = float(dice_loss(logits, batch.masks))
            b = float(bce_loss(logits, batch.masks))
        raise TrainingError(
            f"non-finite loss at step {state.step}: "
            f"dice={d:.6g}, bce={b:.6g}"
        )
    loss.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(state.model.parameters(), cfg.grad_clip)
    state.optimizer.step()
    state.step += 1
    state.last_dice, state.last_iou = _batch_scores(logits, batch.masks)
    return state, float(loss.detach())


def _eval_patches(records: Sequence[SampleRecord], patch: int,
                  run_cfg: RunConfig) -> PatchBatch:
    """Deterministic center crops of the given records, as one batch."""
    images, masks = [], []
    for record in records:
        img, msk = load_pair(record)
        img = reflect_pad_to(img, patch, patch)
        msk = reflect_pad_to(msk, patch, patch)
        top = (img.shape[0] - patch) // 2
        left = (img.shape[1] - patch) // 2
        images.append(normalize_image(
            img[top:top + patch, left:left + patch],
            run_cfg.data.normalize_mean, run_cfg.data.normalize_std,
        ))
        masks.append(msk[top:top + patch, left:left + patch])
    return PatchBatch(
        images=torch.from_numpy(np.stack(images)),
        masks=torch.from_numpy(np.stack(masks).astype(np.float32)).unsqueeze(1),
    )


def _validation_scores(state: TrainState, val_records: Sequence[SampleRecord],
                       batch_size: int) -> tuple[float, float]:
    patch = state.run_config.data.patch_size
    state.model.eval()
    dices, ious = [], []
    with torch.no_grad():
        for start in range(0, len(val_records), batch_size):
            batch = _eval_patches(val_records[start:start + batch_size], patch,
                                  state.run_config)
            logits = state.model(batch.images)
            d, i = _batch_scores(logits, batch.masks)
            dices.append(d)
            ious.append(i)
    return float(np.mean(dices)), float(np.mean(ious))


def append_metrics_row(csv_path: Path, record: MetricsRecord) -> None:
    new = not csv_path.exists()
    with open(csv_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(METRICS_HEADER)
        writer.writerow([
            record.epoch,
            f"{record.mean_loss:.6f}",
            f"{record.mean_dice:.6f}",
            f"{record.mean_iou:.6f}",
            f"{record.wall_seconds:.3f}",
        ])


def fit(state: TrainState, records: Sequence[SampleRecord],
        output_dir: str | Path | None = None,
        on_step: Callable[[int, float], None] | None = None,
        ) -> tuple[TrainState, list[MetricsRecord]]:
    """Run the configured number of epochs over the dataset.

    Writes ``metrics.csv``, ``last.ckpt`` (every ``checkpoint_every`` epochs)
    and ``best.ckpt`` (on best mean dice) into ``output_dir`` when given.
    Per-epoch mean dice/iou come from the validation split when one exists,
    otherwise from the training batches themselves.
    """
    run_cfg = state.run_config
    cfg = run_cfg.train
    train_records, val_records = split_records(records, run_cfg.data.val_fraction)
    output_dir = Path(output_dir) if output_dir is not None else None
    if output_dir is not None:
        output_dir.mkdir(parents=True, exist_ok=True)

    history: list[MetricsRecord] = []
    for epoch in range(state.epoch + 1, cfg.epochs + 1):
        started = time.perf_counter()
        losses, dices, ious = [], [], []
        epoch_seed = derive_seed(run_cfg.seed, f"data-epoch-{epoch}")
        stream = make_epoch(train_records, cfg.batch_size,
                            run_cfg.data.patches_per_image, run_cfg.aug,
                            epoch_seed, run_cfg.data)
        for batch in stream:
            state, loss = train_step(state, batch, cfg)
            losses.append(loss)
            dices.append(state.last_dice)
            ious.append(state.last_iou)
            if on_step is not None:
                on_step(state.step, loss)
        state.epoch = epoch

        if val_records:
            mean_dice, mean_iou = _validation_scores(state, val_records,
                                                     cfg.batch_size)
        else:
            mean_dice, mean_iou = float(np.mean(dices)), float(np.mean(ious))
        record = MetricsRecord(
            epoch=epoch,
            mean_loss=float(np.mean(losses)),
            mean_dice=mean_dice,
            mean_iou=mean_iou,
            wall_seconds=time.perf_counter() - started,
        )
        history.append(record)

        if output_dir is not None:
            append_metrics_row(output_dir / "metrics.csv", record)
            if record.mean_dice > state.best_metric:
                state.best_metric = record.mean_dice
                save_checkpoint(state, output_dir / "best.ckpt")
            if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
                save_checkpoint(state, output_dir / "last.ckpt")
        elif record.mean_dice > state.best_metric:
            state.best_metric = record.mean_dice
    return state, history


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    """Serialize model, optimizer moments, counters, and rng state."""
    tensors: dict[str, torch.Tensor] = {}
    for name, param in state.model.named_parameters():
        tensors[f"model.{name}"] = param
    opt_state = state.optimizer.state_dict()
    steps: dict[str, float] = {}
    for pid, entry in opt_state["state"].items():
        for key, value in entry.items():
            if isinstance(value, torch.Tensor) and value.dim() > 0:
                tensors[f"optim.{pid}.{key}"] = value
            else:
                steps[f"{pid}.{key}"] = float(value)
    tensors["rng.torch"] = state.rng_state

    groups = []
    for group in opt_state["param_groups"]:
        groups.append({k: v for k, v in group.items()})

    config_echo = run_config_to_dict(state.run_config)
    # checkpoint identity is independent of where the run wrote its outputs
    config_echo.pop("output_dir", None)
    meta = {
        "kind": "train_state",
        "config": config_echo,
        "scalars": {
            "epoch": state.epoch,
            "step": state.step,
            "best_metric": state.best_metric,
            "seed": state.run_config.seed,
        },
        "optim_scalars": steps,
        "param_groups": groups,
    }
    write_container(path, meta, tensors)


def load_checkpoint(path: str | Path) -> TrainState:
    """Rebuild a TrainState exactly as saved (bit-exact round trip)."""
    meta, tensors = read_container(path)
    if meta.get("kind") != "train_state":
        raise CheckpointError(f"{path} is not a training checkpoint")
    run_cfg = run_config_from_dict(meta["config"])
    run_cfg.validate()
    state = init_train_state(run_cfg)

    with torch.no_grad():
        for name, param in state.model.named_parameters():
            key = f"model.{name}"
            if key not in tensors:
                raise CheckpointError(f"{path} is missing tensor {key!r}")
            param.copy_(tensors[key])

    scalars = meta["scalars"]
    state.epoch = int(scalars["epoch"])
    state.step = int(scalars["step"])
    state.best_metric = float(scalars["best_metric"])

    opt_entries: dict[int, dict[str, object]] = {}
    for key, value in meta.get("optim_scalars", {}).items():
        pid, field_name = key.split(".", 1)
        entry = opt_entries.setdefault(int(pid), {})
        entry[field_name] = torch.tensor(value)
    for key, tensor in tensors.items():
        if not key.startswith("optim."):
            continue
        _, pid, field_name = key.split(".", 2)
        opt_entries.setdefault(int(pid), {})[field_name] = tensor
    if opt_entries:
        state.optimizer.load_state_dict({
            "state": opt_entries,
            "param_groups": meta["param_groups"],
        })
    state.rng_state = tensors["rng.torch"]
    torch.set_rng_state(state.rng_state)
    return state


def checkpoints_equal(path_a: str | Path, path_b: str | Path) -> bool:
    """True when two checkpoints are bit-identical in content."""
    meta_a, tensors_a = read_container(path_a)
    meta_b, tensors_b = read_container(path_b)
    if meta_a != meta_b or tensors_a.keys() != tensors_b.keys():
        return False
    return all(torch.equal(tensors_a[k], tensors_b[k]) for k in tensors_a)
