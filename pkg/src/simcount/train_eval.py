"""Training loop, count losses, evaluation metrics, ablation sweeps.

Everything here is deterministic given the configs: model init is seeded,
batch order comes from a per-epoch generator, augmentation is seeded per
record, and evaluation never touches RNG state.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .config import ABLATION_ROWS, ModelConfig, ablation_variant
from .data import AugmentationConfig, DatasetRecord, augment, resize_policy
from .errors import (
    EmptySplitError,
    MissingAuxiliaryError,
    NaNLossError,
    ShapeMismatchError,
)
from .model import build_model, parameter_count


def _check_counts(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.ndim != 1 or pred.shape != target.shape:
        raise ShapeMismatchError(
            f"count vectors must be 1D and equal length, got {tuple(pred.shape)} "
            f"vs {tuple(target.shape)}"
        )


def count_loss_l2(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared count error over the batch."""
    _check_counts(pred, target)
    return ((pred - target) ** 2).mean()


def count_loss_l1(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute count error over the batch."""
    _check_counts(pred, target)
    return (pred - target).abs().mean()


def exemplar_guided_loss(
    pred: torch.Tensor, aux_pred: torch.Tensor | None, target: torch.Tensor
) -> torch.Tensor:
    """Equal blend of the main squared loss and an auxiliary-prediction squared loss.

    The auxiliary prediction comes from an exemplar-supervised companion model;
    this package ships only the loss surface and the error path for its absence.
    """
    if aux_pred is None:
        raise MissingAuxiliaryError(
            "exemplar-guided loss needs auxiliary count predictions, none provided"
        )
    return 0.5 * count_loss_l2(aux_pred, target) + 0.5 * count_loss_l2(pred, target)


def count_mae(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    return float(np.mean(np.abs(pred - target)))


def count_mse(pred, target) -> float:
    """Squared-error metric reported on the root scale, so count_mae <= count_mse."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    return float(np.sqrt(np.mean((pred - target) ** 2)))


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; defaults follow the reference recipe.

    learning_rate 0 is allowed so a no-op training run stays expressible.
    """

    batch_size: int = 10
    learning_rate: float = 1e-5
    weight_decay: float = 1e-4
    max_steps: int = 1000
    eval_interval: int = 100
    loss: str = "l2"
    exemplar_variant: bool = False
    augment: AugmentationConfig | None = None
    patience: int | None = None
    train_mae_stop: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be >= 0")
        if self.max_steps < 0 or self.eval_interval < 0:
            raise ValueError("max_steps and eval_interval must be >= 0")
        if self.loss not in ("l1", "l2"):
            raise ValueError(f"loss must be 'l1' or 'l2', got {self.loss!r}")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1 when set")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        aug = data.get("augment")
        if isinstance(aug, dict):
            data["augment"] = AugmentationConfig(**aug)
        return cls(**data)


@dataclass
class EvalReport:
    """Metrics for one split at one training step; mse is on the root scale."""

    split: str
    step: int
    mae: float
    mse: float
    n_records: int
    abs_errors: list[float] = field(default_factory=list)


@dataclass
class TrainResult:
    loss_curve: list[float]
    eval_history: list[EvalReport]
    steps: int
    stop_reason: str
    best_step: int | None = None
    best_val_mae: float | None = None
    best_state: dict | None = None
    checkpoint_path: str | None = None


def _materialize(record: DatasetRecord) -> torch.Tensor:
    if record.image is not None:
        return record.image
    return resize_policy(record.load_image(), "train_main")


def _batched(items, batch_size: int):
    """Pack consecutive same-shape images into batches of at most batch_size."""
    current: list = []
    for item in items:
        if current and (
            item[0].shape != current[0][0].shape or len(current) >= batch_size
        ):
            yield current
            current = []
        current.append(item)
    if current:
        yield current


def _epoch_batches(records, cfg: TrainConfig, epoch: int):
    rng = np.random.default_rng([cfg.seed, 104729, epoch])
    order = rng.permutation(len(records))
    items = []
    for idx in order:
        rec = records[int(idx)]
        img = _materialize(rec)
        if cfg.augment is not None:
            img = augment(img, cfg.augment, epoch * len(records) + int(idx))
        items.append((img, rec.count, rec.record_id or str(int(idx))))
    return _batched(items, cfg.batch_size)


def evaluate(
    model,
    records,
    split: str = "val",
    step: int = 0,
    batch_size: int = 32,
) -> EvalReport:
    """Clamp predictions at zero and score MAE / root-scale MSE over a split."""
    if not records:
        raise EmptySplitError(f"{split} split is empty")
    model.eval()
    abs_errors: list[float] = []
    sq_sum = 0.0
    with torch.no_grad():
        items = ((_materialize(r), r.count, r.record_id) for r in records)
        for batch in _batched(items, batch_size):
            images = torch.stack([b[0] for b in batch])
            targets = torch.tensor([b[1] for b in batch], dtype=torch.float32)
            preds = model(images).counts.clamp_min(0.0)
            diff = preds - targets
            abs_errors.extend(diff.abs().tolist())
            sq_sum += float((diff**2).sum())
    n = len(abs_errors)
    return EvalReport(
        split=split,
        step=step,
        mae=float(np.mean(abs_errors)),
        mse=math.sqrt(sq_sum / n),
        n_records=n,
        abs_errors=abs_errors,
    )


def train(
    model,
    train_records,
    cfg: TrainConfig,
    val_records=None,
    out_dir=None,
) -> TrainResult:
    """Optimize the model with AdamW; returns the loss curve and eval history.

    Tracks the best validation MAE, snapshotting those weights in memory and,
    when out_dir is given, to ``best.ckpt``. A non-finite loss aborts with the
    offending step and record ids. The model is left at its final (not best)
    parameters.
    """
    if not train_records:
        raise EmptySplitError("train split is empty")
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    loss_curve: list[float] = []
    history: list[EvalReport] = []
    best_step = None
    best_val_mae = None
    best_state = None
    checkpoint_path = None
    evals_since_best = 0
    step = 0
    epoch = 0
    stop_reason = "max_steps"

    while step < cfg.max_steps and stop_reason == "max_steps":
        for batch in _epoch_batches(train_records, cfg, epoch):
            if step >= cfg.max_steps:
                break
            model.train()
            images = torch.stack([b[0] for b in batch])
            targets = torch.tensor([b[1] for b in batch], dtype=torch.float32)
            output = model(images)
            if cfg.exemplar_variant:
                aux = (output.intermediates or {}).get("aux_counts")
                loss = exemplar_guided_loss(output.counts, aux, targets)
            elif cfg.loss == "l1":
                loss = count_loss_l1(output.counts, targets)
            else:
                loss = count_loss_l2(output.counts, targets)
            if not torch.isfinite(loss):
                raise NaNLossError(step, [b[2] for b in batch])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            loss_curve.append(float(loss.detach()))
            step += 1

            if cfg.eval_interval and step % cfg.eval_interval == 0:
                if val_records:
                    report = evaluate(model, val_records, split="val", step=step)
                    history.append(report)
                    if best_val_mae is None or report.mae < best_val_mae:
                        best_val_mae = report.mae
                        best_step = step
                        best_state = {
                            k: v.detach().cpu().clone()
                            for k, v in model.state_dict().items()
                        }
                        evals_since_best = 0
                        if out_dir is not None:
                            checkpoint_path = str(out_dir / "best.ckpt")
                            save_checkpoint(
                                checkpoint_path, model, optimizer=optimizer, step=step
                            )
                    else:
                        evals_since_best += 1
                        if cfg.patience is not None and evals_since_best >= cfg.patience:
                            stop_reason = "patience"
                            break
                if cfg.train_mae_stop is not None:
                    train_report = evaluate(
                        model, train_records, split="train", step=step
                    )
                    history.append(train_report)
                    if train_report.mae <= cfg.train_mae_stop:
                        stop_reason = "train_mae_stop"
                        break
        epoch += 1

    return TrainResult(
        loss_curve=loss_curve,
        eval_history=history,
        steps=step,
        stop_reason=stop_reason,
        best_step=best_step,
        best_val_mae=best_val_mae,
        best_state=best_state,
        checkpoint_path=checkpoint_path,
    )


def write_loss_curve(path, curve) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        for i, value in enumerate(curve, start=1):
            writer.writerow([i, f"{value:.8g}"])


def write_eval_history(path, history) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "split", "mae", "mse", "n_records"])
        for report in history:
            writer.writerow(
                [report.step, report.split, f"{report.mae:.6f}", f"{report.mse:.6f}", report.n_records]
            )


ABLATION_CSV_COLUMNS = (
    "row",
    "recalibration",
    "condenser",
    "location_counter",
    "param_count",
    "train_mae",
    "train_mse",
    "heldout_mae",
    "heldout_mse",
    "error",
)


def run_ablation(
    base_config: ModelConfig,
    train_records,
    heldout_records,
    train_cfg: TrainConfig,
    rows=tuple(ABLATION_ROWS),
    out_csv=None,
) -> list[dict]:
    """Train each architecture row under one shared budget and score both splits.

    A row that raises keeps its error message in the result table instead of
    aborting the sweep. Pass a train_cfg without early stopping so every row
    gets the same number of steps.
    """
    results = []
    for row in rows:
        cfg = ablation_variant(base_config, row)
        model = build_model(cfg)
        entry = {
            "row": row,
            "recalibration": cfg.use_recalibration,
            "condenser": cfg.use_condenser,
            "location_counter": cfg.use_location_counter,
            "param_count": parameter_count(model),
            "train_mae": math.nan,
            "train_mse": math.nan,
            "heldout_mae": math.nan,
            "heldout_mse": math.nan,
            "error": "",
        }
        try:
            train(model, train_records, train_cfg)
            train_report = evaluate(model, train_records, split="train")
            heldout_report = evaluate(model, heldout_records, split="heldout")
            entry.update(
                train_mae=train_report.mae,
                train_mse=train_report.mse,
                heldout_mae=heldout_report.mae,
                heldout_mse=heldout_report.mse,
            )
        except Exception as e:
            entry["error"] = f"{type(e).__name__}: {e}"
        results.append(entry)
    if out_csv is not None:
        write_ablation_csv(out_csv, results)
    return results


def write_ablation_csv(path, results) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=ABLATION_CSV_COLUMNS)
        writer.writeheader()
        for entry in results:
            writer.writerow({k: entry.get(k, "") for k in ABLATION_CSV_COLUMNS})
