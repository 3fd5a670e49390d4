# polarseg/services/training_service.py
"""Adam + cosine annealing + L2 decay training with per-epoch validation and checkpoints."""
import math
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from api.models import ClassSchema, EafnetConfig, MetricsReport, Sample, TrainConfig, TrainLogRow
from config import logger
from core import functional as F
from core.errors import InputValidationError, TrainingDivergedError
from core.optim import AdamState, CosineSchedule, adam_step, cosine_lr
from nn.eafnet import EAFNet, build_model
from services.checkpoint_service import checkpoint_save
from services.dataset_service import augment, branch_inputs, collate_labels, derive_seed
from services.evaluation_service import evaluate
from utils.reports import write_train_log

PathLike = Union[str, Path]
LOSS_TAIL = 10


class TrainResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    model: EAFNet
    log: List[TrainLogRow]
    losses: List[float]
    final_report: Optional[MetricsReport] = None
    best_miou: Optional[float] = None
    last_checkpoint: Optional[Path] = None
    best_checkpoint: Optional[Path] = None


def epoch_batches(count: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    """Seeded shuffle split into batches; a trailing single-sample batch is dropped."""
    order = np.random.default_rng([seed, epoch]).permutation(count)
    batches = [order[i:i + batch_size] for i in range(0, count, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches.pop()
    return batches


def _better(candidate: Optional[float], best: Optional[float]) -> bool:
    if candidate is None:
        return False
    return best is None or candidate > best


def train(model_cfg: EafnetConfig, schema: ClassSchema, train_samples: Sequence[Sample],
          val_samples: Sequence[Sample], cfg: TrainConfig, out_dir: Optional[PathLike] = None,
          model: Optional[EAFNet] = None) -> TrainResult:
    """
    Every sample's augmentation is seeded by (cfg.seed, epoch, id) and batches by
    (cfg.seed, epoch), so (seed, config, data) fix every logged number.
    """
    if not train_samples:
        raise InputValidationError("train needs a non-empty training set")
    if model_cfg.num_classes != schema.num_classes:
        raise InputValidationError("Model class count does not match the class schema",
                                   details={"model": model_cfg.num_classes, "schema": schema.num_classes})
    model = model or build_model(model_cfg)
    params = dict(model.named_parameters())
    decay = set(model.decay_names())
    state = AdamState()
    augmentation = cfg.augmentation()
    steps_per_epoch = len(epoch_batches(len(train_samples), cfg.batch_size, cfg.seed, 0))
    schedule = CosineSchedule(lr_initial=cfg.lr, floor_fraction=cfg.floor_fraction,
                              total_steps=max(cfg.epochs * steps_per_epoch, 1))
    out_path = Path(out_dir) if out_dir is not None else None

    result = TrainResult(model=model, log=[], losses=[])
    step = 0
    lr = schedule.lr_initial
    for epoch in range(cfg.epochs):
        epoch_losses = []
        for batch in epoch_batches(len(train_samples), cfg.batch_size, cfg.seed, epoch):
            lr = cosine_lr(step, schedule)
            samples = [augment(train_samples[i], augmentation, derive_seed(cfg.seed, epoch, train_samples[i].id))
                       for i in batch]
            model.train()
            model.zero_grad()
            logits = model(branch_inputs(samples, model_cfg.branches))
            loss = F.softmax_cross_entropy(logits, collate_labels(samples), schema.ignore_ids)
            value = loss.item()
            result.losses.append(value)
            if not math.isfinite(value):
                raise TrainingDivergedError(step, lr, result.losses[-LOSS_TAIL:])
            loss.backward()
            adam_step(params, state, lr, cfg.weight_decay, decay)
            epoch_losses.append(value)
            logger.debug(f"epoch {epoch} step {step} lr={lr:.3e} loss={value:.5f}")
            step += 1

        report = evaluate(model, val_samples, schema, cfg.eval_shards, cfg.ignore_background_in_miou) \
            if val_samples else None
        miou = report.miou if report is not None else None
        row = TrainLogRow(epoch=epoch, step=step, lr=lr, loss=float(np.mean(epoch_losses)), val_miou=miou)
        result.log.append(row)
        result.final_report = report
        logger.info(f"Epoch {epoch + 1}/{cfg.epochs}: loss={row.loss:.4f} lr={lr:.3e} val_mIoU={miou}")

        if out_path is not None:
            result.last_checkpoint = checkpoint_save(model, out_path / "last.eafc")
            write_train_log(out_path / "train_log.csv", result.log)
        if _better(miou, result.best_miou):
            result.best_miou = miou
            if out_path is not None:
                result.best_checkpoint = checkpoint_save(model, out_path / "best.eafc")
    return result
