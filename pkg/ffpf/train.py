"""
Training loop, evaluation, and the four-way ablation driver.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from contextvars import copy_context
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ffpf.checkpoint import Checkpoint
from ffpf.data import Dataset
from ffpf.detect import evaluate_map
from ffpf.exceptions import CheckpointConfigMismatchError, ConfigError, TrainingDivergedError
from ffpf.model import FFPF
from ffpf.models import (
    AblationRow,
    BoxDetection,
    EpochMetrics,
    EvaluationResult,
    ModelConfig,
    TrainConfig,
)
from ffpf.settings import get_settings
from ffpf.tensor import AutodiffTape, Parameter, backward

logger = logging.getLogger(__name__)

ABLATION_ROWS: list[tuple[str, bool, bool]] = [
    ("baseline", False, False),
    ("+F-ResNet", True, False),
    ("+BS-FPN", False, True),
    ("FFPF", True, True),
]


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay folded into the gradient."""

    def __init__(
        self, parameters: list[Parameter], momentum: float = 0.9, weight_decay: float = 1e-4
    ) -> None:
        self.parameters = parameters
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, lr: float) -> None:
        for p in self.parameters:
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            d_p = (grad + self.weight_decay * p.data).astype(p.data.dtype)
            name = p.name or str(p.node_id)
            buf = self.buffers.get(name)
            if buf is None:
                buf = d_p.copy()
            else:
                buf = (self.momentum * buf + d_p).astype(p.data.dtype)
            self.buffers[name] = buf
            p.data = (p.data - lr * buf).astype(p.data.dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.buffers.items()}

    def load_state_dict(self, buffers: dict[str, np.ndarray]) -> None:
        self.buffers = {k: np.array(v, dtype=np.float32) for k, v in buffers.items()}


@dataclass
class TrainResult:
    model: FFPF
    checkpoint: Checkpoint
    metrics: list[EpochMetrics] = field(default_factory=list)


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def predict_dataset(
    model: FFPF,
    dataset: Dataset,
    batch_size: int = 8,
    score_thr: float = 0.05,
    iou_thr: float = 0.5,
) -> list[BoxDetection]:
    was_training = model.training
    model.eval()
    chunks = _batches(np.arange(len(dataset)), batch_size)

    def _run(indices: np.ndarray) -> list[BoxDetection]:
        images, _ = dataset.batch(indices)
        per_image = model.predict(
            images, dataset.image_ids(indices), score_thr=score_thr, iou_thr=iou_thr
        )
        return [d for dets in per_image for d in dets]

    try:
        with ThreadPoolExecutor(max_workers=max(1, get_settings().THREADS)) as pool:
            results = list(pool.map(_run, chunks))
    finally:
        model.train(was_training)
    return [d for chunk in results for d in chunk]


def evaluate(
    model: FFPF,
    dataset: Dataset,
    batch_size: int = 8,
    score_thr: float = 0.05,
    iou_thr: float = 0.5,
) -> tuple[EvaluationResult, list[BoxDetection]]:
    """AP@``iou_thr`` per class and its mean over ``dataset``."""
    detections = predict_dataset(model, dataset, batch_size, score_thr)
    result = evaluate_map(
        detections, dataset.ground_truth(), model.config.num_classes, iou_thr
    )
    return result, detections


def train(
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    eval_dataset: Dataset | None = None,
    metrics_path: Path | None = None,
    resume: Checkpoint | None = None,
) -> TrainResult:
    """Train from the seeded initialization, or continue a saved run.

    The data order of epoch ``e`` comes from a generator seeded by
    (train seed, e), so every configuration trained with the same TrainConfig
    sees the same batches, and a resumed run sees the batches the
    uninterrupted run would have seen.

    Args:
        dataset: Training split. Its images must be multiples of the model's
            size divisor.
        model_config: Architecture to train. Must equal ``resume.config`` when
            resuming.
        train_config: Schedule of the whole run. ``epochs`` is the last epoch
            to train, counted from the start of the run, not from ``resume``.
        eval_dataset: When given and ``train_config.evaluate_each_epoch`` is
            set, AP@0.5 is measured on it after every epoch.
        metrics_path: JSONL file receiving one EpochMetrics record per epoch.
            Truncated on a fresh run, appended to on a resumed one.
        resume: Checkpoint to continue from. Its weights, running statistics
            and momentum buffers are restored and training starts at
            ``resume.epoch + 1``.

    Returns:
        The trained model, a checkpoint at ``train_config.epochs`` carrying
        the momentum buffers, and the metrics of the epochs run by this call.

    Raises:
        ConfigError: The image size does not fit the model's strides, or the
            checkpoint is already past ``train_config.epochs``.
        CheckpointConfigMismatchError: ``resume`` was saved for another
            architecture.
        TrainingDivergedError: A step produced a non-finite loss.
    """
    height, width = dataset.image_size
    if height % model_config.size_divisor or width % model_config.size_divisor:
        raise ConfigError(
            f"images are {height}x{width}; the model needs multiples of {model_config.size_divisor}"
        )
    model = FFPF(model_config)
    optimizer = SGD(model.parameters(), train_config.momentum, train_config.weight_decay)
    start_epoch = 1
    if resume is not None:
        if resume.config != model_config:
            raise CheckpointConfigMismatchError(
                "checkpoint was saved for a different model configuration"
            )
        if resume.epoch > train_config.epochs:
            raise ConfigError(
                f"checkpoint is at epoch {resume.epoch}, past the last epoch {train_config.epochs}"
            )
        resume.apply(model)
        optimizer.load_state_dict(resume.momentum)
        start_epoch = resume.epoch + 1
        logger.info("resuming at epoch %d", start_epoch)
    model.train()
    metrics: list[EpochMetrics] = []
    if metrics_path is not None:
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        if resume is None or not metrics_path.exists():
            metrics_path.write_text("")

    steps_per_epoch = len(_batches(np.arange(len(dataset)), train_config.batch_size))
    global_step = steps_per_epoch * (start_epoch - 1)
    for epoch in range(start_epoch, train_config.epochs + 1):
        order = np.random.default_rng([train_config.seed, epoch]).permutation(len(dataset))
        losses: list[float] = []
        for indices in _batches(order, train_config.batch_size):
            lr = train_config.lr_at_step(epoch, global_step)
            images, targets = dataset.batch(indices)
            with AutodiffTape() as tape:
                loss = model.loss(images, targets)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"loss became {value} at step {global_step} (epoch {epoch})",
                    step=global_step,
                )
            backward(tape, loss, model.parameters())
            optimizer.step(lr)
            model.zero_grad()
            logger.debug("step %d: loss %.6f lr %.6g", global_step, value, lr)
            losses.append(value)
            global_step += 1

        ap50 = None
        if eval_dataset is not None and train_config.evaluate_each_epoch:
            ap50 = evaluate(model, eval_dataset, train_config.batch_size)[0].map
        record = EpochMetrics(
            epoch=epoch,
            lr=train_config.lr_at(epoch),
            mean_loss=float(np.mean(losses)) if losses else float("nan"),
            steps=len(losses),
            ap50=ap50,
        )
        metrics.append(record)
        logger.info(
            "epoch %d: lr %.6g, mean loss %.5f, AP@0.5 %s",
            epoch,
            record.lr,
            record.mean_loss,
            "n/a" if ap50 is None else f"{ap50:.4f}",
        )
        if metrics_path is not None:
            with open(metrics_path, "a") as f:
                f.write(record.model_dump_json() + "\n")

    checkpoint = Checkpoint.from_model(
        model, model_config, train_config.epochs, optimizer.state_dict()
    )
    return TrainResult(model=model, checkpoint=checkpoint, metrics=metrics)


def restore_model(checkpoint: Checkpoint) -> FFPF:
    model = FFPF(checkpoint.config)
    checkpoint.apply(model)
    model.eval()
    return model


def ablate(
    dataset: Dataset,
    train_config: TrainConfig,
    eval_dataset: Dataset | None = None,
    model_config: ModelConfig | None = None,
) -> list[AblationRow]:
    """Train the four (FU, BS-FPN) on/off combinations with identical seeds and
    data order, then score each on ``eval_dataset`` (``dataset`` when omitted).

    Rows are independent and run on up to ``FFPF_THREADS`` workers; each row's
    result does not depend on the worker count.
    """
    base = model_config or ModelConfig()
    held_out = eval_dataset or dataset
    no_epoch_eval = train_config.model_copy(update={"evaluate_each_epoch": False})

    def _row(name: str, fu: bool, bs_fpn: bool) -> AblationRow:
        logger.info("ablation row %s (FU=%s, BS-FPN=%s)", name, fu, bs_fpn)
        result = train(dataset, base.variant(fu=fu, bs_fpn=bs_fpn), no_epoch_eval)
        scores, _ = evaluate(result.model, held_out, train_config.batch_size)
        logger.info("ablation row %s: AP@0.5 %.4f", name, scores.map)
        return AblationRow(
            name=name,
            fu=fu,
            bs_fpn=bs_fpn,
            ap50=scores.map,
            per_class_ap=scores.per_class_ap,
        )

    # rows inherit the caller's precision setting
    contexts = [copy_context() for _ in ABLATION_ROWS]
    workers = max(1, min(get_settings().THREADS, len(ABLATION_ROWS)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(ctx.run, _row, *row) for ctx, row in zip(contexts, ABLATION_ROWS)
        ]
        return [f.result() for f in futures]
