"""Minibatch SGD with momentum, evaluation and multi-seed architecture comparison."""

import logging
import time
from collections.abc import Callable, Iterable

import numpy as np
from scipy.special import log_softmax

from app.core.data import DatasetBundle
from app.core.models import ArchName, AttentionInit, ComparisonRow, EpochRecord, TrainConfig
from app.core.network import Model, build_model, count_parameters
from app.core.tensor import Tensor

logger = logging.getLogger(__name__)

EVAL_BATCH = 256

EpochHook = Callable[[int, Model], None]


class TrainingDivergedError(RuntimeError):
    pass


def cross_entropy(logits: Tensor, labels: np.ndarray) -> tuple[float, Tensor]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    log_probs = log_softmax(logits, axis=-1)
    rows = np.arange(labels.shape[0])
    loss = -float(log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return loss, grad / labels.shape[0]


class SGD:
    """Heavy-ball momentum: ``v = momentum * v + g; p -= lr * v``, applied in place."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float, frozen: Iterable[str] = ()):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.frozen = set(frozen)
        self.velocity = {key: np.zeros_like(value) for key, value in params.items()}

    def step(self, grads: dict[str, Tensor]) -> None:
        for key, param in self.params.items():
            if key in self.frozen:
                continue
            velocity = self.velocity[key]
            velocity *= self.momentum
            velocity += grads[key]
            param -= self.lr * velocity


def predict(model: Model, images: Tensor, batch: int = EVAL_BATCH) -> np.ndarray:
    """Argmax class per image; ties go to the lowest class index."""
    logits = [model(images[start : start + batch]) for start in range(0, images.shape[0], batch)]
    return np.argmax(np.concatenate(logits), axis=-1)


def evaluate(model: Model, bundle: DatasetBundle) -> float:
    if len(bundle) == 0:
        raise ValueError(f"Cannot evaluate on an empty {bundle.split} split")
    return float(np.mean(predict(model, bundle.images) != bundle.labels))


def train_loop(
    model: Model,
    train: DatasetBundle,
    valid: DatasetBundle,
    cfg: TrainConfig,
    epoch_hook: EpochHook | None = None,
) -> tuple[Model, list[EpochRecord]]:
    """Train ``model`` in place; shuffling is driven by ``cfg.seed`` alone."""
    if len(train) == 0:
        raise ValueError("Training split is empty")
    frozen = model.attention_keys() if cfg.freeze_attention else set()
    optimizer = SGD(model.parameters(), cfg.lr, cfg.momentum, frozen)
    rng = np.random.default_rng(cfg.seed)
    history: list[EpochRecord] = []

    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(train), cfg.batch):
            index = order[start : start + cfg.batch]
            loss, grad = cross_entropy(model(train.images[index]), train.labels[index])
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"Training diverged in epoch {epoch}: loss is {loss}")
            model.backward(grad)
            optimizer.step(model.gradients())
            total += loss * index.size

        record = EpochRecord(epoch=epoch, train_loss=total / len(train), valid_error=evaluate(model, valid))
        history.append(record)
        logger.info(
            f"epoch {epoch}: loss {record.train_loss:.4f}, valid error {record.valid_error:.4f} "
            f"({time.perf_counter() - started:.1f}s)"
        )
        if epoch_hook is not None:
            epoch_hook(epoch, model)
    return model, history


def compare_architectures(
    archs: list[ArchName],
    seeds: list[int],
    splits: dict[str, DatasetBundle],
    cfg: TrainConfig,
    channels: int = 8,
    attention_init: AttentionInit = "random",
) -> list[ComparisonRow]:
    """Train every architecture once per seed on the same splits and summarize its test error."""
    rows = []
    for arch in archs:
        errors, parameters = [], 0
        for seed in seeds:
            model = build_model(arch, seed, channels, attention_init)
            parameters = count_parameters(model)
            train_loop(model, splits["train"], splits["valid"], cfg.model_copy(update={"seed": seed}))
            errors.append(evaluate(model, splits["test"]))
            logger.info(f"{arch} seed {seed}: test error {errors[-1]:.4f}")
        rows.append(
            ComparisonRow(
                arch=arch,
                seeds=seeds,
                test_errors=errors,
                mean_error=float(np.mean(errors)),
                std_error=float(np.std(errors)),
                parameters=parameters,
            )
        )
    return rows
