import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from . import random_utils
from .archive_io import write_container
from .datapipe import ROLE_KEYS, FinetuneDataset, batch_iter, batches_per_epoch
from .encoders import ImageEncoder, SimilarityFn, TextEncoder
from .exceptions import ConfigError, NumericalError, ShapeError
from .numcore import Tensor, no_grad
from .objectives import REDRAW_TAGS, BaseObjective, EmbeddingBatch, ObjectiveConfig, build_objective, sample_negatives

logger = logging.getLogger(__name__)

DEFAULT_LR = 1e-4
METRIC_COLUMNS = ["epoch", "train_loss", "val_loss", "lr"]


@dataclass
class TrainConfig:
    """Optimization settings for one finetuning run.

    Args:
        objective (str): objective tag. Defaults to "triplet".
        epochs (int): passes over the training split. Defaults to 5.
        batch_size (int): samples per step. Defaults to 32.
        lr (float, optional): peak learning rate. None resolves to 1e-4, or `liv_lr` for liv.
        liv_lr (float): peak learning rate used for liv when `lr` is None. Defaults to 1e-5.
        lr_min (float): final learning rate of the cosine schedule. Defaults to 1e-6.
        scheduler (str): "cosine" or "constant". Defaults to "cosine".
        seed (int): root seed of the negative-sampling stream. Defaults to 0.
        per_batch_views (bool): reassign views every batch instead of every epoch. Defaults to False.
        clip_grad_norm (float, optional): global gradient norm cap. Defaults to None (off).
        objective_config (ObjectiveConfig): loss hyperparameters.
    """

    objective: str = "triplet"
    epochs: int = 5
    batch_size: int = 32
    lr: Optional[float] = None
    liv_lr: float = 1e-5
    lr_min: float = 1e-6
    scheduler: str = "cosine"
    seed: int = 0
    per_batch_views: bool = False
    clip_grad_norm: Optional[float] = None
    objective_config: ObjectiveConfig = field(default_factory=ObjectiveConfig)

    def __post_init__(self):
        if isinstance(self.objective_config, dict):
            self.objective_config = ObjectiveConfig(**{**self.objective_config, "objective": self.objective})
        elif self.objective_config.objective != self.objective:
            self.objective_config = replace(self.objective_config, objective=self.objective)
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.scheduler not in ("cosine", "constant"):
            raise ConfigError(f"scheduler must be 'cosine' or 'constant', got {self.scheduler!r}")
        if not self.resolved_lr > self.lr_min > 0:
            raise ConfigError(f"need lr > lr_min > 0, got lr={self.resolved_lr}, lr_min={self.lr_min}")
        if self.clip_grad_norm is not None and not self.clip_grad_norm > 0:
            raise ConfigError(f"clip_grad_norm must be positive, got {self.clip_grad_norm}")

    @property
    def resolved_lr(self) -> float:
        if self.lr is not None:
            return float(self.lr)
        return self.liv_lr if self.objective == "liv" else DEFAULT_LR


def cosine_lr(step: int, total_steps: int, lr: float, lr_min: float) -> float:
    """Cosine annealing from `lr` at step 0 to `lr_min` at `total_steps`, clamped beyond."""
    if step < 0:
        raise ConfigError(f"step must be non-negative, got {step}")
    if step >= total_steps:
        return lr_min
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor], **kwargs) -> "OptimizerState":
        return cls(
            m={name: np.zeros_like(t.data) for name, t in params.items()},
            v={name: np.zeros_like(t.data) for name, t in params.items()},
            **kwargs,
        )


def adam_step(
    params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimizerState, lr: float
) -> Tuple[Mapping[str, Tensor], OptimizerState]:
    """Bias-corrected Adam update applied to `params` in place."""
    for name, g in grads.items():
        if np.isnan(g).any():
            raise NumericalError(f"NaN gradient for parameter {name!r}")
        if name not in params or g.shape != params[name].shape or state.m[name].shape != g.shape:
            raise ShapeError(f"gradient {name!r} does not match its parameter or moment buffers")

    state.step += 1
    t = state.step
    for name, g in grads.items():
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / (1.0 - state.beta1**t)
        v_hat = state.v[name] / (1.0 - state.beta2**t)
        params[name].data = params[name].data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def min_batch_size(cfg: ObjectiveConfig) -> int:
    """Smallest batch the objective accepts: in-batch negatives need other elements to point at."""
    if cfg.objective not in REDRAW_TAGS:
        return cfg.negatives_count + 1
    return 2 if cfg.objective == "liv" else 1


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm:
        return grads, total
    scale = max_norm / total
    return {name: g * scale for name, g in grads.items()}, total


@dataclass
class TrainedModel:
    image_encoder: ImageEncoder
    text_encoder: TextEncoder
    similarity: SimilarityFn
    objective: str
    best_epoch: int
    metrics: pd.DataFrame
    lr_trace: np.ndarray

    def checkpoint_metadata(self) -> dict:
        return {"objective": self.objective, "best_epoch": self.best_epoch, "steps": int(len(self.lr_trace))}


def encoder_parameters(image: ImageEncoder, text: TextEncoder) -> Dict[str, Tensor]:
    params = image.parameters("image.")
    params.update(text.parameters("text."))
    return params


def embed_batch(
    batch: FinetuneDataset,
    image: ImageEncoder,
    text: TextEncoder,
    roles: Tuple[str, ...],
    negatives: Optional[np.ndarray] = None,
) -> List[EmbeddingBatch]:
    """One EmbeddingBatch per tuple draw; all image roles go through a single forward pass."""
    keys = [ROLE_KEYS[role] for role in roles if role in ROLE_KEYS]
    size = len(batch)
    blocks = [batch.observations(key, d) for d in range(batch.draws) for key in keys]
    z = image(np.concatenate(blocks, axis=0)) if blocks else None
    v = text(batch.goal_ids) if "v" in roles else None

    embedded = []
    for d in range(batch.draws):
        slots = {}
        for n, role in enumerate(role for role in roles if role in ROLE_KEYS):
            start = (d * len(keys) + n) * size
            slots[role] = z[start : start + size]
        embedded.append(EmbeddingBatch(v=v, negatives=negatives, **slots))
    return embedded


def batch_loss(objective: BaseObjective, embedded: List[EmbeddingBatch]) -> Tensor:
    """Objective averaged over tuple draws."""
    total = objective(embedded[0])
    for batch in embedded[1:]:
        total = total + objective(batch)
    return total / len(embedded) if len(embedded) > 1 else total


def evaluate_loss(
    objective: BaseObjective, dataset: FinetuneDataset, image: ImageEncoder, text: TextEncoder, batch_size: int
) -> float:
    """Mean loss over consecutive batches on the canonical view with cyclic negatives."""
    canonical = dataset.with_views(0)
    B = min(batch_size, len(canonical))
    losses = []
    for b in range(len(canonical) // B):
        batch = canonical.subset(np.arange(b * B, (b + 1) * B))
        with no_grad():
            losses.append(batch_loss(objective, embed_batch(batch, image, text, objective.roles)).item())
    return float(np.mean(losses))


def _dump_batch(run_dir: Optional[Path], batch: FinetuneDataset, epoch: int, step: int) -> None:
    if run_dir is None:
        return
    arrays = {"rollout_ids": batch.rollout_ids, "positions": batch.positions}
    arrays.update({f"indices.{k}": a for k, a in batch.indices.items()})
    arrays.update({f"views.{k}": a for k, a in batch.views.items()})
    path = write_container(
        Path(run_dir) / "nonfinite_batch.npz",
        {"format": "vlreward.batch", "version": 1, "objective": batch.objective, "epoch": epoch, "step": step},
        arrays,
    )
    logger.error("Dumped the offending batch to %s", path)


def train(
    cfg: TrainConfig,
    encoders: Tuple[ImageEncoder, TextEncoder],
    dataset: FinetuneDataset,
    val_dataset: Optional[FinetuneDataset] = None,
    run_dir: Optional[Union[str, Path]] = None,
    progress: bool = False,
) -> TrainedModel:
    """Finetune `encoders` in place and return them loaded with the best-validation-loss weights.

    Without a validation split the best epoch is picked by training loss.
    """
    if dataset.objective != cfg.objective:
        raise ConfigError(f"dataset was built for {dataset.objective!r}, the run trains {cfg.objective!r}")
    image, text = encoders
    objective = build_objective(cfg.objective_config)
    params = encoder_parameters(image, text)
    if not params:
        raise ConfigError("the encoders have no trainable parameters")

    lr = cfg.resolved_lr
    if cfg.objective == "liv" and lr > cfg.liv_lr:
        logger.warning("Training liv at lr=%g; it is unstable above %g", lr, cfg.liv_lr)

    smallest = min_batch_size(cfg.objective_config)
    if cfg.batch_size < smallest:
        raise ConfigError(f"{cfg.objective} needs batches of at least {smallest}, got batch_size={cfg.batch_size}")
    if val_dataset is not None and min(cfg.batch_size, len(val_dataset)) < smallest:
        raise ConfigError(
            f"{cfg.objective} needs validation batches of at least {smallest}, the split holds {len(val_dataset)} samples"
        )
    n_batches = batches_per_epoch(dataset, cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    state = OptimizerState.for_params(params)
    negatives_rs = random_utils.derive_random_state(cfg.seed, "negatives")
    in_batch_negatives = cfg.objective not in REDRAW_TAGS
    run_dir = Path(run_dir) if run_dir is not None else None

    rows, lr_trace, step = [], [], 0
    best_loss, best_epoch, best_state = math.inf, 0, None
    for epoch in tqdm(range(cfg.epochs), desc=cfg.objective, disable=not progress):
        losses = []
        for batch in batch_iter(dataset, cfg.batch_size, epoch, cfg.per_batch_views):
            if cfg.scheduler == "cosine":
                step_lr = cosine_lr(step, max(total_steps - 1, 1), lr, cfg.lr_min)
            else:
                step_lr = lr
            negatives = None
            if in_batch_negatives:
                negatives = sample_negatives(len(batch), cfg.objective_config.negatives_count, negatives_rs)
            try:
                loss = batch_loss(objective, embed_batch(batch, image, text, objective.roles, negatives))
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericalError(f"non-finite loss {value} at epoch {epoch}, step {step}")
                loss.backward()
            except NumericalError:
                _dump_batch(run_dir, batch, epoch, step)
                raise

            grads = {name: t.grad if t.grad is not None else np.zeros_like(t.data) for name, t in params.items()}
            if cfg.clip_grad_norm is not None:
                grads, _ = clip_grad_norm(grads, cfg.clip_grad_norm)
            adam_step(params, grads, state, step_lr)
            for t in params.values():
                t.zero_grad()
            losses.append(value)
            lr_trace.append(step_lr)
            step += 1

        train_loss = float(np.mean(losses))
        val_loss = evaluate_loss(objective, val_dataset, image, text, cfg.batch_size) if val_dataset is not None else math.nan
        rows.append({"epoch": epoch + 1, "train_loss": train_loss, "val_loss": val_loss, "lr": lr_trace[-1]})
        logger.info("%s epoch %d: train %.5f, val %.5f", cfg.objective, epoch + 1, train_loss, val_loss)

        score = val_loss if val_dataset is not None else train_loss
        if score < best_loss:
            best_loss, best_epoch = score, epoch + 1
            best_state = (image.state_dict(), text.state_dict())

    if best_state is not None:
        image.load_state_dict(best_state[0])
        text.load_state_dict(best_state[1])
    return TrainedModel(
        image_encoder=image,
        text_encoder=text,
        similarity=cfg.objective_config.similarity,
        objective=cfg.objective,
        best_epoch=best_epoch,
        metrics=pd.DataFrame(rows, columns=METRIC_COLUMNS),
        lr_trace=np.asarray(lr_trace),
    )


def write_metrics(path: Union[str, Path], metrics: pd.DataFrame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metrics.to_csv(path, index=False, columns=METRIC_COLUMNS, float_format="%.10g")
    return path
