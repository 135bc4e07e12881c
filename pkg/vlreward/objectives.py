"""Contrastive reward-model objectives over batches of image and goal embeddings.

Objectives are callable classes in the style of composable transforms: each declares the
embedding roles it consumes, `SumOf` adds objectives together, and `build_objective` maps the
six finetuning configurations to instances. The `loss_*` functions are thin wrappers.
"""
import math
from dataclasses import dataclass, field
from typing import Callable, ClassVar, Dict, Optional, Sequence, Tuple

import numpy as np

from .encoders import SimilarityFn
from .exceptions import BatchContractError, ConfigError, ShapeError, UsageError
from .numcore import Tensor, concat, logsumexp

ROLES = ("z_i", "z_j", "z_j1", "z_k", "v")

OBJECTIVE_TAGS = ("triplet", "tcn_text", "r3m", "vip_text", "vip_text_plus_vip", "liv")

# Tags whose equations carry no in-batch negative slot; for these negatives_count sets how
# many independent tuple draws per sample are averaged.
REDRAW_TAGS = ("triplet", "vip_text", "vip_text_plus_vip", "liv")


@dataclass
class ObjectiveConfig:
    """Loss hyperparameters.

    Args:
        objective (str): one of OBJECTIVE_TAGS. Defaults to "triplet".
        margin (float): triplet margin alpha. Defaults to 0.3.
        gamma (float): VIP discount. Defaults to 0.98.
        negatives_count (int): in-batch negatives per anchor for the TCN family, averaged tuple
            draws for the triplet and VIP families. Defaults to 3.
        similarity (SimilarityFn): embedding similarity. Defaults to cosine.
        triplet_reduction (str): "sum" over the batch, or "mean". Defaults to "sum".
    """

    objective: str = "triplet"
    margin: float = 0.3
    gamma: float = 0.98
    negatives_count: int = 3
    similarity: SimilarityFn = field(default_factory=SimilarityFn)
    triplet_reduction: str = "sum"

    def __post_init__(self):
        if isinstance(self.similarity, str):
            self.similarity = SimilarityFn(self.similarity)
        elif isinstance(self.similarity, dict):
            self.similarity = SimilarityFn(**self.similarity)
        if self.objective not in OBJECTIVE_TAGS:
            raise UsageError(f"Unknown objective {self.objective!r}, expected one of {OBJECTIVE_TAGS}")
        if not self.margin > 0:
            raise ConfigError(f"margin must be positive, got {self.margin}")
        if not 0 < self.gamma < 1:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.negatives_count < 1:
            raise ConfigError(f"negatives_count must be at least 1, got {self.negatives_count}")
        if self.triplet_reduction not in ("sum", "mean"):
            raise ConfigError(f"triplet_reduction must be 'sum' or 'mean', got {self.triplet_reduction!r}")


def redraws(cfg: ObjectiveConfig) -> int:
    return cfg.negatives_count if cfg.objective in REDRAW_TAGS else 1


@dataclass
class EmbeddingBatch:
    """Embeddings of B samples keyed by role.

    `z_i`, `z_j`, `z_j1` (timestep j+1) and `z_k` are image embeddings, `v` the goal
    embedding. `negatives` optionally fixes the in-batch negatives: row b lists the batch
    elements used as negatives for anchor b.
    """

    z_i: Optional[Tensor] = None
    z_j: Optional[Tensor] = None
    z_j1: Optional[Tensor] = None
    z_k: Optional[Tensor] = None
    v: Optional[Tensor] = None
    negatives: Optional[np.ndarray] = None

    def __post_init__(self):
        shapes = {role: getattr(self, role).shape for role in self.roles}
        if not shapes:
            raise BatchContractError("embedding batch has no roles")
        if len(set(shapes.values())) != 1 or len(next(iter(shapes.values()))) != 2:
            raise ShapeError(f"all roles need the same (B, d) shape, got {shapes}")

    @property
    def roles(self) -> Tuple[str, ...]:
        return tuple(role for role in ROLES if getattr(self, role) is not None)

    @property
    def size(self) -> int:
        return getattr(self, self.roles[0]).shape[0]

    def require(self, roles: Sequence[str], objective: str) -> None:
        missing = [role for role in roles if getattr(self, role) is None]
        if missing:
            raise BatchContractError(f"{objective} needs roles {missing} missing from the batch")

    def negative_table(self, count: int) -> np.ndarray:
        """(B, count) in-batch negative indices, never pointing an anchor at itself."""
        size = self.size
        if size <= count:
            raise ConfigError(f"batch size {size} must exceed negatives_count {count}")
        if self.negatives is None:
            return (np.arange(size)[:, None] + np.arange(1, count + 1)[None, :]) % size
        table = np.asarray(self.negatives, dtype=np.int64)
        if table.shape != (size, count):
            raise ShapeError(f"negatives table has shape {table.shape}, expected {(size, count)}")
        if np.any(table == np.arange(size)[:, None]) or np.any(table < 0) or np.any(table >= size):
            raise ConfigError("negatives must point at other batch elements")
        return table


def sample_negatives(size: int, count: int, random_state: np.random.RandomState) -> np.ndarray:
    """For every anchor, `count` other batch elements drawn uniformly without replacement."""
    if size <= count:
        raise ConfigError(f"batch size {size} must exceed negatives_count {count}")
    table = np.empty((size, count), dtype=np.int64)
    for b in range(size):
        others = np.delete(np.arange(size), b)
        table[b] = random_state.choice(others, size=count, replace=False)
    return table


class BaseObjective:
    roles: ClassVar[Tuple[str, ...]] = ()
    name: ClassVar[str] = "objective"

    def __init__(self, cfg: ObjectiveConfig):
        self.cfg = cfg

    @property
    def sim(self) -> SimilarityFn:
        return self.cfg.similarity

    def __call__(self, batch: EmbeddingBatch) -> Tensor:
        batch.require(self.roles, self.name)
        return self.apply(batch)

    def apply(self, batch: EmbeddingBatch) -> Tensor:
        raise NotImplementedError


class TCN(BaseObjective):
    """Time contrast between images: z_j should beat z_k and other anchors' z_i for z_i."""

    roles = ("z_i", "z_j", "z_k")
    name = "tcn"

    def apply(self, batch):
        size = batch.size
        negatives = batch.negative_table(self.cfg.negatives_count)
        positive = self.sim(batch.z_i, batch.z_j)
        far = self.sim(batch.z_i, batch.z_k)
        pairwise = self.sim.matrix(batch.z_i, batch.z_i)
        in_batch = pairwise[np.arange(size)[:, None], negatives]
        logits = concat([positive.reshape(size, 1), far.reshape(size, 1), in_batch], axis=1)
        return (logsumexp(logits, axis=1) - positive).mean()


class TCNText(BaseObjective):
    """Goal-anchored time contrast: v should prefer the later image z_j over z_i."""

    roles = ("z_i", "z_j", "v")
    name = "tcn_text"

    def apply(self, batch):
        size = batch.size
        negatives = batch.negative_table(self.cfg.negatives_count)
        positive = self.sim(batch.z_j, batch.v)
        earlier = self.sim(batch.z_i, batch.v)
        # pairwise[m, n] = S(z_j of element m, v of element n)
        pairwise = self.sim.matrix(batch.z_j, batch.v)
        in_batch = pairwise[negatives, np.arange(size)[:, None]]
        logits = concat([positive.reshape(size, 1), earlier.reshape(size, 1), in_batch], axis=1)
        return (logsumexp(logits, axis=1) - positive).mean()


class VIP(BaseObjective):
    """Value-implicit objective with goal role `goal_role` (z_k for images, v for text).

    The exponent carries a constant +1 next to the one-step temporal difference.
    """

    roles = ("z_i", "z_j", "z_j1", "z_k")
    name = "vip"
    goal_role = "z_k"

    def apply(self, batch):
        gamma = self.cfg.gamma
        goal = getattr(batch, self.goal_role)
        initial = (-self.sim(batch.z_i, goal)).mean() * (1.0 - gamma)
        steps = self.sim(batch.z_j, goal) + 1.0 - self.sim(batch.z_j1, goal) * gamma
        return initial + logsumexp(steps, axis=0) - math.log(batch.size)


class VIPText(VIP):
    roles = ("z_i", "z_j", "z_j1", "v")
    name = "vip_text"
    goal_role = "v"


class InfoNCE(BaseObjective):
    """Goal-image InfoNCE whose denominator averages over the other batch elements only."""

    roles = ("z_k", "v")
    name = "infonce"

    def apply(self, batch):
        size = batch.size
        if size < 2:
            raise ConfigError("InfoNCE needs a batch of at least 2")
        # pairwise[m, n] = S(z_k of element m, v of element n)
        pairwise = self.sim.matrix(batch.z_k, batch.v)
        anchors = np.arange(size)
        positive = pairwise[anchors, anchors]
        others = np.array([np.delete(anchors, b) for b in anchors])
        denominator = logsumexp(pairwise[others, anchors[:, None]], axis=1) - math.log(size)
        return (denominator - positive).mean()


class Triplet(BaseObjective):
    """Hinge ranking with the goal as anchor, z_j as positive and the earlier z_i as negative."""

    roles = ("z_i", "z_j", "v")
    name = "triplet"

    def apply(self, batch):
        hinge = (self.sim(batch.v, batch.z_i) - self.sim(batch.v, batch.z_j) + self.cfg.margin).relu()
        return hinge.mean() if self.cfg.triplet_reduction == "mean" else hinge.sum()


class SumOf(BaseObjective):
    """Sum of component objectives, evaluated in order.

    Args:
        objectives: components to add.
        name (str): tag reported in errors.
    """

    def __init__(self, objectives: Sequence[BaseObjective], name: str):
        if not objectives:
            raise ConfigError("SumOf needs at least one objective")
        super().__init__(objectives[0].cfg)
        self.objectives = list(objectives)
        self.name = name
        self.roles = tuple(role for role in ROLES if any(role in o.roles for o in self.objectives))

    def __len__(self) -> int:
        return len(self.objectives)

    def apply(self, batch):
        total = self.objectives[0](batch)
        for objective in self.objectives[1:]:
            total = total + objective(batch)
        return total


def build_objective(cfg: ObjectiveConfig) -> BaseObjective:
    builders: Dict[str, Callable[[], BaseObjective]] = {
        "triplet": lambda: Triplet(cfg),
        "tcn_text": lambda: TCNText(cfg),
        "r3m": lambda: SumOf([TCN(cfg), TCNText(cfg)], "r3m"),
        "vip_text": lambda: VIPText(cfg),
        "vip_text_plus_vip": lambda: SumOf([VIPText(cfg), VIP(cfg)], "vip_text_plus_vip"),
        "liv": lambda: SumOf([VIP(cfg), VIPText(cfg), InfoNCE(cfg)], "liv"),
    }
    return builders[cfg.objective]()


def loss_tcn(batch: EmbeddingBatch, cfg: ObjectiveConfig) -> Tensor:
    return TCN(cfg)(batch)


def loss_tcn_text(batch: EmbeddingBatch, cfg: ObjectiveConfig) -> Tensor:
    return TCNText(cfg)(batch)


def loss_vip(batch: EmbeddingBatch, cfg: ObjectiveConfig) -> Tensor:
    return VIP(cfg)(batch)


def loss_vip_text(batch: EmbeddingBatch, cfg: ObjectiveConfig) -> Tensor:
    return VIPText(cfg)(batch)


def loss_infonce(batch: EmbeddingBatch, cfg: ObjectiveConfig) -> Tensor:
    return InfoNCE(cfg)(batch)


def loss_r3m(batch: EmbeddingBatch, cfg: ObjectiveConfig) -> Tensor:
    return SumOf([TCN(cfg), TCNText(cfg)], "r3m")(batch)


def loss_liv(batch: EmbeddingBatch, cfg: ObjectiveConfig) -> Tensor:
    return SumOf([VIP(cfg), VIPText(cfg), InfoNCE(cfg)], "liv")(batch)


def loss_triplet(batch: EmbeddingBatch, cfg: ObjectiveConfig) -> Tensor:
    return Triplet(cfg)(batch)
