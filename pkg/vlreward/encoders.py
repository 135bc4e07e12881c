import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import ClassVar, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import random_utils
from .archive_io import read_container, write_container
from .exceptions import ConfigError, ShapeError, UnknownGoalError, VersionError
from .numcore import Tensor, l2_normalize, norm

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "vlreward.checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class SimilarityFn:
    """Similarity between embeddings.

    Args:
        kind (str): "cosine" compares L2-normalized embeddings, "neg_l2" is the negated
            Euclidean distance. Defaults to "cosine".
    """

    kind: str = "cosine"
    KINDS: ClassVar[Tuple[str, ...]] = ("cosine", "neg_l2")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"Unknown similarity {self.kind!r}, expected one of {self.KINDS}")

    def __call__(self, a: Tensor, b: Tensor) -> Tensor:
        """Row-wise similarity of two (d,) or (N, d) tensors."""
        if a.shape != b.shape:
            raise ShapeError(f"similarity needs equal shapes, got {a.shape} and {b.shape}")
        if self.kind == "cosine":
            return (l2_normalize(a) * l2_normalize(b)).sum(axis=-1)
        return -norm(a - b, axis=-1)

    def matrix(self, a: Tensor, b: Tensor) -> Tensor:
        """All-pairs similarity: entry (m, n) compares row m of `a` with row n of `b`."""
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
            raise ShapeError(f"similarity matrix needs (N, d) inputs, got {a.shape} and {b.shape}")
        if self.kind == "cosine":
            return l2_normalize(a) @ l2_normalize(b).T
        diff = a.reshape(a.shape[0], 1, a.shape[1]) - b.reshape(1, b.shape[0], b.shape[1])
        return -norm(diff, axis=-1)


def similarity(s: SimilarityFn, a: Tensor, b: Tensor) -> Tensor:
    return s(a, b)


class LoraAdapter:
    """Low-rank update of a linear layer: adds (alpha / rank) * B @ A @ x to its output.

    B starts at zero so an adapted layer initially computes exactly what the base layer does.

    Args:
        in_features (int): input width of the adapted layer.
        out_features (int): output width of the adapted layer.
        rank (int): rank of the update. Defaults to 16.
        alpha (float): scaling numerator. Defaults to 32.
    """

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rank: int = 16,
        alpha: float = 32.0,
        random_state: Optional[np.random.RandomState] = None,
    ):
        if rank < 1:
            raise ConfigError(f"LoRA rank must be positive, got {rank}")
        self.rank = rank
        self.alpha = float(alpha)
        bound = 1.0 / np.sqrt(in_features)
        self.A = Tensor(random_utils.uniform(-bound, bound, (rank, in_features), random_state), requires_grad=True)
        self.B = Tensor(np.zeros((out_features, rank)), requires_grad=True)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def __call__(self, x: Tensor) -> Tensor:
        return ((x @ self.A.T) @ self.B.T) * self.scaling

    def delta_weight(self) -> np.ndarray:
        return self.scaling * (self.B.data @ self.A.data)


class Linear:
    def __init__(self, in_features: int, out_features: int, random_state: Optional[np.random.RandomState] = None):
        self.in_features = in_features
        self.out_features = out_features
        std = np.sqrt(2.0 / in_features)
        self.weight = Tensor(random_utils.normal(0.0, std, (out_features, in_features), random_state), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)
        self.adapter: Optional[LoraAdapter] = None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight.T + self.bias
        if self.adapter is not None:
            y = y + self.adapter(x)
        return y

    def add_adapter(self, rank: int, alpha: float, random_state: Optional[np.random.RandomState] = None) -> None:
        self.adapter = LoraAdapter(self.in_features, self.out_features, rank, alpha, random_state)

    def freeze(self) -> None:
        self.weight.requires_grad = False
        self.bias.requires_grad = False

    def named_tensors(self, prefix: str) -> Dict[str, Tensor]:
        tensors = {f"{prefix}weight": self.weight, f"{prefix}bias": self.bias}
        if self.adapter is not None:
            tensors[f"{prefix}lora_A"] = self.adapter.A
            tensors[f"{prefix}lora_B"] = self.adapter.B
        return tensors


class _Tower:
    layers: List[Linear]

    @property
    def has_adapters(self) -> bool:
        return any(layer.adapter is not None for layer in self.layers)

    def add_lora(self, rank: int = 16, alpha: float = 32.0, random_state: Optional[np.random.RandomState] = None):
        for layer in self.layers:
            layer.add_adapter(rank, alpha, random_state)
        return self

    def freeze_base(self):
        for layer in self.layers:
            layer.freeze()
        return self

    def named_tensors(self, prefix: str = "") -> Dict[str, Tensor]:
        tensors = {}
        for n, layer in enumerate(self.layers):
            tensors.update(layer.named_tensors(f"{prefix}layers.{n}."))
        return tensors

    def parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        """Trainable tensors by name."""
        return {name: t for name, t in self.named_tensors(prefix).items() if t.requires_grad}

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors().items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        tensors = self.named_tensors()
        missing = sorted(set(tensors) - set(state))
        unexpected = sorted(set(state) - set(tensors))
        if missing or unexpected:
            raise VersionError(f"state mismatch, missing: {missing}, unexpected: {unexpected}")
        for name, t in tensors.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != t.shape:
                raise ShapeError(f"{name}: stored shape {value.shape} does not match {t.shape}")
            t.data = value.copy()


class ImageEncoder(_Tower):
    """MLP from an observation vector to an embedding, ReLU between layers.

    Args:
        obs_dim (int): observation width.
        hidden (Sequence[int]): hidden layer widths. Defaults to (256, 256).
        embed_dim (int): embedding width d. Defaults to 64.
    """

    def __init__(
        self,
        obs_dim: int,
        hidden: Sequence[int] = (256, 256),
        embed_dim: int = 64,
        random_state: Optional[np.random.RandomState] = None,
    ):
        widths = (obs_dim, *hidden, embed_dim)
        self.layers = [Linear(widths[n], widths[n + 1], random_state) for n in range(len(widths) - 1)]

    @property
    def widths(self) -> Tuple[int, ...]:
        return (self.layers[0].in_features,) + tuple(layer.out_features for layer in self.layers)

    @property
    def obs_dim(self) -> int:
        return self.layers[0].in_features

    @property
    def embed_dim(self) -> int:
        return self.layers[-1].out_features

    def __call__(self, obs: Union[Tensor, np.ndarray]) -> Tensor:
        x = Tensor.lift(obs)
        if x.ndim not in (1, 2) or x.shape[-1] != self.obs_dim:
            raise ShapeError(f"observation shape {x.shape} does not match encoder input width {self.obs_dim}")
        for layer in self.layers[:-1]:
            x = layer(x).relu()
        return self.layers[-1](x)


class TextEncoder(_Tower):
    """Goal-id lookup table followed by a linear projection into the shared space.

    Args:
        goal_ids (Sequence[int]): one id per table row.
        table (np.ndarray): (len(goal_ids), table_dim) initial rows.
        embed_dim (int): output width d.
        train_table (bool): also train the table rows. Defaults to False.
    """

    def __init__(
        self,
        goal_ids: Sequence[int],
        table: np.ndarray,
        embed_dim: int = 64,
        random_state: Optional[np.random.RandomState] = None,
        train_table: bool = False,
    ):
        goal_ids = tuple(int(g) for g in goal_ids)
        if len(set(goal_ids)) != len(goal_ids):
            raise ConfigError("goal ids must be unique")
        table = np.asarray(table, dtype=np.float64)
        if table.ndim != 2 or table.shape[0] != len(goal_ids):
            raise ShapeError(f"table shape {table.shape} does not hold one row per goal id ({len(goal_ids)})")
        self.goal_ids = goal_ids
        self._rows = {g: n for n, g in enumerate(goal_ids)}
        self.table = Tensor(table, requires_grad=train_table)
        self.projection = Linear(table.shape[1], embed_dim, random_state)
        self.layers = [self.projection]

    @classmethod
    def from_families(
        cls,
        goal_families: Mapping[int, str],
        table_dim: int = 32,
        embed_dim: int = 64,
        jitter: float = 0.25,
        random_state: Optional[np.random.RandomState] = None,
        train_table: bool = False,
    ) -> "TextEncoder":
        """Table whose rows are a per-family prototype plus per-goal jitter.

        Goals of one family sit close together, the way instructions naming the same kind of
        task do in a pretrained language table.
        """
        if random_state is None:
            random_state = random_utils.get_random_state()
        families = sorted(set(goal_families.values()))
        prototypes = {f: random_utils.normal(0.0, 1.0, table_dim, random_state) for f in families}
        goal_ids = sorted(goal_families)
        table = np.stack(
            [prototypes[goal_families[g]] + random_utils.normal(0.0, jitter, table_dim, random_state) for g in goal_ids]
        )
        return cls(goal_ids, table, embed_dim, random_state, train_table)

    @property
    def embed_dim(self) -> int:
        return self.projection.out_features

    @property
    def table_dim(self) -> int:
        return self.table.shape[1]

    def rows(self, goal_ids) -> np.ndarray:
        ids = np.atleast_1d(np.asarray(goal_ids)).astype(np.int64)
        try:
            return np.array([self._rows[int(g)] for g in ids], dtype=np.int64)
        except KeyError as err:
            raise UnknownGoalError(f"goal id {err.args[0]} has no table row") from err

    def __call__(self, goal_ids) -> Tensor:
        rows = self.rows(goal_ids)
        embedded = self.projection(self.table[rows])
        return embedded[0] if np.isscalar(goal_ids) or np.ndim(goal_ids) == 0 else embedded

    def named_tensors(self, prefix: str = "") -> Dict[str, Tensor]:
        tensors = {f"{prefix}table": self.table}
        tensors.update(super().named_tensors(prefix))
        return tensors


def encode_image(enc: ImageEncoder, obs: Union[Tensor, np.ndarray]) -> Tensor:
    return enc(obs)


def encode_text(enc: TextEncoder, goal_id) -> Tensor:
    return enc(goal_id)


def merge_lora(enc: _Tower) -> _Tower:
    """Copy of `enc` with every adapter folded into its base weight and removed."""
    if not enc.has_adapters:
        logger.warning("merge_lora called on an encoder without adapters; nothing to merge")
        return enc
    merged = copy.deepcopy(enc)
    for layer in merged.layers:
        if layer.adapter is None:
            continue
        layer.weight.data = layer.weight.data + layer.adapter.delta_weight()
        layer.adapter = None
    return merged


@dataclass
class EncoderConfig:
    obs_dim: int = 32
    hidden: Tuple[int, ...] = (256, 256)
    embed_dim: int = 64
    table_dim: int = 32
    table_jitter: float = 0.25
    use_lora: bool = True
    lora_rank: int = 16
    lora_alpha: float = 32.0
    # towers that receive LoRA adapters
    lora_targets: Tuple[str, ...] = ("image", "text")
    freeze_base: bool = False
    train_goal_table: bool = False
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.lora_targets = tuple(self.lora_targets)
        if self.obs_dim < 1 or self.embed_dim < 1 or self.table_dim < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError("encoder widths must be positive")
        unknown = set(self.lora_targets) - {"image", "text"}
        if unknown:
            raise ConfigError(f"unknown LoRA targets {sorted(unknown)}")
        if self.use_lora and self.lora_rank < 1:
            raise ConfigError(f"LoRA rank must be positive, got {self.lora_rank}")
        if self.freeze_base and not self.use_lora:
            raise ConfigError("freeze_base without LoRA leaves nothing to train")


def build_encoders(cfg: EncoderConfig, goal_families: Mapping[int, str]) -> Tuple[ImageEncoder, TextEncoder]:
    image = ImageEncoder(
        cfg.obs_dim, cfg.hidden, cfg.embed_dim, random_utils.derive_random_state(cfg.seed, "image")
    )
    text = TextEncoder.from_families(
        goal_families,
        cfg.table_dim,
        cfg.embed_dim,
        cfg.table_jitter,
        random_utils.derive_random_state(cfg.seed, "text"),
        cfg.train_goal_table,
    )
    for name, tower in (("image", image), ("text", text)):
        if cfg.freeze_base:
            tower.freeze_base()
        if cfg.use_lora and name in cfg.lora_targets:
            tower.add_lora(cfg.lora_rank, cfg.lora_alpha, random_utils.derive_random_state(cfg.seed, name, "lora"))
    return image, text


def _tower_header(tower: _Tower) -> dict:
    return {
        "adapters": [
            None if layer.adapter is None else {"rank": layer.adapter.rank, "alpha": layer.adapter.alpha}
            for layer in tower.layers
        ],
        "trainable": sorted(tower.parameters()),
    }


def save_checkpoint(
    path: Union[str, Path],
    image_encoder: ImageEncoder,
    text_encoder: TextEncoder,
    similarity_fn: SimilarityFn,
    metadata: Optional[dict] = None,
) -> Path:
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "similarity": similarity_fn.kind,
        "image": dict(widths=list(image_encoder.widths), **_tower_header(image_encoder)),
        "text": dict(
            goal_ids=list(text_encoder.goal_ids),
            table_dim=text_encoder.table_dim,
            embed_dim=text_encoder.embed_dim,
            **_tower_header(text_encoder),
        ),
        "metadata": metadata or {},
    }
    arrays = {f"image.{k}": v for k, v in image_encoder.state_dict().items()}
    arrays.update({f"text.{k}": v for k, v in text_encoder.state_dict().items()})
    return write_container(path, header, arrays)


def _restore_tower(tower: _Tower, layout: dict, state: Dict[str, np.ndarray]) -> None:
    for layer, adapter in zip(tower.layers, layout["adapters"]):
        if adapter is not None:
            layer.add_adapter(adapter["rank"], adapter["alpha"])
    tower.load_state_dict(state)
    trainable = set(layout["trainable"])
    for name, t in tower.named_tensors().items():
        t.requires_grad = name in trainable


def load_checkpoint(path: Union[str, Path]) -> Tuple[ImageEncoder, TextEncoder, SimilarityFn, dict]:
    header, arrays = read_container(path, CHECKPOINT_FORMAT, (CHECKPOINT_VERSION,))
    widths = header["image"]["widths"]
    image = ImageEncoder(widths[0], widths[1:-1], widths[-1], np.random.RandomState(0))
    _restore_tower(image, header["image"], {k[len("image."):]: v for k, v in arrays.items() if k.startswith("image.")})

    text_layout = header["text"]
    text_state = {k[len("text."):]: v for k, v in arrays.items() if k.startswith("text.")}
    text = TextEncoder(text_layout["goal_ids"], text_state["table"], text_layout["embed_dim"], np.random.RandomState(0))
    _restore_tower(text, text_layout, text_state)
    return image, text, SimilarityFn(header["similarity"]), header
