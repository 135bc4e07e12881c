"""Finetuning datasets drawn from rollout archives.

A dataset stores, per sample, the source rollout plus one (N, D) array of timesteps and one of
view indices for every index key ("i", "j", "j1", "k"). D is the number of independent tuple
draws averaged for one sample. Timesteps are fixed for the dataset's lifetime, views are
reassigned per epoch.
"""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from . import random_utils
from .archive_io import read_container, write_container
from .exceptions import ConfigError, DataError, UsageError, VersionError
from .objectives import OBJECTIVE_TAGS
from .synthworld import RolloutArchive

logger = logging.getLogger(__name__)

MANIFEST_FORMAT = "vlreward.dataset"
MANIFEST_VERSION = 1

# embedding role -> index key of the dataset
ROLE_KEYS = {"z_i": "i", "z_j": "j", "z_j1": "j1", "z_k": "k"}


class BaseSampler:
    keys: Tuple[str, ...] = ()
    min_length: int = 2

    def __call__(self, length: int, count: int, draws: int, random_state: np.random.RandomState) -> Dict[str, np.ndarray]:
        if length < self.min_length:
            raise DataError(f"{type(self).__name__} needs trajectories of length >= {self.min_length}, got {length}")
        return self.get_selection(length, (count, draws), random_state)

    def get_selection(self, length: int, size: Tuple[int, int], random_state) -> Dict[str, np.ndarray]:
        raise NotImplementedError


class PairSampler(BaseSampler):
    """Ordered pair i < j."""

    keys = ("i", "j")
    min_length = 2

    def get_selection(self, length, size, random_state):
        i = random_utils.randint(0, length - 1, size, random_state)
        j = random_utils.randint(i + 1, length, size, random_state)
        return {"i": i, "j": j}


class TCNSampler(BaseSampler):
    """Strictly ordered i < j < k: i uniform, then j uniform after i, then k uniform after j."""

    keys = ("i", "j", "k")
    min_length = 3

    def get_selection(self, length, size, random_state):
        i = random_utils.randint(0, length - 2, size, random_state)
        j = random_utils.randint(i + 1, length - 1, size, random_state)
        k = random_utils.randint(j + 1, length, size, random_state)
        return {"i": i, "j": j, "k": k}


class VIPSampler(BaseSampler):
    """i < j, the successor j1 = j + 1, and a goal frame k >= j + 1."""

    keys = ("i", "j", "j1", "k")
    min_length = 3

    def get_selection(self, length, size, random_state):
        i = random_utils.randint(0, length - 2, size, random_state)
        j = random_utils.randint(i + 1, length - 1, size, random_state)
        k = random_utils.randint(j + 1, length, size, random_state)
        return {"i": i, "j": j, "j1": j + 1, "k": k}


SAMPLERS = {
    "triplet": PairSampler,
    "tcn_text": PairSampler,
    "r3m": TCNSampler,
    "vip_text": VIPSampler,
    "vip_text_plus_vip": VIPSampler,
    "liv": VIPSampler,
}


def get_sampler(objective_tag: str) -> BaseSampler:
    if objective_tag not in SAMPLERS:
        raise UsageError(f"Unknown objective {objective_tag!r}, expected one of {OBJECTIVE_TAGS}")
    return SAMPLERS[objective_tag]()


@dataclass
class SampleTuple:
    rollout_id: int
    goal_id: int
    indices: Dict[str, Tuple[int, ...]]
    views: Dict[str, Tuple[int, ...]]


@dataclass(eq=False)
class FinetuneDataset:
    archive: RolloutArchive
    objective: str
    rollout_ids: np.ndarray
    indices: Dict[str, np.ndarray]
    views: Dict[str, np.ndarray]
    cap: int
    seed: int
    view_seed: Optional[int] = None
    positions: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.positions is None:
            self.positions = np.arange(len(self.rollout_ids))

    def __len__(self) -> int:
        return len(self.rollout_ids)

    def __getitem__(self, n: int) -> SampleTuple:
        rollout_id = int(self.rollout_ids[n])
        return SampleTuple(
            rollout_id=rollout_id,
            goal_id=self.archive.rollouts[rollout_id].goal_id,
            indices={key: tuple(int(x) for x in a[n]) for key, a in self.indices.items()},
            views={key: tuple(int(x) for x in a[n]) for key, a in self.views.items()},
        )

    @property
    def keys(self) -> Tuple[str, ...]:
        return tuple(self.indices)

    @property
    def draws(self) -> int:
        return next(iter(self.indices.values())).shape[1]

    @property
    def goal_ids(self) -> np.ndarray:
        return np.array([self.archive.rollouts[r].goal_id for r in self.rollout_ids], dtype=np.int64)

    def subset(self, positions: Sequence[int]) -> "FinetuneDataset":
        """Samples at `positions`; `self.positions` keeps their place in the full dataset."""
        positions = np.asarray(positions, dtype=np.int64)
        return replace(
            self,
            rollout_ids=self.rollout_ids[positions],
            indices={key: a[positions] for key, a in self.indices.items()},
            views={key: a[positions] for key, a in self.views.items()},
            positions=self.positions[positions],
        )

    def with_views(self, view: int) -> "FinetuneDataset":
        """Every role slot pinned to one view."""
        if not 0 <= view < self.archive.n_views:
            raise DataError(f"view {view} outside [0, {self.archive.n_views})")
        return replace(self, views={key: np.full_like(a, view) for key, a in self.views.items()}, view_seed=None)

    def observations(self, key: str, draw: int = 0) -> np.ndarray:
        """(N, obs_dim) observations for index key `key` of tuple draw `draw`."""
        return self.archive.gather(self.rollout_ids, self.indices[key][:, draw], self.views[key][:, draw])

    def per_trajectory_counts(self) -> Dict[int, int]:
        ids, counts = np.unique(self.rollout_ids, return_counts=True)
        return {int(r): int(c) for r, c in zip(ids, counts)}


def allocate(cap: int, n_trajectories: int) -> np.ndarray:
    """Split `cap` samples over trajectories; the first cap % n trajectories get one extra."""
    base, extra = divmod(cap, n_trajectories)
    return base + (np.arange(n_trajectories) < extra).astype(np.int64)


def build_dataset(
    archive: RolloutArchive,
    objective_tag: str,
    cap: int = 50000,
    seed: int = 0,
    draws: int = 1,
    rollout_ids: Optional[Sequence[int]] = None,
) -> FinetuneDataset:
    """Tuples spread evenly over the training expert rollouts (or `rollout_ids`).

    Views start at the canonical view 0.
    """
    if cap < 1:
        raise ConfigError(f"cap must be positive, got {cap}")
    if draws < 1:
        raise ConfigError(f"draws must be positive, got {draws}")
    sampler = get_sampler(objective_tag)
    if rollout_ids is None:
        rollout_ids = archive.select(policy="expert", split="train")

    usable = []
    for rollout_id in rollout_ids:
        length = archive.rollouts[rollout_id].length
        if length < sampler.min_length:
            logger.warning("Skipping rollout %d: length %d is too short for %s", rollout_id, length, objective_tag)
            continue
        usable.append(rollout_id)
    if not usable:
        raise DataError(f"no rollout is long enough for {objective_tag}; the dataset would be empty")

    counts = allocate(cap, len(usable))
    ids, parts = [], {key: [] for key in sampler.keys}
    for rollout_id, count in zip(usable, counts):
        if count == 0:
            continue
        rs = random_utils.derive_random_state(seed, "tuples", objective_tag, int(rollout_id))
        drawn = sampler(archive.rollouts[rollout_id].length, int(count), draws, rs)
        ids.append(np.full(count, rollout_id, dtype=np.int64))
        for key in sampler.keys:
            parts[key].append(drawn[key])

    indices = {key: np.concatenate(parts[key]) for key in sampler.keys}
    views = {key: np.zeros_like(a) for key, a in indices.items()}
    logger.debug("Built %s dataset: %d samples over %d rollouts", objective_tag, int(counts.sum()), len(usable))
    return FinetuneDataset(archive, objective_tag, np.concatenate(ids), indices, views, cap, seed)


def reassign_views(ds: FinetuneDataset, epoch_seed: int, batch_index: Optional[int] = None) -> FinetuneDataset:
    """Copy of `ds` whose role slots get independent uniform views; timesteps are untouched."""
    keys = ("views", epoch_seed) if batch_index is None else ("views", epoch_seed, "batch", batch_index)
    rs = random_utils.derive_random_state(ds.seed, *keys)
    n_views = ds.archive.n_views
    views = {key: random_utils.randint(0, n_views, a.shape, rs) for key, a in ds.indices.items()}
    return replace(ds, views=views, view_seed=epoch_seed)


def split(ds: FinetuneDataset, r_val: float = 0.1, seed: Optional[int] = None) -> Tuple[FinetuneDataset, FinetuneDataset]:
    """Trajectory-stratified (train, validation) partition with round(r_val * len) validation samples.

    Per-trajectory validation quotas use the largest-remainder rule.
    """
    if not 0 < r_val < 1:
        raise ConfigError(f"r_val must lie in (0, 1), got {r_val}")
    n_val = int(round(r_val * len(ds)))
    if n_val == 0 or n_val == len(ds):
        raise ConfigError(f"r_val={r_val} leaves an empty split for a dataset of {len(ds)} samples")

    rs = random_utils.derive_random_state(ds.seed if seed is None else seed, "split")
    trajectories, inverse, sizes = np.unique(ds.rollout_ids, return_inverse=True, return_counts=True)
    quotas = sizes * n_val / len(ds)
    take = np.floor(quotas).astype(np.int64)
    order = np.argsort(-(quotas - take), kind="stable")
    take[order[: n_val - take.sum()]] += 1

    val_positions = []
    for group, count in enumerate(take):
        members = np.flatnonzero(inverse == group)
        val_positions.append(random_utils.permutation(members, rs)[:count])
    is_val = np.zeros(len(ds), dtype=bool)
    is_val[np.concatenate(val_positions)] = True
    return ds.subset(np.flatnonzero(~is_val)), ds.subset(np.flatnonzero(is_val))


def batches_per_epoch(ds: FinetuneDataset, B: int) -> int:
    if B < 1 or B > len(ds):
        raise ConfigError(f"batch size {B} must lie in [1, {len(ds)}]")
    return len(ds) // B


def batch_iter(ds: FinetuneDataset, B: int, epoch_seed: int, per_batch_views: bool = False) -> Iterator[FinetuneDataset]:
    """Shuffled full batches for one epoch; the final partial batch is dropped."""
    n_batches = batches_per_epoch(ds, B)
    epoch = ds if per_batch_views else reassign_views(ds, epoch_seed)
    order = random_utils.permutation(len(ds), random_utils.derive_random_state(ds.seed, "shuffle", epoch_seed))
    for b in range(n_batches):
        batch = epoch.subset(order[b * B : (b + 1) * B])
        yield reassign_views(batch, epoch_seed, b) if per_batch_views else batch


def save_manifest(path: Union[str, Path], ds: FinetuneDataset) -> Path:
    header = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "objective": ds.objective,
        "cap": ds.cap,
        "seed": ds.seed,
        "view_seed": ds.view_seed,
        "keys": list(ds.keys),
        "suite_seed": ds.archive.suite_seed,
        "n_rollouts": len(ds.archive.rollouts),
    }
    arrays = {"rollout_ids": ds.rollout_ids, "positions": ds.positions}
    arrays.update({f"indices.{k}": a for k, a in ds.indices.items()})
    arrays.update({f"views.{k}": a for k, a in ds.views.items()})
    return write_container(path, header, arrays)


def load_manifest(path: Union[str, Path], archive: RolloutArchive) -> FinetuneDataset:
    """Rebuild a dataset from its manifest against the archive it was drawn from."""
    header, arrays = read_container(path, MANIFEST_FORMAT, (MANIFEST_VERSION,))
    if header["suite_seed"] != archive.suite_seed or header["n_rollouts"] != len(archive.rollouts):
        raise VersionError(f"{path} was drawn from a different rollout archive")
    return FinetuneDataset(
        archive=archive,
        objective=header["objective"],
        rollout_ids=arrays["rollout_ids"],
        indices={k: arrays[f"indices.{k}"] for k in header["keys"]},
        views={k: arrays[f"views.{k}"] for k in header["keys"]},
        cap=header["cap"],
        seed=header["seed"],
        view_seed=header["view_seed"],
        positions=arrays["positions"],
    )
