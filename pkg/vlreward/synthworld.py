"""Desk-scale manipulation world with ground-truth reward and multi-view observations.

Latent state layout (latent_dim >= 8):
    [0:2] effector position   [2:4] object (handle) position   [4:6] goal position
    [6]   attached flag        [7:]  nuisance coordinates
All positions live in the box [-1, 1]^2. One-stage tasks reward reaching the goal with the
effector; two-stage tasks reward reaching the object, then carrying it to the goal.
"""
import logging
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from . import random_utils
from .archive_io import read_container, write_container
from .exceptions import ConfigError, DataError, ShapeError
from .numcore import Tensor

logger = logging.getLogger(__name__)

ARCHIVE_FORMAT = "vlreward.archive"
ARCHIVE_VERSION = 1

EFFECTOR = slice(0, 2)
OBJECT = slice(2, 4)
GOAL = slice(4, 6)
ATTACHED = 6
NUISANCE = slice(7, None)
MIN_LATENT_DIM = 8

POLICIES = ("expert", "suboptimal", "random")
MIN_ROLLOUT_LENGTH = 4
# distance range of the starting effector from the first stage target
START_RADIUS = (0.3, 0.5)

# family -> (stage count, unit pull direction of the goal relative to the handle)
FAMILIES: Dict[str, Tuple[int, Optional[Tuple[float, float]]]] = {
    "press": (1, None),
    "drawer": (2, (1.0, 0.0)),
    "door": (2, (0.70710678, 0.70710678)),
    "reach": (1, None),
    "slide": (2, (0.0, -1.0)),
}
HELDOUT_FAMILIES = ("press", "drawer", "door")
TRAIN_FAMILIES = ("reach", "drawer", "door", "slide", "press")
HELDOUT_SEPARATION = 0.1


@dataclass
class TaskSpec:
    task_id: int
    goal_id: int
    family: str
    stage_count: int
    latent_dim: int
    goal: Tuple[float, float]
    object_start: Tuple[float, float]
    success_tol: float = 0.05
    reach_scale: float = 2.0 * np.sqrt(2.0)
    held_out: bool = False

    def __post_init__(self):
        self.goal = tuple(float(x) for x in self.goal)
        self.object_start = tuple(float(x) for x in self.object_start)
        if self.stage_count not in (1, 2):
            raise ConfigError(f"stage_count must be 1 or 2, got {self.stage_count}")
        if self.latent_dim < MIN_LATENT_DIM:
            raise ConfigError(f"latent_dim must be at least {MIN_LATENT_DIM}, got {self.latent_dim}")
        if not 0 < self.success_tol < self.reach_scale:
            raise ConfigError("need 0 < success_tol < reach_scale")

    @property
    def name(self) -> str:
        return f"{self.family}-{self.task_id}"

    def progress(self, distance: np.ndarray) -> np.ndarray:
        """1 within the success tolerance, falling linearly to 0 at `reach_scale`."""
        span = self.reach_scale - self.success_tol
        return np.clip(1.0 - (distance - self.success_tol) / span, 0.0, 1.0)

    def to_dict(self) -> dict:
        return asdict(self)


def ground_truth_reward(task: TaskSpec, state) -> Union[float, np.ndarray]:
    """Shaped reward in [0, 1]; equals 1 only at task success.

    Accepts one state (latent_dim,) or a stack (T, latent_dim).
    """
    s = np.asarray(state.data if isinstance(state, Tensor) else state, dtype=np.float64)
    if s.shape[-1] != task.latent_dim:
        raise ShapeError(f"state width {s.shape[-1]} does not match task latent dim {task.latent_dim}")
    effector, obj, goal = s[..., EFFECTOR], s[..., OBJECT], s[..., GOAL]
    if task.stage_count == 1:
        reward = task.progress(np.linalg.norm(effector - goal, axis=-1))
    else:
        reach = 0.5 * task.progress(np.linalg.norm(effector - obj, axis=-1))
        carry = 0.5 + 0.5 * task.progress(np.linalg.norm(obj - goal, axis=-1))
        reward = np.where(s[..., ATTACHED] >= 0.5, carry, reach)
    return float(reward) if np.ndim(reward) == 0 else reward


def make_task_suite(
    seed: int,
    n_train_tasks: int = 12,
    n_heldout_tasks: int = 3,
    latent_dim: int = 8,
    separation: float = HELDOUT_SEPARATION,
) -> List[TaskSpec]:
    """Training tasks followed by held-out tasks, deterministic in `seed`.

    Held-out tasks cycle through press (one stage), drawer and door (two stages), so any
    held-out set of two or more mixes both kinds. Held-out goals keep a distance of at least
    `separation` from every earlier goal; a goal that cannot be placed raises ConfigError.
    """
    if n_heldout_tasks < 1:
        raise ConfigError("need at least one held-out task")
    if n_train_tasks < 1:
        raise ConfigError("need at least one training task")
    rs = random_utils.derive_random_state(seed, "suite")
    families = [TRAIN_FAMILIES[n % len(TRAIN_FAMILIES)] for n in range(n_train_tasks)]
    families += [HELDOUT_FAMILIES[n % len(HELDOUT_FAMILIES)] for n in range(n_heldout_tasks)]

    tasks: List[TaskSpec] = []
    for task_id, family in enumerate(families):
        held_out = task_id >= n_train_tasks
        stage_count, direction = FAMILIES[family]
        for _ in range(1000):
            object_start = random_utils.uniform(-0.5, 0.5, 2, rs)
            if stage_count == 1:
                goal = random_utils.uniform(-0.45, 0.45, 2, rs)
            else:
                length = random_utils.uniform(0.4, 0.6, random_state=rs)
                goal = np.clip(object_start + length * np.asarray(direction), -0.9, 0.9)
            if not held_out or all(np.linalg.norm(goal - np.asarray(t.goal)) >= separation for t in tasks):
                break
        else:
            raise ConfigError(f"could not place held-out task {task_id} at least {separation} from the other goals")
        tasks.append(
            TaskSpec(
                task_id=task_id,
                goal_id=100 + task_id,
                family=family,
                stage_count=stage_count,
                latent_dim=latent_dim,
                goal=tuple(goal),
                object_start=tuple(object_start),
                held_out=held_out,
            )
        )
    return tasks


class BasePolicy:
    def __call__(self, task: TaskSpec, state: np.ndarray, t: int, random_state: np.random.RandomState) -> np.ndarray:
        raise NotImplementedError


def approach(offset: np.ndarray, steps: int, stop: float) -> np.ndarray:
    """Step that shrinks the distance `|offset|` linearly to `stop` over `steps - 1` steps.

    The final step (or any step once within `stop`) closes the remaining gap.
    """
    distance = np.linalg.norm(offset)
    if steps <= 1 or distance <= stop:
        return offset
    return offset * ((distance - stop) / (steps - 1) / distance)


class ExpertPolicy(BasePolicy):
    """Scripted controller that reaches task success exactly at the last timestep.

    Every step makes progress on the current stage, so ground-truth reward rises strictly along
    an expert rollout. Two-stage tasks grasp the handle at `grasp_fraction` of the horizon.

    Args:
        horizon (int): rollout length T.
        stop (float): distance kept to the stage target until the stage's last step. Must
            exceed the task success tolerance. Defaults to 0.1.
        grasp_fraction (float): share of the horizon spent reaching the handle. Defaults to 0.5.
    """

    def __init__(self, horizon: int = 64, stop: float = 0.1, grasp_fraction: float = 0.5):
        if horizon < MIN_ROLLOUT_LENGTH:
            raise ConfigError(f"rollouts need T >= {MIN_ROLLOUT_LENGTH}, got {horizon}")
        if not 0 < grasp_fraction < 1:
            raise ConfigError(f"grasp_fraction must lie in (0, 1), got {grasp_fraction}")
        self.horizon = horizon
        self.stop = stop
        self.grasp_step = min(max(1, int(round((horizon - 1) * grasp_fraction))), horizon - 2)

    def __call__(self, task, state, t, random_state):
        remaining = self.horizon - 1 - t
        effector, obj, goal = state[EFFECTOR], state[OBJECT], state[GOAL]
        if task.stage_count == 1:
            return approach(goal - effector, remaining, self.stop)
        if state[ATTACHED] < 0.5:
            return approach(obj - effector, self.grasp_step - t, self.stop)
        return approach(goal - obj, remaining, self.stop)


class SuboptimalPolicy(BasePolicy):
    """Expert with Gaussian action noise that stalls with probability `stall_prob`."""

    def __init__(self, expert: ExpertPolicy, action_noise: float = 0.05, stall_prob: float = 0.2):
        self.expert = expert
        self.action_noise = action_noise
        self.stall_prob = stall_prob

    def __call__(self, task, state, t, random_state):
        if random_utils.random(random_state=random_state) < self.stall_prob:
            return np.zeros(2)
        return self.expert(task, state, t, random_state) + random_utils.normal(0.0, self.action_noise, 2, random_state)


class RandomPolicy(BasePolicy):
    def __init__(self, max_step: float = 0.08):
        self.max_step = max_step

    def __call__(self, task, state, t, random_state):
        return random_utils.uniform(-self.max_step, self.max_step, 2, random_state)


def make_policy(tag: str, horizon: int = 64) -> BasePolicy:
    if tag == "expert":
        return ExpertPolicy(horizon)
    if tag == "suboptimal":
        return SuboptimalPolicy(ExpertPolicy(horizon))
    if tag == "random":
        return RandomPolicy()
    raise ConfigError(f"Unknown policy {tag!r}, expected one of {POLICIES}")


def initial_state(task: TaskSpec, random_state: np.random.RandomState) -> np.ndarray:
    """Handle near its nominal spot, effector at a uniform bearing around the first stage target.

    Starting positions surround the target evenly, so no fixed direction in the workspace
    tells near from far.
    """
    state = np.zeros(task.latent_dim)
    state[OBJECT] = np.asarray(task.object_start) + random_utils.uniform(-0.05, 0.05, 2, random_state)
    state[GOAL] = task.goal
    target = state[GOAL] if task.stage_count == 1 else state[OBJECT]
    angle = random_utils.uniform(0.0, 2.0 * np.pi, random_state=random_state)
    radius = random_utils.uniform(*START_RADIUS, random_state=random_state)
    state[EFFECTOR] = np.clip(target + radius * np.array([np.cos(angle), np.sin(angle)]), -1.0, 1.0)
    state[NUISANCE] = random_utils.uniform(-1.0, 1.0, task.latent_dim - 7, random_state)
    return state


def step(task: TaskSpec, state: np.ndarray, action: np.ndarray, random_state: np.random.RandomState) -> np.ndarray:
    new = state.copy()
    new[EFFECTOR] = np.clip(state[EFFECTOR] + action, -1.0, 1.0)
    if task.stage_count == 2:
        if state[ATTACHED] >= 0.5:
            new[OBJECT] = np.clip(state[OBJECT] + (new[EFFECTOR] - state[EFFECTOR]), -1.0, 1.0)
        elif np.linalg.norm(new[EFFECTOR] - state[OBJECT]) <= task.success_tol:
            new[ATTACHED] = 1.0
    drift = random_utils.normal(0.0, 0.05, task.latent_dim - 7, random_state)
    new[NUISANCE] = np.clip(state[NUISANCE] + drift, -1.0, 1.0)
    return new


@dataclass
class ViewRenderer:
    """Fixed noisy affine cameras: view v renders projections[v] @ state + biases[v] + noise.

    The contact flag is never rendered; a grasp shows only as the effector sitting on the handle.

    Args:
        projections (np.ndarray): (V, obs_dim, latent_dim) view matrices.
        biases (np.ndarray): (V, obs_dim) view offsets.
        noise (float): observation noise standard deviation.
        occluded_view (int, optional): view whose projection ignores the goal coordinates.
    """

    projections: np.ndarray
    biases: np.ndarray
    noise: float = 0.1
    occluded_view: Optional[int] = None

    @classmethod
    def from_seed(
        cls,
        seed: int,
        latent_dim: int = 8,
        obs_dim: int = 32,
        n_views: int = 3,
        noise: float = 0.1,
        occlusion_prob: float = 0.3,
    ) -> "ViewRenderer":
        if n_views < 1 or obs_dim < 1:
            raise ConfigError("need at least one view and a positive observation width")
        rs = random_utils.derive_random_state(seed, "renderer")
        projections = random_utils.normal(0.0, 1.0 / np.sqrt(latent_dim), (n_views, obs_dim, latent_dim), rs)
        projections[:, :, ATTACHED] = 0.0
        biases = random_utils.normal(0.0, 0.1, (n_views, obs_dim), rs)
        occluded_view = None
        if random_utils.random(random_state=rs) < occlusion_prob:
            occluded_view = n_views - 1
            projections[occluded_view][:, GOAL] = 0.0
        return cls(projections, biases, float(noise), occluded_view)

    @property
    def n_views(self) -> int:
        return self.projections.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.projections.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.projections.shape[2]

    def render(self, states: np.ndarray, random_state: np.random.RandomState) -> np.ndarray:
        """(T, V, obs_dim) observations of (T, latent_dim) states from every view."""
        states = np.atleast_2d(states)
        clean = np.einsum("vol,tl->tvo", self.projections, states) + self.biases[None]
        return clean + random_utils.normal(0.0, self.noise, clean.shape, random_state) if self.noise > 0 else clean


def render_view(r: ViewRenderer, state, view_index: int, seed: Union[int, np.random.RandomState] = 0) -> Tensor:
    if not 0 <= view_index < r.n_views:
        raise DataError(f"view index {view_index} outside [0, {r.n_views})")
    s = np.asarray(state.data if isinstance(state, Tensor) else state, dtype=np.float64)
    if s.shape != (r.latent_dim,):
        raise ShapeError(f"state shape {s.shape} does not match renderer latent dim {r.latent_dim}")
    rs = seed if isinstance(seed, np.random.RandomState) else random_utils.derive_random_state(seed, "view", view_index)
    obs = r.projections[view_index] @ s + r.biases[view_index]
    if r.noise > 0:
        obs = obs + random_utils.normal(0.0, r.noise, obs.shape, rs)
    return Tensor(obs)


@dataclass
class Rollout:
    task_id: int
    goal_id: int
    policy: str
    states: np.ndarray
    rewards: np.ndarray
    observations: np.ndarray
    seed: int = 0
    split: str = "train"

    def __post_init__(self):
        if not len(self.states) == len(self.rewards) == len(self.observations):
            raise ShapeError("states, rewards and observations need one entry per timestep")

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def n_views(self) -> int:
        return self.observations.shape[1]


def gen_rollout(
    task: TaskSpec,
    policy: str,
    T: int = 64,
    seed: int = 0,
    renderer: Optional[ViewRenderer] = None,
    split: str = "train",
) -> Rollout:
    """Roll `policy` out for T timesteps from a randomized initial state.

    Without a `renderer` the default three-view renderer of suite seed 0 is used.
    """
    if T < MIN_ROLLOUT_LENGTH:
        raise ConfigError(f"rollouts need T >= {MIN_ROLLOUT_LENGTH}, got {T}")
    controller = make_policy(policy, T)
    if renderer is None:
        renderer = ViewRenderer.from_seed(0, task.latent_dim)
    rs = random_utils.derive_random_state(seed, "rollout", task.task_id, policy)

    states = np.empty((T, task.latent_dim))
    states[0] = initial_state(task, rs)
    for t in range(1, T):
        states[t] = step(task, states[t - 1], controller(task, states[t - 1], t - 1, rs), rs)
    observations = renderer.render(states, random_utils.derive_random_state(seed, "render", task.task_id, policy))
    return Rollout(
        task_id=task.task_id,
        goal_id=task.goal_id,
        policy=policy,
        states=states,
        rewards=ground_truth_reward(task, states),
        observations=observations,
        seed=int(seed),
        split=split,
    )


@dataclass
class SuiteConfig:
    seed: int = 0
    n_train_tasks: int = 12
    n_heldout_tasks: int = 3
    latent_dim: int = 8
    obs_dim: int = 32
    n_views: int = 3
    noise: float = 0.1
    occlusion_prob: float = 0.3
    horizon: int = 64


@dataclass
class RolloutConfig:
    train_experts_per_task: int = 3
    eval_experts_per_task: int = 50
    suboptimal_per_task: int = 20
    random_per_task: int = 20


@dataclass
class RolloutArchive:
    suite_seed: int
    tasks: List[TaskSpec]
    renderer: ViewRenderer
    rollouts: List[Rollout] = field(default_factory=list)

    @property
    def n_views(self) -> int:
        return self.renderer.n_views

    @property
    def obs_dim(self) -> int:
        return self.renderer.obs_dim

    def task(self, task_id: int) -> TaskSpec:
        for task in self.tasks:
            if task.task_id == task_id:
                return task
        raise DataError(f"no task with id {task_id}")

    @property
    def heldout_tasks(self) -> List[TaskSpec]:
        return [t for t in self.tasks if t.held_out]

    def goal_families(self) -> Dict[int, str]:
        return {t.goal_id: t.family for t in self.tasks}

    def select(
        self,
        task_id: Optional[int] = None,
        policy: Optional[str] = None,
        split: Optional[str] = None,
        held_out: Optional[bool] = None,
    ) -> List[int]:
        held = {t.task_id: t.held_out for t in self.tasks}
        return [
            n
            for n, r in enumerate(self.rollouts)
            if (task_id is None or r.task_id == task_id)
            and (policy is None or r.policy == policy)
            and (split is None or r.split == split)
            and (held_out is None or held[r.task_id] == held_out)
        ]

    @cached_property
    def _flat(self) -> Tuple[np.ndarray, np.ndarray]:
        offsets = np.concatenate([[0], np.cumsum([r.length for r in self.rollouts])])
        observations = np.concatenate([r.observations for r in self.rollouts], axis=0)
        return offsets, observations

    def gather(self, rollout_ids: np.ndarray, timesteps: np.ndarray, views: np.ndarray) -> np.ndarray:
        """Observations for aligned arrays of rollout ids, timesteps and view indices."""
        offsets, observations = self._flat
        rows = offsets[np.asarray(rollout_ids)] + np.asarray(timesteps)
        return observations[rows, np.asarray(views)]


def generate_archive(suite_cfg: SuiteConfig, rollout_cfg: RolloutConfig, progress: bool = False) -> RolloutArchive:
    """Standard collection: training experts, then held-out experts, suboptimal and random rollouts."""
    tasks = make_task_suite(suite_cfg.seed, suite_cfg.n_train_tasks, suite_cfg.n_heldout_tasks, suite_cfg.latent_dim)
    renderer = ViewRenderer.from_seed(
        suite_cfg.seed,
        suite_cfg.latent_dim,
        suite_cfg.obs_dim,
        suite_cfg.n_views,
        suite_cfg.noise,
        suite_cfg.occlusion_prob,
    )
    if renderer.occluded_view is not None:
        logger.info("View %d does not see the goal in this suite", renderer.occluded_view + 1)

    plan = []
    for task in tasks:
        if task.held_out:
            plan += [(task, "expert", n, "eval") for n in range(rollout_cfg.eval_experts_per_task)]
            plan += [(task, "suboptimal", n, "eval") for n in range(rollout_cfg.suboptimal_per_task)]
            plan += [(task, "random", n, "eval") for n in range(rollout_cfg.random_per_task)]
        else:
            plan += [(task, "expert", n, "train") for n in range(rollout_cfg.train_experts_per_task)]

    rollouts = []
    for task, policy, n, split in tqdm(plan, desc="rollouts", disable=not progress):
        seed = int(np.random.SeedSequence([suite_cfg.seed, task.task_id, POLICIES.index(policy), n]).generate_state(1)[0])
        rollouts.append(gen_rollout(task, policy, suite_cfg.horizon, seed, renderer, split))
    return RolloutArchive(suite_cfg.seed, tasks, renderer, rollouts)


def save_archive(path: Union[str, Path], archive: RolloutArchive) -> Path:
    header = {
        "format": ARCHIVE_FORMAT,
        "version": ARCHIVE_VERSION,
        "suite_seed": archive.suite_seed,
        "tasks": [t.to_dict() for t in archive.tasks],
        "renderer": {"noise": archive.renderer.noise, "occluded_view": archive.renderer.occluded_view},
        "rollouts": [
            {"task_id": r.task_id, "goal_id": r.goal_id, "policy": r.policy, "seed": r.seed, "split": r.split}
            for r in archive.rollouts
        ],
    }
    arrays = {"renderer.projections": archive.renderer.projections, "renderer.biases": archive.renderer.biases}
    for n, r in enumerate(archive.rollouts):
        arrays[f"rollout.{n:06d}.states"] = r.states
        arrays[f"rollout.{n:06d}.rewards"] = r.rewards
        arrays[f"rollout.{n:06d}.observations"] = r.observations
    return write_container(path, header, arrays)


def load_archive(path: Union[str, Path]) -> RolloutArchive:
    header, arrays = read_container(path, ARCHIVE_FORMAT, (ARCHIVE_VERSION,))
    renderer = ViewRenderer(
        arrays["renderer.projections"],
        arrays["renderer.biases"],
        header["renderer"]["noise"],
        header["renderer"]["occluded_view"],
    )
    tasks = [TaskSpec(**t) for t in header["tasks"]]
    rollouts = [
        Rollout(
            states=arrays[f"rollout.{n:06d}.states"],
            rewards=arrays[f"rollout.{n:06d}.rewards"],
            observations=arrays[f"rollout.{n:06d}.observations"],
            **meta,
        )
        for n, meta in enumerate(header["rollouts"])
    ]
    return RolloutArchive(header["suite_seed"], tasks, renderer, rollouts)
