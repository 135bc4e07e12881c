"""Held-out-task benchmarks for reward models.

Two metrics, both reported per view and multi-view:

* pairwise accuracy: share of timestep pairs from suboptimal and random rollouts where the
  higher goal similarity falls on the timestep with the higher ground-truth reward;
* value-order correlation (VOC): rank correlation between predicted rewards along an expert
  trajectory and time, in percent.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import stats
from tqdm import tqdm

from . import random_utils
from .encoders import ImageEncoder, SimilarityFn, TextEncoder, load_checkpoint
from .exceptions import ConfigError, DataError
from .numcore import Tensor, no_grad
from .synthworld import Rollout, RolloutArchive, TaskSpec

logger = logging.getLogger(__name__)

MULTI_VIEW = "multi"
REPORT_COLUMNS = ["model", "task", "view", "metric", "value", "stderr"]
AVERAGE = "Average"
TIE_TOLERANCE = 1e-9
VOC_METHODS = ("spearman", "kendall")

ViewMode = Union[int, str]


@dataclass
class BenchmarkConfig:
    n_pairs: int = 10000
    n_expert_trajectories: int = 50
    voc_method: str = "spearman"
    seed: int = 0
    plots: bool = False

    def __post_init__(self):
        if self.n_pairs < 1 or self.n_expert_trajectories < 1:
            raise ConfigError("benchmark sizes must be positive")
        if self.voc_method not in VOC_METHODS:
            raise ConfigError(f"voc_method must be one of {VOC_METHODS}, got {self.voc_method!r}")


def view_label(view_mode: ViewMode) -> str:
    return "Multi view" if view_mode == MULTI_VIEW else f"View {int(view_mode) + 1}"


def select_view(scores: np.ndarray, view_mode: ViewMode) -> np.ndarray:
    """(T,) predictions from (T, V) per-view scores; multi-view averages the views."""
    if view_mode == MULTI_VIEW:
        return scores.mean(axis=1)
    if not isinstance(view_mode, (int, np.integer)) or not 0 <= view_mode < scores.shape[1]:
        raise DataError(f"view {view_mode!r} is not available, the rollout has {scores.shape[1]} views")
    return scores[:, view_mode]


class RewardModel:
    name: str = "model"

    def score(self, rollout: Rollout) -> np.ndarray:
        """(T, V) predicted reward of every timestep seen from every view."""
        raise NotImplementedError


class EncoderRewardModel(RewardModel):
    """Goal similarity S(image(o_t), text(goal)) of a pair of encoders."""

    def __init__(self, image: ImageEncoder, text: TextEncoder, similarity: SimilarityFn, name: str = "model"):
        self.image = image
        self.text = text
        self.similarity = similarity
        self.name = name

    @classmethod
    def from_checkpoint(cls, path: Union[str, Path], name: Optional[str] = None) -> "EncoderRewardModel":
        image, text, similarity, header = load_checkpoint(path)
        return cls(image, text, similarity, name or header["metadata"].get("objective", Path(path).parent.name))

    def score(self, rollout):
        T, V, obs_dim = rollout.observations.shape
        with no_grad():
            z = self.image(rollout.observations.reshape(T * V, obs_dim))
            v = self.text(rollout.goal_id)
        goal = Tensor(np.broadcast_to(v.data, z.shape))
        return self.similarity(z, goal).data.reshape(T, V)


class OracleRewardModel(RewardModel):
    name = "oracle"

    def score(self, rollout):
        return np.repeat(rollout.rewards[:, None], rollout.n_views, axis=1)


class ConstantRewardModel(RewardModel):
    def __init__(self, value: float = 0.0, name: str = "constant"):
        self.value = value
        self.name = name

    def score(self, rollout):
        return np.full((rollout.length, rollout.n_views), self.value)


class NegatedRewardModel(RewardModel):
    def __init__(self, model: RewardModel):
        self.model = model
        self.name = f"negated {model.name}"

    def score(self, rollout):
        return -self.model.score(rollout)


@dataclass
class PairwiseBenchmark:
    """Timestep pairs of one held-out task.

    `refs_a` and `refs_b` hold (rollout id, timestep) rows; `labels` is 0 where element a has
    the higher ground-truth reward and 1 where element b has.
    """

    task_id: int
    refs_a: np.ndarray
    refs_b: np.ndarray
    labels: np.ndarray
    rewards_a: np.ndarray
    rewards_b: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def rollout_ids(self) -> np.ndarray:
        return np.unique(np.concatenate([self.refs_a[:, 0], self.refs_b[:, 0]]))


def build_pairwise(task: TaskSpec, archive: RolloutArchive, n_pairs: int = 10000, seed: int = 0) -> PairwiseBenchmark:
    """Uniform timestep pairs over the task's suboptimal and random rollouts, reward ties redrawn."""
    rollout_ids = archive.select(task_id=task.task_id, policy="suboptimal") + archive.select(
        task_id=task.task_id, policy="random"
    )
    if not rollout_ids:
        raise DataError(f"task {task.task_id} has no suboptimal or random rollouts")
    refs = np.concatenate(
        [np.stack([np.full(archive.rollouts[r].length, r), np.arange(archive.rollouts[r].length)], axis=1) for r in rollout_ids]
    )
    rewards = np.concatenate([archive.rollouts[r].rewards for r in rollout_ids])
    if np.ptp(rewards) < TIE_TOLERANCE:
        raise DataError(f"task {task.task_id}: rollouts hold no two timesteps with distinct rewards")

    rs = random_utils.derive_random_state(seed, "pairwise", task.task_id)
    a = random_utils.randint(0, len(refs), n_pairs, rs)
    b = random_utils.randint(0, len(refs), n_pairs, rs)
    for _ in range(1000):
        tied = np.flatnonzero(np.abs(rewards[a] - rewards[b]) < TIE_TOLERANCE)
        if len(tied) == 0:
            break
        a[tied] = random_utils.randint(0, len(refs), len(tied), rs)
        b[tied] = random_utils.randint(0, len(refs), len(tied), rs)
    else:
        raise DataError(f"task {task.task_id}: too few distinct rewards to draw {n_pairs} untied pairs")

    return PairwiseBenchmark(
        task_id=task.task_id,
        refs_a=refs[a],
        refs_b=refs[b],
        labels=(rewards[b] > rewards[a]).astype(np.int64),
        rewards_a=rewards[a],
        rewards_b=rewards[b],
    )


def score_rollouts(model: RewardModel, archive: RolloutArchive, rollout_ids: Sequence[int]) -> Dict[int, np.ndarray]:
    return {int(r): model.score(archive.rollouts[r]) for r in rollout_ids}


def pairwise_accuracy(
    model: RewardModel,
    bench: PairwiseBenchmark,
    archive: RolloutArchive,
    view_mode: ViewMode = MULTI_VIEW,
    scores: Optional[Mapping[int, np.ndarray]] = None,
) -> float:
    """Percentage of pairs ordered like the ground truth; equal predictions earn half credit."""
    if scores is None:
        scores = score_rollouts(model, archive, bench.rollout_ids)
    predicted = {r: select_view(s, view_mode) for r, s in scores.items()}
    pred_a = np.array([predicted[r][t] for r, t in bench.refs_a])
    pred_b = np.array([predicted[r][t] for r, t in bench.refs_b])
    correct = np.where(pred_a == pred_b, 0.5, ((pred_b > pred_a).astype(np.int64) == bench.labels).astype(np.float64))
    return 100.0 * float(correct.mean())


@dataclass
class VOCResult:
    value: float
    degenerate: bool = False


def value_order_correlation(predictions: np.ndarray, method: str = "spearman") -> VOCResult:
    """Rank correlation of predictions with time, in percent; ties get average ranks."""
    predictions = np.asarray(predictions, dtype=np.float64)
    if len(predictions) < 2:
        raise DataError("VOC needs at least two timesteps")
    if np.ptp(predictions) == 0:
        logger.warning("Predictions are constant along the trajectory; VOC is reported as 0")
        return VOCResult(0.0, degenerate=True)
    time = np.arange(len(predictions))
    if method == "spearman":
        rho = stats.spearmanr(time, predictions)[0]
    elif method == "kendall":
        rho = stats.kendalltau(time, predictions)[0]
    else:
        raise ConfigError(f"voc method must be one of {VOC_METHODS}, got {method!r}")
    return VOCResult(100.0 * float(rho))


def voc(
    model: RewardModel, expert_rollout: Rollout, view_mode: ViewMode = MULTI_VIEW, method: str = "spearman"
) -> VOCResult:
    if expert_rollout.policy != "expert":
        raise DataError(f"VOC is defined on expert rollouts, got a {expert_rollout.policy} rollout")
    return value_order_correlation(select_view(model.score(expert_rollout), view_mode), method)


def mean_sem(values: Sequence[float]) -> tuple:
    """Mean and standard error of the mean (0 for a single value)."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        return float(values.mean()), 0.0
    return float(values.mean()), float(stats.sem(values, ddof=1))


def view_modes(n_views: int) -> List[ViewMode]:
    return list(range(n_views)) + [MULTI_VIEW]


def voc_report(
    model: RewardModel,
    task: TaskSpec,
    archive: RolloutArchive,
    n_trajectories: int = 50,
    method: str = "spearman",
) -> pd.DataFrame:
    """VOC mean and standard error over the task's first `n_trajectories` held-out expert rollouts."""
    rollout_ids = archive.select(task_id=task.task_id, policy="expert", split="eval")
    if len(rollout_ids) < n_trajectories:
        raise ConfigError(
            f"task {task.task_id} has {len(rollout_ids)} held-out expert rollouts, {n_trajectories} requested"
        )
    scores = [model.score(archive.rollouts[r]) for r in rollout_ids[:n_trajectories]]
    rows = []
    for mode in view_modes(archive.n_views):
        results = [value_order_correlation(select_view(s, mode), method) for s in scores]
        mean, sem = mean_sem([r.value for r in results])
        rows.append(
            {
                "view": view_label(mode),
                "value": mean,
                "stderr": sem,
                "n": len(results),
                "n_degenerate": sum(r.degenerate for r in results),
            }
        )
    return pd.DataFrame(rows)


@dataclass
class EvalReport:
    """Long-form results table (model, task, view, metric, value, stderr) plus run metadata."""

    frame: pd.DataFrame
    metadata: dict = field(default_factory=dict)

    @property
    def models(self) -> List[str]:
        return list(dict.fromkeys(self.frame["model"]))

    def rows(self, metric: str) -> pd.DataFrame:
        return self.frame[self.frame["metric"] == metric]

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.frame.to_csv(path, index=False, columns=REPORT_COLUMNS, float_format="%.10g")
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "EvalReport":
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
        for column in ("value", "stderr"):
            frame[column] = pd.to_numeric(frame[column], errors="coerce")
        return cls(frame)


def build_benchmarks(archive: RolloutArchive, cfg: BenchmarkConfig) -> Dict[int, PairwiseBenchmark]:
    return {t.task_id: build_pairwise(t, archive, cfg.n_pairs, cfg.seed) for t in archive.heldout_tasks}


def full_eval(
    model: RewardModel,
    archive: RolloutArchive,
    cfg: Optional[BenchmarkConfig] = None,
    benches: Optional[Mapping[int, PairwiseBenchmark]] = None,
    progress: bool = False,
) -> EvalReport:
    """Both benchmarks on every held-out task and view, plus a cross-task average row per metric."""
    cfg = cfg or BenchmarkConfig()
    tasks = archive.heldout_tasks
    if not tasks:
        raise DataError("the suite has no held-out tasks")
    benches = benches if benches is not None else build_benchmarks(archive, cfg)

    rows = []
    for task in tqdm(tasks, desc=model.name, disable=not progress):
        bench = benches[task.task_id]
        scores = score_rollouts(model, archive, bench.rollout_ids)
        for mode in view_modes(archive.n_views):
            accuracy = pairwise_accuracy(model, bench, archive, mode, scores)
            rows.append([model.name, task.name, view_label(mode), "accuracy", accuracy, np.nan])
        voc_rows = voc_report(model, task, archive, cfg.n_expert_trajectories, cfg.voc_method)
        for _, r in voc_rows.iterrows():
            rows.append([model.name, task.name, r["view"], "voc", r["value"], r["stderr"]])

    frame = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    averages = []
    for metric in ("accuracy", "voc"):
        averages.append([model.name, AVERAGE, "", metric, frame[frame["metric"] == metric]["value"].mean(), np.nan])
    frame = pd.concat([frame, pd.DataFrame(averages, columns=REPORT_COLUMNS)], ignore_index=True)
    frame = frame.sort_values("metric", kind="stable").reset_index(drop=True)
    metadata = {
        "model": model.name,
        "seed": cfg.seed,
        "n_pairs": cfg.n_pairs,
        "n_expert_trajectories": cfg.n_expert_trajectories,
        "voc_method": cfg.voc_method,
    }
    return EvalReport(frame, metadata)


def combine_reports(reports: Sequence[EvalReport]) -> EvalReport:
    frame = pd.concat([r.frame for r in reports], ignore_index=True)
    return EvalReport(frame, {"models": [r.metadata for r in reports]})


def _format(value: float, stderr: float) -> str:
    if stderr is None or not np.isfinite(stderr):
        return f"{value:.2f}"
    return f"{value:.2f} ± {stderr:.2f}"


def to_markdown(report: EvalReport, metric: str, models: Optional[Sequence[str]] = None) -> str:
    """One row per (task, view), one column per model, average row last."""
    models = list(models) if models is not None else report.models
    rows = report.rows(metric)
    if rows.empty:
        raise DataError(f"report has no {metric!r} rows")
    keys = list(dict.fromkeys(zip(rows["task"], rows["view"])))
    cells = {(m, t, v): _format(x, s) for m, t, v, x, s in zip(rows["model"], rows["task"], rows["view"], rows["value"], rows["stderr"])}

    lines = ["| Task | View | " + " | ".join(models) + " |", "|" + "---|" * (len(models) + 2)]
    for task, view in keys:
        values = [cells.get((m, task, view), "") for m in models]
        lines.append(f"| {task} | {view} | " + " | ".join(values) + " |")
    return "\n".join(lines) + "\n"


def reward_curves(
    models: Sequence[RewardModel], rollout: Rollout, view_mode: ViewMode = MULTI_VIEW
) -> pd.DataFrame:
    """Ground truth and every model's predicted reward along one rollout."""
    columns = {"timestep": np.arange(rollout.length), "ground_truth": rollout.rewards}
    for model in models:
        columns[model.name] = select_view(model.score(rollout), view_mode)
    return pd.DataFrame(columns)


def plot_reward_curves(curves: pd.DataFrame, path: Union[str, Path], title: str = "") -> Path:
    """SVG line plot of a `reward_curves` table, each curve min-max scaled to [0, 1]."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for column in curves.columns.drop("timestep"):
        values = curves[column].to_numpy(dtype=np.float64)
        span = np.ptp(values)
        ax.plot(curves["timestep"], (values - values.min()) / span if span > 0 else values * 0, label=column)
    ax.set_xlabel("timestep")
    ax.set_ylabel("scaled reward")
    if title:
        ax.set_title(title)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def write_metadata(path: Union[str, Path], metadata: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")
    return path
