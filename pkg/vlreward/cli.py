"""Command-line harness: gen, train, eval, all and report.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error, 3 numerical failure.
"""
import argparse
import logging
import multiprocessing
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from pathlib import Path
from typing import List, Optional, Sequence

from .config import BASELINE, MODEL_TAGS, ExperimentConfig, load_config, save_config
from .datapipe import build_dataset, save_manifest, split
from .encoders import build_encoders, save_checkpoint
from .evalbench import (
    EncoderRewardModel,
    EvalReport,
    build_benchmarks,
    combine_reports,
    full_eval,
    plot_reward_curves,
    reward_curves,
    to_markdown,
    write_metadata,
)
from .exceptions import NumericalError, UsageError, VersionError
from .objectives import redraws
from .synthworld import generate_archive, load_archive, save_archive
from .training import train, write_metrics

logger = logging.getLogger(__name__)

ARCHIVE_FILE = "archive.npz"
CHECKPOINT_FILE = "checkpoint.npz"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
BLAS_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def archive_path(cfg: ExperimentConfig) -> Path:
    return cfg.output_path / ARCHIVE_FILE


def run_dir(cfg: ExperimentConfig, tag: str) -> Path:
    return cfg.output_path / "runs" / tag


def cmd_gen(cfg: ExperimentConfig) -> Path:
    out = cfg.output_path
    out.mkdir(parents=True, exist_ok=True)
    archive = generate_archive(cfg.suite, cfg.rollouts, progress=True)
    path = save_archive(archive_path(cfg), archive)
    manifest = {
        "suite_seed": cfg.suite.seed,
        "tasks": [
            {"task_id": t.task_id, "goal_id": t.goal_id, "name": t.name, "held_out": t.held_out} for t in archive.tasks
        ],
        "occluded_view": archive.renderer.occluded_view,
        "rollouts": [
            {"task_id": r.task_id, "policy": r.policy, "split": r.split, "seed": r.seed} for r in archive.rollouts
        ],
    }
    write_metadata(out / "archive_manifest.json", manifest)
    logger.info("Wrote %d rollouts over %d tasks to %s", len(archive.rollouts), len(archive.tasks), path)
    return path


def cmd_train(cfg: ExperimentConfig, objective_tag: str) -> Path:
    if objective_tag not in MODEL_TAGS:
        raise UsageError(f"Unknown objective {objective_tag!r}, expected one of {MODEL_TAGS}")
    archive = load_archive(archive_path(cfg))
    if archive.obs_dim != cfg.encoder.obs_dim:
        raise VersionError(f"archive observations have width {archive.obs_dim}, encoder expects {cfg.encoder.obs_dim}")
    directory = run_dir(cfg, objective_tag)
    directory.mkdir(parents=True, exist_ok=True)
    save_config(directory / "config.yaml", cfg)
    image, text = build_encoders(cfg.encoder, archive.goal_families())

    if objective_tag == BASELINE:
        save_checkpoint(
            directory / CHECKPOINT_FILE, image, text, cfg.train.objective_config.similarity, {"objective": BASELINE}
        )
        logger.info("Saved the untrained baseline encoders to %s", directory)
        return directory

    train_cfg = cfg.train_config_for(objective_tag)
    dataset = build_dataset(
        archive, objective_tag, cfg.data.cap, cfg.data.seed, draws=redraws(train_cfg.objective_config)
    )
    save_manifest(directory / "dataset_manifest.npz", dataset)
    train_set, val_set = split(dataset, cfg.data.r_val)
    logger.info("Training %s on %d samples (%d held for validation)", objective_tag, len(train_set), len(val_set))
    model = train(train_cfg, (image, text), train_set, val_set, run_dir=directory, progress=True)
    write_metrics(directory / "metrics.csv", model.metrics)
    metadata = dict(model.checkpoint_metadata(), lr=train_cfg.resolved_lr)
    save_checkpoint(directory / CHECKPOINT_FILE, model.image_encoder, model.text_encoder, model.similarity, metadata)
    return directory


def _write_tables(report: EvalReport, eval_dir: Path, models: Sequence[str]) -> None:
    (eval_dir / "accuracy.md").write_text(to_markdown(report, "accuracy", models))
    (eval_dir / "voc.md").write_text(to_markdown(report, "voc", models))


def cmd_eval(cfg: ExperimentConfig, run_dirs: Optional[Sequence[Path]] = None) -> Path:
    archive = load_archive(archive_path(cfg))
    if run_dirs is None:
        run_dirs = [run_dir(cfg, tag) for tag in cfg.objectives]
    models = []
    for directory in run_dirs:
        checkpoint = Path(directory) / CHECKPOINT_FILE
        if not checkpoint.exists():
            raise FileNotFoundError(f"no checkpoint at {checkpoint}")
        model = EncoderRewardModel.from_checkpoint(checkpoint, name=Path(directory).name)
        if model.image.obs_dim != archive.obs_dim:
            raise VersionError(
                f"{checkpoint} encodes observations of width {model.image.obs_dim}, the archive has {archive.obs_dim}"
            )
        missing = [t.goal_id for t in archive.heldout_tasks if t.goal_id not in model.text.goal_ids]
        if missing:
            raise VersionError(f"{checkpoint} has no table rows for held-out goals {missing}")
        models.append(model)

    benches = build_benchmarks(archive, cfg.benchmark)
    report = combine_reports([full_eval(m, archive, cfg.benchmark, benches, progress=True) for m in models])
    eval_dir = cfg.output_path / "eval"
    report.to_csv(eval_dir / "report.csv")
    names = [m.name for m in models]
    _write_tables(report, eval_dir, names)

    curve_dir = eval_dir / "curves"
    curve_dir.mkdir(parents=True, exist_ok=True)
    for task in archive.heldout_tasks:
        expert = archive.select(task_id=task.task_id, policy="expert", split="eval")
        if not expert:
            continue
        curves = reward_curves(models, archive.rollouts[expert[0]])
        curves.to_csv(curve_dir / f"{task.name}.csv", index=False, float_format="%.10g")
        if cfg.benchmark.plots:
            plot_reward_curves(curves, curve_dir / f"{task.name}.svg", title=task.name)

    metadata = {
        "models": names,
        "suite_seed": cfg.suite.seed,
        "benchmark": report.metadata["models"][0] if report.metadata["models"] else {},
        "heldout_tasks": [t.name for t in archive.heldout_tasks],
        "occluded_view": archive.renderer.occluded_view,
    }
    write_metadata(eval_dir / "metadata.json", metadata)
    logger.info("Wrote evaluation report to %s", eval_dir)
    return eval_dir


def _train_worker(args) -> str:
    data, tag = args
    cmd_train(ExperimentConfig.from_dict(data), tag)
    return tag


def _init_worker(level: int) -> None:
    logging.basicConfig(level=level, format=LOG_FORMAT)


@contextmanager
def blas_threads(count: int):
    """Cap BLAS thread pools of processes spawned inside the block, unless the user set them."""
    saved = {name: os.environ.get(name) for name in BLAS_THREAD_VARS}
    for name in BLAS_THREAD_VARS:
        os.environ.setdefault(name, str(count))
    try:
        yield
    finally:
        for name, value in saved.items():
            if value is None:
                os.environ.pop(name, None)
            else:
                os.environ[name] = value


def cmd_all(cfg: ExperimentConfig) -> Path:
    """gen, train every pending objective, eval; completed stages are skipped on rerun."""
    if archive_path(cfg).exists():
        logger.info("Reusing %s", archive_path(cfg))
    else:
        cmd_gen(cfg)

    pending = [tag for tag in cfg.objectives if not (run_dir(cfg, tag) / CHECKPOINT_FILE).exists()]
    skipped = [tag for tag in cfg.objectives if tag not in pending]
    if skipped:
        logger.info("Skipping finished runs: %s", ", ".join(skipped))
    workers = min(cfg.jobs, len(pending))
    if workers > 1:
        # fresh interpreters read the thread caps before numpy loads BLAS
        threads = max(1, (os.cpu_count() or 1) // workers)
        context = multiprocessing.get_context("spawn")
        level = logging.getLogger().getEffectiveLevel()
        with blas_threads(threads), ProcessPoolExecutor(workers, context, _init_worker, (level,)) as pool:
            for tag in pool.map(_train_worker, [(cfg.to_dict(), tag) for tag in pending]):
                logger.info("Finished %s", tag)
    else:
        for tag in pending:
            cmd_train(cfg, tag)
    return cmd_eval(cfg)


def cmd_report(cfg: ExperimentConfig) -> Path:
    """Re-render the Markdown tables from an existing long-form report."""
    eval_dir = cfg.output_path / "eval"
    report = EvalReport.from_csv(eval_dir / "report.csv")
    models = [m for m in cfg.objectives if m in report.models] or report.models
    _write_tables(report, eval_dir, models)
    return eval_dir


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = ArgumentParser(prog="vlreward", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=["gen", "train", "eval", "all", "report"])
    parser.add_argument("--config", type=Path, help="YAML experiment file")
    parser.add_argument("--seed", type=int, help="seed for the suite, encoders, data, training and benchmarks")
    parser.add_argument("--objective", help=f"objective tag, one of {', '.join(MODEL_TAGS)}")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--jobs", type=int, help="parallel training processes for `all`")
    parser.add_argument("--run-dir", action="append", type=Path, default=None, help="run directory to evaluate")
    parser.add_argument("--set", dest="assignments", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--plots", action="store_true", help="also render SVG reward curves")
    parser.add_argument("--verbose", action="store_true")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.INFO,
            format=LOG_FORMAT,
        )
        assignments = list(args.assignments)
        if args.plots:
            assignments.append("benchmark.plots=true")
        cfg = load_config(args.config, None, assignments, args.seed, args.out, args.jobs)

        if args.command == "gen":
            cmd_gen(cfg)
        elif args.command == "train":
            if args.objective is None:
                raise UsageError("train needs --objective")
            cmd_train(cfg, args.objective)
        elif args.command == "eval":
            cmd_eval(cfg, args.run_dir)
        elif args.command == "all":
            if args.objective is not None:
                cfg = ExperimentConfig.from_dict(dict(cfg.to_dict(), objectives=[args.objective]))
            cmd_all(cfg)
        else:
            cmd_report(cfg)
    except NumericalError as err:
        logger.error("Numerical failure: %s", err)
        return 3
    except OSError as err:
        logger.error("I/O error: %s", err)
        return 2
    except (ValueError, KeyError) as err:
        logger.error("%s: %s", type(err).__name__, err)
        return 1
    return 0


def run() -> None:
    sys.exit(main())
