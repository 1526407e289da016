"""
Command line surface: simulate, train, eval, benchmark and heatmap.

    python -m src.core.cli simulate --config spec.json --out data/cohort
    python -m src.core.cli train --config run.json [--seed 3] [--out runs/a]
    python -m src.core.cli eval --config run.json [--checkpoint runs/a/checkpoint.json]
    python -m src.core.cli benchmark --config run.json [--step 0.2] [--workers 4]
    python -m src.core.cli heatmap --checkpoint runs/a/checkpoint.json --slide slide.csv --out maps/

Exit codes: 0 success, 2 configuration errors, 3 I/O errors, 4 numeric failures.
"""
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Type, TypeVar

import numpy as np
import pandas as pd
from PIL import Image
from pydantic import BaseModel, Field, ValidationError
from pydantic_settings import BaseSettings, CliApp, CliSubCommand, SettingsConfigDict, SettingsError

from config.settings import BENCHMARK_CONFIG, CLI_CONFIG, SIMULATOR_CONFIG
from src.core.evaluation import (
    benchmark_row,
    evaluate_model,
    evaluate_out_of_location,
    write_benchmark_csv,
    write_report,
)
from src.core.exceptions import ConfigError, DataIOError, MilError
from src.core.model import load_checkpoint, save_checkpoint
from src.core.proxy_labeling import feasible_grid
from src.core.simulator import generate
from src.core.trainer import load_annotated, predict_slide, split_cohort, train as train_model, write_train_log
from src.models.pydantic_models import EvalReport, FrameworkConfig, RunConfig, SyntheticSpec
from src.storage.manifest_utils import Cohort, load_cohort
from src.utils.logging_utils import setup_logging

logger = logging.getLogger(__name__)

EXIT_CODES = CLI_CONFIG["exit_codes"]
ModelT = TypeVar("ModelT", bound=BaseModel)


def load_json_model(path, model_cls: Type[ModelT]) -> ModelT:
    """Parse a JSON config file into a validated model (unknown keys rejected)."""
    path = Path(path)
    if not path.is_file():
        raise DataIOError(f"config file not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    except OSError as e:
        raise DataIOError(f"cannot read config {path}: {e}") from e
    return model_cls.model_validate(payload)


def load_run_config(path, seed: Optional[int] = None, out: Optional[Path] = None) -> RunConfig:
    """Validate a run config, apply flag overrides and check read paths before any work starts."""
    path = Path(path)
    run = load_json_model(path, RunConfig)
    paths = run.paths.model_copy(update={
        "manifest": _resolve(path.parent, run.paths.manifest),
        "output_dir": Path(out) if out is not None else _resolve(path.parent, run.paths.output_dir),
    })
    train_settings = run.train if seed is None else run.train.model_copy(update={"seed": seed})
    run = run.model_copy(update={"paths": paths, "train": train_settings})
    if not run.paths.manifest.is_file() and run.simulator is None:
        raise DataIOError(f"manifest not found: {run.paths.manifest}")
    return run


def _resolve(base: Path, path: Path) -> Path:
    return path if path.is_absolute() else base / path


def load_run_cohort(run: RunConfig) -> Cohort:
    """Load the manifest, simulating it first from ``run.simulator`` when it does not exist."""
    manifest = run.paths.manifest
    if not manifest.is_file() and run.simulator is not None:
        if manifest.name != SIMULATOR_CONFIG["manifest_name"]:
            raise ConfigError(
                f"paths.manifest must be named {SIMULATOR_CONFIG['manifest_name']} to be simulated (got {manifest.name})"
            )
        logger.info(f"Manifest {manifest} absent; simulating the cohort from the run config")
        generate(run.simulator, manifest.parent)
    return load_cohort(manifest)


def _locations(cohort: Cohort) -> dict:
    return {r.slide_id: r.location for r in cohort.records if r.location}


def cmd_simulate(config, out, seed: Optional[int] = None, workers: int = 1) -> Cohort:
    spec = load_json_model(config, SyntheticSpec)
    if seed is not None:
        spec = SyntheticSpec.model_validate({**spec.model_dump(), "seed": seed})
    return generate(spec, out, max_workers=workers)


def cmd_train(config, seed: Optional[int] = None, out: Optional[Path] = None) -> Path:
    run = load_run_config(config, seed, out)
    cohort = load_run_cohort(run)
    params, log, state = train_model(cohort, run.framework, run.train, run.model.hidden_dims)
    checkpoint = save_checkpoint(run.paths.output_dir / CLI_CONFIG["checkpoint_name"], params, state, run.framework)
    write_train_log(run.paths.output_dir / CLI_CONFIG["train_log_name"], log)
    return checkpoint


def _evaluation_sets(run: RunConfig, cohort: Cohort):
    """(test slides, validation slides, out-of-location slides), all with ground truth."""
    split = split_cohort(cohort, run.train)
    evaluated = split.test
    if not len(split.test):
        logger.warning("Split has no test slides; evaluating on every in-location slide")
        held_out = set(split.out_of_location.records)
        evaluated = cohort.subset([r for r in cohort.records if r not in held_out])
    return load_annotated(evaluated), load_annotated(split.validation), load_annotated(split.out_of_location)


def _with_out_of_location(report: EvalReport, params, out_of_location, validation_slides, locations,
                          framework) -> EvalReport:
    extra = evaluate_out_of_location(params, out_of_location, validation_slides, locations, framework)
    return report if extra is None else report.model_copy(update={"out_of_location": extra})


def cmd_eval(config, checkpoint: Optional[Path] = None, seed: Optional[int] = None,
             out: Optional[Path] = None) -> EvalReport:
    run = load_run_config(config, seed, out)
    checkpoint = Path(checkpoint) if checkpoint else run.paths.output_dir / CLI_CONFIG["checkpoint_name"]
    stored = load_checkpoint(checkpoint)
    cohort = load_run_cohort(run)
    slides, validation_slides, out_of_location = _evaluation_sets(run, cohort)
    locations = _locations(cohort)
    report = evaluate_model(stored.params, slides, validation_slides, locations, stored.framework)
    report = _with_out_of_location(report, stored.params, out_of_location, validation_slides, locations,
                                   stored.framework)
    write_report(run.paths.output_dir / CLI_CONFIG["eval_report_name"], report)
    return report


def benchmark_seed(seed: int, cfg: FrameworkConfig) -> int:
    """Training seed for one grid configuration, independent of execution order."""
    sequence = np.random.SeedSequence([seed, round(cfg.alpha * 1000), round(cfg.beta * 1000)])
    return int(sequence.generate_state(1)[0])


def cmd_benchmark(config, step: Optional[float] = None, seed: Optional[int] = None,
                  out: Optional[Path] = None, workers: Optional[int] = None) -> Path:
    run = load_run_config(config, seed, out)
    grid = feasible_grid(step if step is not None else BENCHMARK_CONFIG["grid_step"])
    cohort = load_run_cohort(run)
    slides, validation_slides, out_of_location = _evaluation_sets(run, cohort)
    locations = _locations(cohort)
    out_dir = run.paths.output_dir

    def run_one(cfg: FrameworkConfig):
        settings = run.train.model_copy(update={
            "seed": benchmark_seed(run.train.seed, cfg),
            "split_seed": run.train.seed if run.train.split_seed is None else run.train.split_seed,
        })
        params, log, state = train_model(cohort, cfg, settings, run.model.hidden_dims)
        config_dir = out_dir / "configs" / f"alpha{cfg.alpha:g}_beta{cfg.beta:g}"
        save_checkpoint(config_dir / CLI_CONFIG["checkpoint_name"], params, state, cfg)
        write_train_log(config_dir / CLI_CONFIG["train_log_name"], log)
        report = evaluate_model(params, slides, validation_slides, locations, cfg)
        report = _with_out_of_location(report, params, out_of_location, validation_slides, locations, cfg)
        write_report(config_dir / CLI_CONFIG["eval_report_name"], report)
        logger.info(f"Benchmark (alpha={cfg.alpha}, beta={cfg.beta}): AUC {report.auc:.4f}")
        return benchmark_row(cfg, report)

    max_workers = workers or BENCHMARK_CONFIG["max_workers"]
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as executor:
            rows = list(executor.map(run_one, grid))
    else:
        rows = [run_one(cfg) for cfg in grid]

    csv_path = write_benchmark_csv(out_dir / BENCHMARK_CONFIG["csv_name"], rows)
    aucs = np.array([r.auc for r in rows])
    best, worst = rows[int(np.argmax(aucs))], rows[int(np.argmin(aucs))]
    summary = {
        "n_configurations": len(rows),
        "auc_mean": float(aucs.mean()),
        "auc_std": float(aucs.std()),
        "best": {"alpha": best.alpha, "beta": best.beta, "auc": best.auc},
        "worst": {"alpha": worst.alpha, "beta": worst.beta, "auc": worst.auc},
    }
    out_of_location_aucs = np.array([r.out_of_location_auc for r in rows if r.out_of_location_auc is not None])
    if out_of_location_aucs.size:
        summary["out_of_location"] = {
            "locations": sorted(run.train.held_out_locations),
            "n_configurations": int(out_of_location_aucs.size),
            "auc_mean": float(out_of_location_aucs.mean()),
            "auc_std": float(out_of_location_aucs.std()),
        }
    (out_dir / BENCHMARK_CONFIG["summary_name"]).write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    logger.info(f"Benchmark over {len(rows)} configurations: AUC {summary['auc_mean']:.3f} ± {summary['auc_std']:.3f}")
    return csv_path


def heatmap_pixels(coords: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """(max_y + 1, max_x + 1) uint8 map with round-half-up 255 * score at each patch, 0 elsewhere."""
    if coords.size == 0:
        raise DataIOError("slide has no patches")
    if np.any(coords < 0):
        raise DataIOError("patch coordinates must be non-negative")
    unique, counts = np.unique(coords, axis=0, return_counts=True)
    duplicates = unique[counts > 1]
    if len(duplicates):
        listed = ", ".join(f"({x}, {y})" for x, y in duplicates.tolist())
        raise DataIOError(f"duplicate patch coordinates: {listed}")

    width, height = int(coords[:, 0].max()) + 1, int(coords[:, 1].max()) + 1
    pixels = np.zeros((height, width), dtype=np.uint8)
    values = np.floor(255.0 * np.clip(scores, 0.0, 1.0) + 0.5).astype(np.uint8)
    pixels[coords[:, 1], coords[:, 0]] = values
    return pixels


def cmd_heatmap(checkpoint, slide, out) -> Tuple[Path, Path]:
    """Unfiltered tumor map: binary PGM plus a patch_id,x,y,score CSV."""
    stored = load_checkpoint(checkpoint)
    prediction = predict_slide(stored.params, slide)
    pixels = heatmap_pixels(prediction.coords, prediction.scores)

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(slide).stem
    pgm_path = out / f"{stem}.pgm"
    Image.fromarray(pixels).save(pgm_path, format="PPM")
    csv_path = out / f"{stem}_scores.csv"
    pd.DataFrame({
        "patch_id": prediction.patch_ids,
        "x": prediction.coords[:, 0],
        "y": prediction.coords[:, 1],
        "score": prediction.scores,
    }).to_csv(csv_path, index=False, lineterminator="\n")
    logger.info(f"Heatmap {pixels.shape[1]}x{pixels.shape[0]} written to {pgm_path}")
    return pgm_path, csv_path


class SimulateCommand(BaseModel):
    """Generate a synthetic cohort from a simulator spec file."""

    config: Path = Field(description="simulator spec JSON")
    out: Path = Field(description="output directory")
    seed: Optional[int] = Field(default=None, description="override the simulator seed")
    workers: int = Field(default=1, ge=1, description="slides generated in parallel")

    def cli_cmd(self) -> None:
        cmd_simulate(self.config, self.out, self.seed, self.workers)


class TrainCommand(BaseModel):
    """Train one framework configuration and write a checkpoint and train log."""

    config: Path = Field(description="run config JSON")
    seed: Optional[int] = Field(default=None, description="override train.seed")
    out: Optional[Path] = Field(default=None, description="override paths.output_dir")

    def cli_cmd(self) -> None:
        cmd_train(self.config, self.seed, self.out)


class EvalCommand(BaseModel):
    """Evaluate a checkpoint on the annotated test slides."""

    config: Path = Field(description="run config JSON")
    checkpoint: Optional[Path] = Field(default=None, description="defaults to <out>/checkpoint.json")
    seed: Optional[int] = Field(default=None, description="override train.seed (selects the split)")
    out: Optional[Path] = Field(default=None, description="override paths.output_dir")

    def cli_cmd(self) -> None:
        cmd_eval(self.config, self.checkpoint, self.seed, self.out)


class BenchmarkCommand(BaseModel):
    """Train and evaluate every configuration of the feasible grid."""

    config: Path = Field(description="run config JSON")
    step: float = Field(default=BENCHMARK_CONFIG["grid_step"], description="grid increment for alpha and beta")
    seed: Optional[int] = Field(default=None, description="override train.seed")
    out: Optional[Path] = Field(default=None, description="override paths.output_dir")
    workers: Optional[int] = Field(default=None, ge=1, description="configurations trained in parallel")

    def cli_cmd(self) -> None:
        cmd_benchmark(self.config, self.step, self.seed, self.out, self.workers)


class HeatmapCommand(BaseModel):
    """Render the unfiltered tumor map of one slide."""

    checkpoint: Path = Field(description="checkpoint JSON")
    slide: Path = Field(description="slide feature CSV")
    out: Path = Field(description="output directory")

    def cli_cmd(self) -> None:
        cmd_heatmap(self.checkpoint, self.slide, self.out)


class MilCLI(BaseSettings):
    """Weakly supervised multiple instance learning from slide-level labels."""

    model_config = SettingsConfigDict(cli_prog_name=CLI_CONFIG["prog_name"], env_prefix="MIL_CLI_")

    simulate: CliSubCommand[SimulateCommand]
    train: CliSubCommand[TrainCommand]
    eval: CliSubCommand[EvalCommand]
    benchmark: CliSubCommand[BenchmarkCommand]
    heatmap: CliSubCommand[HeatmapCommand]

    def cli_cmd(self) -> None:
        """Run one of the subcommands."""
        CliApp.run_subcommand(self)


def main(argv: Optional[Sequence[str]] = None) -> int:
    setup_logging()
    args: List[str] = list(sys.argv[1:] if argv is None else argv)
    try:
        CliApp.run(MilCLI, cli_args=args, cli_exit_on_error=False)
    except MilError as e:
        logger.error(f"{type(e).__name__}: {e.detail}")
        print(f"error: {e.detail}", file=sys.stderr)
        return e.exit_code
    except ValidationError as e:
        logger.error(f"Configuration rejected: {e}")
        print(f"error: invalid configuration\n{e}", file=sys.stderr)
        return EXIT_CODES["config"]
    except SettingsError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CODES["config"]
    except SystemExit as e:
        # argparse exits on --help and on some usage errors
        return e.code if isinstance(e.code, int) else EXIT_CODES["config"]
    except OSError as e:
        logger.error(f"I/O failure: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CODES["io"]
    return EXIT_CODES["success"]


if __name__ == "__main__":
    sys.exit(main())
