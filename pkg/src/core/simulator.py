"""
Synthetic cohorts with known per-patch ground truth.

Normal patches are drawn from N(-delta/2 * u, sigma^2 I) and tumor patches
from N(+delta/2 * u, sigma^2 I) for a fixed unit direction u. A positive
slide holds a contiguous run of ceil(f * B) tumor patches, f drawn uniformly
from the tumor fraction range. With ``adjacent_shift`` > 0 the normal
patches of positive slides are additionally offset along a unit direction v
orthogonal to u.

Every slide draws from its own stream seeded by (seed, slide index), so
slides can be generated in any order or in parallel with identical output.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Tuple

import numpy as np
from scipy.stats import norm

from config.settings import SIMULATOR_CONFIG
from src.core.exceptions import SimulationError
from src.models.pydantic_models import SlideRecord, SyntheticSpec
from src.storage.manifest_utils import Cohort, InstanceBatch, write_feature_file, write_manifest

logger = logging.getLogger(__name__)

# stream tags mixed into the seed
_LABEL_STREAM = 1
_DIRECTION_STREAM = 2
_SLIDE_STREAM = 3
_ROUNDING_EPSILON = 1e-9


def positive_slide_count(spec: SyntheticSpec) -> int:
    return int(math.floor(spec.n_slides * spec.positive_fraction + 0.5))


def tumor_patch_count(fraction: float, n_patches: int) -> int:
    return min(n_patches, int(math.ceil(fraction * n_patches - _ROUNDING_EPSILON)))


def grid_coordinates(n_patches: int) -> np.ndarray:
    """Row-major (x, y) positions on a ceil(sqrt(B))-wide grid."""
    width = math.isqrt(n_patches - 1) + 1
    k = np.arange(n_patches)
    return np.stack([k % width, k // width], axis=1).astype(np.int64)


def class_directions(spec: SyntheticSpec) -> Tuple[np.ndarray, np.ndarray]:
    """The tumor direction u and, for d >= 2, a unit direction v orthogonal to u."""
    rng = np.random.default_rng([spec.seed, _DIRECTION_STREAM])
    u = rng.standard_normal(spec.feature_dim)
    u /= np.linalg.norm(u)
    v = np.zeros(spec.feature_dim)
    if spec.feature_dim >= 2:
        w = rng.standard_normal(spec.feature_dim)
        w -= (w @ u) * u
        v = w / np.linalg.norm(w)
    return u, v


def slide_labels(spec: SyntheticSpec) -> np.ndarray:
    labels = np.zeros(spec.n_slides, dtype=np.int64)
    n_positive = positive_slide_count(spec)
    if n_positive == 0:
        logger.warning(f"positive_fraction {spec.positive_fraction} of {spec.n_slides} slides yields no positive slide")
    rng = np.random.default_rng([spec.seed, _LABEL_STREAM])
    labels[rng.permutation(spec.n_slides)[:n_positive]] = 1
    return labels


def slide_id_for(spec: SyntheticSpec, index: int) -> str:
    width = max(4, len(str(spec.n_slides - 1)))
    return f"slide_{index:0{width}d}"


def simulate_slide(spec: SyntheticSpec, index: int, label: int, u: np.ndarray, v: np.ndarray) -> InstanceBatch:
    rng = np.random.default_rng([spec.seed, _SLIDE_STREAM, index])
    low, high = spec.patch_range
    n_patches = int(rng.integers(low, high + 1))

    gt = np.zeros(n_patches, dtype=np.int8)
    if label == 1:
        fraction = rng.uniform(*spec.tumor_fraction_range)
        n_tumor = tumor_patch_count(fraction, n_patches)
        start = int(rng.integers(0, n_patches - n_tumor + 1))
        gt[start:start + n_tumor] = 1

    half = spec.class_separation / 2.0
    normal_center = -half * u
    if label == 1:
        normal_center = normal_center + spec.adjacent_shift * v
    centers = np.where(gt[:, None] == 1, half * u, normal_center)
    features = centers + spec.noise_sigma * rng.standard_normal((n_patches, spec.feature_dim))

    return InstanceBatch(
        slide_id=slide_id_for(spec, index),
        patch_ids=np.array([str(k) for k in range(n_patches)], dtype=object),
        coords=grid_coordinates(n_patches),
        features=features,
        gt_labels=gt,
    )


def check_satisfiable(spec: SyntheticSpec) -> None:
    f_min, _ = spec.tumor_fraction_range
    _, high = spec.patch_range
    if f_min * high < 1.0:
        raise SimulationError(
            f"tumor_fraction_range minimum {f_min} covers less than one patch even at {high} patches per slide"
        )


def simulate_cohort(spec: SyntheticSpec, max_workers: int = 1) -> List[Tuple[int, InstanceBatch]]:
    """(bag label, slide patches with ground truth) for every slide, in slide order."""
    check_satisfiable(spec)
    labels = slide_labels(spec)
    u, v = class_directions(spec)

    def build(index: int) -> Tuple[int, InstanceBatch]:
        return int(labels[index]), simulate_slide(spec, index, int(labels[index]), u, v)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as executor:
            return list(executor.map(build, range(spec.n_slides)))
    return [build(index) for index in range(spec.n_slides)]


def generate(spec: SyntheticSpec, out_dir, max_workers: int = 1) -> Cohort:
    """Write a manifest and one feature CSV per slide under ``out_dir``."""
    out_dir = Path(out_dir)
    features_dir = out_dir / SIMULATOR_CONFIG["features_dir"]
    records = []
    for index, (label, batch) in enumerate(simulate_cohort(spec, max_workers=max_workers)):
        relative = Path(SIMULATOR_CONFIG["features_dir"]) / f"{batch.slide_id}.csv"
        write_feature_file(out_dir / relative, batch, include_ground_truth=spec.export_ground_truth)
        records.append(SlideRecord(
            slide_id=batch.slide_id,
            label=label,
            n_patches=len(batch),
            feature_file=relative.as_posix(),
            location=spec.locations[index % len(spec.locations)] if spec.locations else None,
        ))
    write_manifest(out_dir / SIMULATOR_CONFIG["manifest_name"], records)
    n_positive = sum(r.label for r in records)
    logger.info(f"Simulated {len(records)} slides ({n_positive} positive) into {features_dir}")
    return Cohort(root=out_dir, records=tuple(records))


def oracle_separability(spec: SyntheticSpec) -> float:
    """Bayes-optimal instance AUC along u: Phi(delta / (sigma * sqrt(2)))."""
    return float(norm.cdf(spec.class_separation / (spec.noise_sigma * math.sqrt(2.0))))
