"""
Manifest and feature file I/O.

A manifest is JSON lines, one ``SlideRecord`` per line; ``feature_file`` is
resolved relative to the manifest's directory. A feature file is a CSV with
header ``patch_id,x,y,f0..f{d-1}`` and an optional trailing ``gt`` column.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError

from src.core.exceptions import DataIOError, ShapeError
from src.models.pydantic_models import SlideRecord

logger = logging.getLogger(__name__)

GT_COLUMN = "gt"
COORD_COLUMNS = ["x", "y"]


@dataclass(frozen=True)
class InstanceBatch:
    """Patches of one slide. ``gt_labels`` is None on the training path."""

    slide_id: str
    patch_ids: np.ndarray
    coords: np.ndarray  # (B, 2) integer grid coordinates (x, y)
    features: np.ndarray  # (B, d) float64
    gt_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        n = self.features.shape[0]
        if self.patch_ids.shape[0] != n or self.coords.shape != (n, 2):
            raise ShapeError(f"slide {self.slide_id}: patch ids, coordinates and features disagree in length")
        if self.gt_labels is not None and self.gt_labels.shape != (n,):
            raise ShapeError(f"slide {self.slide_id}: ground truth length does not match features")

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def take(self, indices) -> "InstanceBatch":
        indices = np.asarray(indices)
        return InstanceBatch(
            slide_id=self.slide_id,
            patch_ids=self.patch_ids[indices],
            coords=self.coords[indices],
            features=self.features[indices],
            gt_labels=None if self.gt_labels is None else self.gt_labels[indices],
        )

    def without_ground_truth(self) -> "InstanceBatch":
        return InstanceBatch(self.slide_id, self.patch_ids, self.coords, self.features, None)


@dataclass(frozen=True)
class Cohort:
    """Manifest records plus the directory their feature files are relative to."""

    root: Path
    records: Tuple[SlideRecord, ...]

    def feature_path(self, record: SlideRecord) -> Path:
        path = Path(record.feature_file)
        return path if path.is_absolute() else self.root / path

    def subset(self, records: Iterable[SlideRecord]) -> "Cohort":
        return Cohort(root=self.root, records=tuple(records))

    def __len__(self) -> int:
        return len(self.records)


def feature_columns(feature_dim: int) -> List[str]:
    return [f"f{k}" for k in range(feature_dim)]


def write_manifest(path, records: Sequence[SlideRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            fh.write(json.dumps(record.model_dump(exclude_none=True)) + "\n")
    logger.info(f"Manifest with {len(records)} slides written to {path}")
    return path


def read_manifest(path) -> List[SlideRecord]:
    path = Path(path)
    if not path.is_file():
        raise DataIOError(f"manifest not found: {path}")
    records = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if line.strip():
                    records.append(SlideRecord(**json.loads(line)))
    except json.JSONDecodeError as e:
        raise DataIOError(f"{path}:{line_no}: invalid JSON ({e})") from e
    except ValidationError as e:
        raise DataIOError(f"{path}:{line_no}: invalid slide record ({e.errors()[0]['msg']})") from e
    except OSError as e:
        raise DataIOError(f"cannot read manifest {path}: {e}") from e

    seen = set()
    for record in records:
        if record.slide_id in seen:
            raise DataIOError(f"{path}: duplicate slide_id {record.slide_id}")
        seen.add(record.slide_id)
    return records


def load_cohort(manifest_path) -> Cohort:
    manifest_path = Path(manifest_path)
    return Cohort(root=manifest_path.parent, records=tuple(read_manifest(manifest_path)))


def write_feature_file(path, batch: InstanceBatch, include_ground_truth: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({"patch_id": batch.patch_ids, "x": batch.coords[:, 0], "y": batch.coords[:, 1]})
    features = pd.DataFrame(batch.features, columns=feature_columns(batch.feature_dim))
    frame = pd.concat([frame, features], axis=1)
    if include_ground_truth and batch.gt_labels is not None:
        frame[GT_COLUMN] = batch.gt_labels.astype(np.int64)
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def read_feature_file(path, slide_id: Optional[str] = None, include_ground_truth: bool = False) -> InstanceBatch:
    """Load one slide. Without ``include_ground_truth`` the gt column is never parsed."""
    path = Path(path)
    usecols = None if include_ground_truth else (lambda column: column != GT_COLUMN)
    try:
        frame = pd.read_csv(path, usecols=usecols, dtype={"patch_id": str}, float_precision="round_trip")
    except FileNotFoundError as e:
        raise DataIOError(f"feature file not found: {path}") from e
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataIOError(f"cannot read feature file {path}: {e}") from e

    columns = list(frame.columns)
    has_gt = GT_COLUMN in columns
    feature_names = [c for c in columns if c not in ("patch_id", GT_COLUMN, *COORD_COLUMNS)]
    expected = ["patch_id", *COORD_COLUMNS, *feature_columns(len(feature_names))]
    if columns[: len(expected)] != expected or not feature_names:
        raise DataIOError(f"{path}: header must be patch_id,x,y,f0..f{{d-1}}[,gt], got {','.join(columns)}")
    if frame.empty:
        raise DataIOError(f"{path}: no patches")

    try:
        features = frame[feature_names].to_numpy(dtype=np.float64)
        coords = frame[COORD_COLUMNS].to_numpy(dtype=np.int64)
        gt = frame[GT_COLUMN].to_numpy(dtype=np.int8) if has_gt else None
    except (ValueError, TypeError) as e:
        raise DataIOError(f"{path}: non-numeric values ({e})") from e
    if gt is not None and np.any((gt != 0) & (gt != 1)):
        raise DataIOError(f"{path}: gt column must be binary")

    return InstanceBatch(
        slide_id=slide_id if slide_id is not None else path.stem,
        patch_ids=frame["patch_id"].to_numpy(dtype=object),
        coords=coords,
        features=features,
        gt_labels=gt,
    )


def strip_ground_truth(src, dst) -> Path:
    """Copy a feature file with the gt column physically removed."""
    batch = read_feature_file(src, include_ground_truth=False)
    return write_feature_file(dst, batch, include_ground_truth=False)
