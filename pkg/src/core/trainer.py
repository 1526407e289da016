"""
Training loop for proxy-label weak supervision.

Each epoch visits every training slide once in a seeded shuffled order. For
each slide a batch of B patches is sampled, scored by the model, turned into
proxy labels from the bag label, and used for one Adam step on the masked
loss. The training path loads features without the ground truth column.
"""
import hashlib
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, NamedTuple, Optional, Sequence

import numpy as np

from config.settings import MODEL_CONFIG, TRAIN_CONFIG
from src.core.evaluation import roc_auc
from src.core.exceptions import ConfigError, NumericError, ShapeError
from src.core.loss import LossResult, batch_loss
from src.core.model import AdamState, ModelParams, adam_step, backward, build_layer_dims, forward, init_mlp
from src.core.proxy_labeling import ProxyLabels, assign_proxy_labels
from src.models.pydantic_models import EpochLog, FrameworkConfig, SlideRecord, TrainLog, TrainSettings
from src.storage.feature_store import FeatureStore
from src.storage.manifest_utils import Cohort, InstanceBatch, read_feature_file

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CohortSplit:
    train: Cohort
    validation: Cohort
    test: Cohort
    out_of_location: Cohort


@dataclass(frozen=True)
class TrainStep:
    """What one optimizer step saw; handed to the optional step observer."""

    epoch: int
    record: SlideRecord
    batch_indices: np.ndarray
    pred: np.ndarray
    proxy: ProxyLabels
    loss: LossResult


class TrainResult(NamedTuple):
    params: ModelParams
    log: TrainLog
    state: AdamState


@dataclass(frozen=True)
class SlidePrediction:
    slide_id: str
    patch_ids: np.ndarray
    coords: np.ndarray
    scores: np.ndarray


def split_position(slide_id: str, seed: int) -> float:
    """Stable pseudo-uniform position in [0, 1) for a slide."""
    digest = hashlib.sha256(f"{seed}:{slide_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big") / 2.0 ** 64


def split_cohort(cohort: Cohort, settings: TrainSettings) -> CohortSplit:
    """Case-level train/validation/test split from a seeded hash of each slide_id.

    Slides whose location is listed in ``settings.held_out_locations`` go to
    ``out_of_location`` only, so no model trained on the split ever sees them.
    """
    split_seed = settings.seed if settings.split_seed is None else settings.split_seed
    held_out = set(settings.held_out_locations)
    train, validation, test, out_of_location = [], [], [], []
    for record in cohort.records:
        if record.location is not None and record.location in held_out:
            out_of_location.append(record)
            continue
        position = split_position(record.slide_id, split_seed)
        if position < settings.test_fraction:
            test.append(record)
        elif position < settings.test_fraction + settings.validation_fraction:
            validation.append(record)
        else:
            train.append(record)
    missing = held_out - {r.location for r in out_of_location}
    if missing:
        logger.warning(f"Held-out locations absent from the manifest: {sorted(missing)}")
    return CohortSplit(cohort.subset(train), cohort.subset(validation), cohort.subset(test),
                       cohort.subset(out_of_location))


def sample_batch_indices(n_patches: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform without replacement when the slide has enough patches, with replacement otherwise."""
    if n_patches >= batch_size:
        return rng.choice(n_patches, size=batch_size, replace=False)
    return rng.integers(0, n_patches, size=batch_size)


def _validation_auc(params: ModelParams, slides: Sequence[InstanceBatch]) -> Optional[float]:
    annotated = [s for s in slides if s.gt_labels is not None]
    if not annotated:
        return None
    labels = np.concatenate([s.gt_labels for s in annotated])
    if labels.min() == labels.max():
        return None
    scores = np.concatenate([forward(params, s.features) for s in annotated])
    return roc_auc(scores, labels)


def train(
    cohort: Cohort,
    cfg: FrameworkConfig,
    settings: TrainSettings,
    hidden_dims: Sequence[int] = tuple(MODEL_CONFIG["hidden_dims"]),
    observer: Optional[Callable[[TrainStep], None]] = None,
) -> TrainResult:
    if len(cohort) == 0:
        raise ConfigError("manifest holds no slides")
    split = split_cohort(cohort, settings)
    records = split.train.records
    if not records:
        raise ConfigError(f"no training slides left after the validation/test split of {len(cohort)} slides")
    if not any(r.label == 1 for r in records):
        logger.warning("No positive training slides: training on negative slides only")

    rng = np.random.default_rng(settings.seed)
    with FeatureStore(split.train, include_ground_truth=False, prefetch=settings.prefetch,
                      max_cached_slides=TRAIN_CONFIG["max_cached_slides"]) as store:
        feature_dim = store.get(records[0]).feature_dim
        params = init_mlp(build_layer_dims(feature_dim, hidden_dims), seed=settings.seed)
        state = AdamState.fresh(params)

        with FeatureStore(split.validation, include_ground_truth=True, prefetch=False) as validation_store:
            validation_slides = [validation_store.get(r) for r in split.validation.records]

        log = TrainLog(
            framework=cfg,
            settings=settings,
            n_train_slides=len(records),
            n_validation_slides=len(validation_slides),
        )
        logger.info(
            f"Training (alpha={cfg.alpha}, beta={cfg.beta}) on {len(records)} slides, "
            f"{len(validation_slides)} validation slides, {settings.epochs} epochs, batch {settings.batch_size}"
        )

        best_auc, best_params = None, None
        for epoch in range(1, settings.epochs + 1):
            started = time.perf_counter()
            losses: dict = {0: [], 1: []}
            empty_positive_steps = 0
            order = rng.permutation(len(records))
            pending = store.prefetch(records[order[0]])
            for position, index in enumerate(order):
                record = records[index]
                slide = pending.result()
                if position + 1 < len(order):
                    pending = store.prefetch(records[order[position + 1]])
                if slide.feature_dim != params.input_dim:
                    raise ShapeError(
                        f"slide {record.slide_id} has {slide.feature_dim} features, model expects {params.input_dim}"
                    )

                indices = sample_batch_indices(len(slide), settings.batch_size, rng)
                x = slide.features[indices]
                pred = forward(params, x)
                proxy = assign_proxy_labels(pred, record.label, cfg)
                loss = batch_loss(pred, proxy, record.label, cfg)
                if not np.isfinite(loss.value):
                    raise NumericError(f"non-finite loss on slide {record.slide_id} in epoch {epoch}")
                grads = backward(params, x, loss.grad_wrt_pred)
                params, state = adam_step(params, grads, state, settings.learning_rate)

                losses[record.label].append(loss.value)
                if record.label == 1 and proxy.positive_indices.size == 0:
                    empty_positive_steps += 1
                if observer is not None:
                    observer(TrainStep(epoch, record, indices, pred, proxy, loss))

            validation_auc = _validation_auc(params, validation_slides)
            entry = EpochLog(
                epoch=epoch,
                mean_loss_negative=float(np.mean(losses[0])) if losses[0] else None,
                mean_loss_positive=float(np.mean(losses[1])) if losses[1] else None,
                validation_auc=validation_auc,
                empty_positive_steps=empty_positive_steps,
                seconds=time.perf_counter() - started,
            )
            log.epochs.append(entry)
            logger.info(
                f"Epoch {epoch}/{settings.epochs}: loss T=0 {entry.mean_loss_negative}, "
                f"T=1 {entry.mean_loss_positive}, validation AUC {validation_auc}"
            )

            if settings.keep_best_validation and validation_auc is not None:
                if best_auc is None or validation_auc > best_auc:
                    best_auc, best_params = validation_auc, params.copy()
                    log.best_epoch = epoch

        logger.debug(f"Feature store stats: {store.get_stats()}")

    if best_params is not None:
        logger.info(f"Keeping epoch {log.best_epoch} parameters (validation AUC {best_auc:.4f})")
        params = best_params
    return TrainResult(params=params, log=log, state=state)


def predict_slide(params: ModelParams, feature_file, slide_id: Optional[str] = None) -> SlidePrediction:
    """Score every patch of a slide once, in file order."""
    slide = read_feature_file(feature_file, slide_id=slide_id, include_ground_truth=False)
    if slide.feature_dim != params.input_dim:
        raise ShapeError(f"{feature_file} has {slide.feature_dim} features, model expects {params.input_dim}")
    return SlidePrediction(
        slide_id=slide.slide_id,
        patch_ids=slide.patch_ids,
        coords=slide.coords,
        scores=forward(params, slide.features),
    )


def write_train_log(path, log: TrainLog) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(log.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def load_annotated(cohort: Cohort) -> List[InstanceBatch]:
    """Slides of a cohort with their ground truth column, for evaluation."""
    with FeatureStore(cohort, include_ground_truth=True, prefetch=False) as store:
        return [store.get(record) for record in cohort.records]
