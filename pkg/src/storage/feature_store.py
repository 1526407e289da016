"""
Feature store for slide feature tables with caching and background prefetch.
Provides thread-safe loading so the next slide can be read while the current
training step runs.
"""

import logging
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from typing import Any, Dict, Optional

from src.models.pydantic_models import SlideRecord
from src.storage.manifest_utils import Cohort, InstanceBatch, read_feature_file

logger = logging.getLogger(__name__)


class FeatureStore:
    """Thread-safe cache of loaded slides, keyed by slide_id."""

    def __init__(self, cohort: Cohort, include_ground_truth: bool = False, prefetch: bool = True,
                 max_cached_slides: Optional[int] = None):
        self.cohort = cohort
        self.include_ground_truth = include_ground_truth
        self.max_cached_slides = max_cached_slides
        self._cache: Dict[str, InstanceBatch] = {}
        self._lock = threading.Lock()
        self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix="feature-prefetch") if prefetch else None
        self._stats = {
            'slides_loaded': 0,
            'cache_hits': 0
        }

    def get(self, record: SlideRecord) -> InstanceBatch:
        """Get a slide's patches, loading it on a cache miss."""
        with self._lock:
            cached = self._cache.get(record.slide_id)
            if cached is not None:
                self._stats['cache_hits'] += 1
                return cached

        batch = read_feature_file(
            self.cohort.feature_path(record),
            slide_id=record.slide_id,
            include_ground_truth=self.include_ground_truth,
        )
        if len(batch) != record.n_patches:
            logger.warning(f"Slide {record.slide_id}: manifest lists {record.n_patches} patches, file has {len(batch)}")

        with self._lock:
            self._stats['slides_loaded'] += 1
            if self.max_cached_slides is None or len(self._cache) < self.max_cached_slides:
                self._cache[record.slide_id] = batch
        logger.debug(f"Loaded slide {record.slide_id} ({len(batch)} patches)")
        return batch

    def prefetch(self, record: SlideRecord) -> Future:
        """Start loading a slide; the returned future resolves to its patches."""
        if self._executor is None:
            future: Future = Future()
            try:
                future.set_result(self.get(record))
            except Exception as e:
                future.set_exception(e)
            return future
        return self._executor.submit(self.get, record)

    def clear_cache(self):
        """Drop all cached slides."""
        with self._lock:
            self._cache.clear()
            logger.info("Cleared feature store cache")

    def get_stats(self) -> Dict[str, Any]:
        """Get cache statistics."""
        with self._lock:
            return {
                'cached_slides': len(self._cache),
                'include_ground_truth': self.include_ground_truth,
                **self._stats
            }

    def close(self):
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
