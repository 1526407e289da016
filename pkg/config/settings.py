"""
Configuration settings for the weakly supervised MIL training engine
"""
import os
from pathlib import Path
from typing import Optional

# Base directory
BASE_DIR = Path(__file__).parent.parent

# Environment variables
def get_env_var(key: str, default: Optional[str] = None) -> Optional[str]:
    """Get environment variable with optional default"""
    return os.getenv(key, default)

# Training settings (batch of 150 patches, 20 epochs, Adam at 1e-4)
TRAIN_CONFIG = {
    "learning_rate": 1e-4,
    "epochs": 20,
    "batch_size": 150,
    "seed": 0,
    "validation_fraction": 0.15,
    "test_fraction": 0.20,
    "keep_best_validation": False,
    "held_out_locations": [],
    "prefetch": True,
    "max_cached_slides": 64
}

# Model settings
MODEL_CONFIG = {
    "hidden_dims": [32, 16]
}

# Proxy labeling settings
PROXY_CONFIG = {
    "count_epsilon": 1e-9
}

# Loss settings
LOSS_CONFIG = {
    "clamp_epsilon": 1e-7
}

# Adam settings ("default momentum parameters")
ADAM_CONFIG = {
    "beta1": 0.9,
    "beta2": 0.999,
    "epsilon": 1e-8
}

# Simulator settings
SIMULATOR_CONFIG = {
    "n_slides": 200,
    "positive_fraction": 0.5,
    "patches_per_slide": 150,
    "feature_dim": 8,
    "tumor_fraction_range": [0.2, 0.4],
    "class_separation": 2.0,
    "noise_sigma": 1.0,
    "seed": 0,
    "manifest_name": "manifest.jsonl",
    "features_dir": "features"
}

# Evaluation settings
EVAL_CONFIG = {
    "per_slide": True
}

# Benchmark settings
BENCHMARK_CONFIG = {
    "grid_step": 0.2,
    "max_workers": int(get_env_var("MIL_BENCHMARK_WORKERS", "1")),
    "csv_name": "benchmark.csv",
    "summary_name": "benchmark_summary.json",
    "csv_columns": ["alpha", "beta", "auc", "precision", "recall", "threshold"],
    "out_of_location_column": "out_of_location_auc"
}

# Logging settings
LOGGING_CONFIG = {
    "log_file": get_env_var("MIL_LOG_FILE"),
    "log_level": get_env_var("MIL_LOG_LEVEL", "INFO"),
    "log_format": "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    "file_mode": "a"
}

# CLI settings
CLI_CONFIG = {
    "prog_name": "mil",
    "exit_codes": {
        "success": 0,
        "config": 2,
        "io": 3,
        "numeric": 4
    },
    "checkpoint_name": "checkpoint.json",
    "train_log_name": "train_log.json",
    "eval_report_name": "eval_report.json"
}
