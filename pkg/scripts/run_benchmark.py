#!/usr/bin/env python3
"""
Simulate a cohort and benchmark every feasible (alpha, beta) configuration on it
"""
import json
import sys
import os
from pathlib import Path

# Add project root to Python path
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.append(project_root)

from config.settings import BENCHMARK_CONFIG, SIMULATOR_CONFIG
from src.core.cli import main as cli_main

def run_benchmark(work_dir: Path = Path(project_root) / "runs" / "benchmark"):
    """Train and evaluate the grid on the default simulator cohort (simulated on first run)"""
    work_dir.mkdir(parents=True, exist_ok=True)

    run_path = work_dir / "run.json"
    run_path.write_text(json.dumps({
        "schema_version": 1,
        "framework": {"alpha": 0.2, "beta": 0.2},
        "simulator": {"schema_version": 1, "seed": SIMULATOR_CONFIG["seed"]},
        "paths": {"manifest": f"cohort/{SIMULATOR_CONFIG['manifest_name']}", "output_dir": "results"},
    }, indent=2) + "\n")

    return cli_main([
        "benchmark", "--config", str(run_path),
        "--step", str(BENCHMARK_CONFIG["grid_step"]),
        "--workers", str(BENCHMARK_CONFIG["max_workers"]),
    ])

if __name__ == "__main__":
    sys.exit(run_benchmark())
