"""Session fixture: the desk-scale trained run shared by the acceptance
and analysis tests.

Training three seeds takes a while, so the seeds run as parallel
single-threaded subprocesses through the real CLI. Set MEMRL_ACCEPTANCE_DIR
to reuse a finished run across pytest invocations while iterating.
"""

from __future__ import annotations

import os
import subprocess
import sys
from pathlib import Path

import pytest
import yaml

ACCEPTANCE_CONFIG = {
    "env": {
        "family": "velocity",
        "train_range": [0.0, 3.0],
        "ood_range": [3.0, 4.0],
        "horizon": 64,
    },
    "encoder": {"d": 64, "n_layers": 4, "n_heads": 4, "d_ff": 256, "seq_len": 15},
    "ppo": {"minibatch_size": 256},
    "agent": {"init_log_std": -1.0},
    "train": {
        "total_timesteps": 2_000_000,
        "tasks_per_batch": 16,
        "episodes_per_task": 2,
        "eval_interval": 32768,
        "eval_tasks": 20,
        "eval_episodes": 2,
        "seeds": [0, 1, 2],
        "stop_return": -12.0,
    },
}

SEEDS = ACCEPTANCE_CONFIG["train"]["seeds"]


def _train_seed(cfg_path: Path, out_dir: Path, seed: int) -> subprocess.Popen:
    env = dict(os.environ)
    env.update(OPENBLAS_NUM_THREADS="1", OMP_NUM_THREADS="1", MKL_NUM_THREADS="1")
    log = open(out_dir / f"train_seed{seed}.log", "w")
    return subprocess.Popen(
        [sys.executable, "-m", "memrl.cli", "train",
         "--config", str(cfg_path), "--out", str(out_dir / f"seed{seed}"),
         "--seed", str(seed)],
        env=env, stdout=log, stderr=subprocess.STDOUT,
    )


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory) -> Path:
    cached = os.environ.get("MEMRL_ACCEPTANCE_DIR")
    if cached:
        root = Path(cached)
        if all((root / f"seed{s}" / f"checkpoint_seed{s}.bin").exists() for s in SEEDS):
            return root
        root.mkdir(parents=True, exist_ok=True)
    else:
        root = tmp_path_factory.mktemp("acceptance_run")
    cfg_path = root / "config.yaml"
    cfg_path.write_text(yaml.safe_dump(ACCEPTANCE_CONFIG))
    procs = [_train_seed(cfg_path, root, s) for s in SEEDS]
    codes = [p.wait() for p in procs]
    assert all(c == 0 for c in codes), f"training subprocesses failed: {codes}"
    return root
