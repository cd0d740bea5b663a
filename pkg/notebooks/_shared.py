"""Benchmark and desk-trained model shared by the demo scripts.

The first call trains with the desk preset (a few CPU minutes) and caches
the checkpoint under notebooks/artifacts/; later calls load it.
"""
from pathlib import Path

from termprobe import ToyEncoderConfig, TrainingConfig, build_benchmark, load_checkpoint, run_curriculum, \
    save_checkpoint

ARTIFACTS = Path(__file__).parent / "artifacts"
CHECKPOINT = ARTIFACTS / "desk.ckpt"


def benchmark():
    return build_benchmark(ToyEncoderConfig())


def desk_model(bench, log_dir=None):
    if CHECKPOINT.exists():
        return load_checkpoint(CHECKPOINT)
    result = run_curriculum(bench.train, TrainingConfig.desk(), heads=8)
    ARTIFACTS.mkdir(exist_ok=True)
    save_checkpoint(CHECKPOINT, result.params)
    if log_dir is not None:
        result.log.write(log_dir)
    return result.params
