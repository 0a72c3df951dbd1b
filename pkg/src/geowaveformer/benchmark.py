"""The synthetic end-to-end benchmark: train on the helical tube, score held-out roll-outs."""

from __future__ import annotations

import time

from .data import NormStats, gen_synthetic
from .model import GeometryWaveformer, preset
from .train import TrainConfig, evaluate, fit


def run_tube_benchmark(epochs: int = 100, seed: int = 0, channel: str = "pressure", model_preset: str = "small",
                       history_path=None, progress=None) -> dict:
    """64 points, 40 steps, 32 trajectories (27 train / 5 test), k=10, n=20.

    Returns the untrained and trained held-out relative MSE (%) and the
    wall time of data generation plus training plus evaluation.
    """
    t0 = time.perf_counter()
    ds = gen_synthetic("tube", n_points=64, n_steps=40, n_trajectories=32, seed=seed)
    ds = ds.select_channels([channel])
    cfg = TrainConfig(epochs=epochs, seed=seed)
    model = GeometryWaveformer(preset(model_preset, window=cfg.window, seed=seed, channel_names=[channel]),
                               ds.cloud)
    stats = NormStats.from_dataset(ds, "train")
    untrained = evaluate(model, ds, stats, "test", cfg.window, cfg.rollout)
    model, history, stats = fit(model, ds, cfg, stats, history_path=history_path, progress=progress)
    trained = evaluate(model, ds, stats, "test", cfg.window, cfg.rollout)
    train_err = evaluate(model, ds, stats, "train", cfg.window, cfg.rollout)
    return {
        "untrained_test_pct": untrained,
        "train_pct": train_err,
        "test_pct": trained,
        "improvement": untrained / trained if trained > 0 else float("inf"),
        "runtime_s": time.perf_counter() - t0,
        "epochs": epochs,
        "history": history,
        "model": model,
        "stats": stats,
        "dataset": ds,
    }
