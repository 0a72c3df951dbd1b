"""Command-line entry points: gen-data, train, predict, uq, eval.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric divergence.
The GWF_SEED environment variable replaces the default seed of every
command that takes one (an explicit --seed still wins).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .data import DataError, NormStats, gen_synthetic, load_dataset, save_dataset
from .model import GeometryWaveformer, preset
from .rollout import predict_steps, progressive_predict, to_numpy
from .train import TrainConfig, check_lengths, evaluate, fit, relative_mse
from .uq import EnsembleSpec, ensemble_run, parse_probe, write_pdfs, write_stats
from . import tensor as T

log = logging.getLogger("geowaveformer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(ValueError):
    pass


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("GWF_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"GWF_SEED must be an integer, got {env!r}") from None


def _grid(text: str) -> tuple:
    try:
        vals = tuple(int(v) for v in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 4,4,8 (got {text!r})") from None
    if len(vals) == 1:
        vals = vals * 3
    if len(vals) != 3 or min(vals) < 2:
        raise argparse.ArgumentTypeError(f"grid needs three sizes >= 2 (got {text!r})")
    return vals


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="geowaveformer", description=__doc__, formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic vessel dataset", formatter_class=fmt)
    g.add_argument("--kind", choices=["tube", "bifurcation"], default="tube", help="centreline shape")
    g.add_argument("--points", type=int, default=64, help="points on the centreline")
    g.add_argument("--steps", type=int, default=40, help="saved time steps per trajectory")
    g.add_argument("--trajs", type=int, default=32, help="number of trajectories")
    g.add_argument("--test", type=int, default=5, help="trajectories held out for testing (27/5 at 32)")
    g.add_argument("--dt", type=float, default=0.04, help="time between saved steps (s)")
    g.add_argument("--seed", type=int, default=None, help="generator seed (default: GWF_SEED or 0)")
    g.add_argument("--out", required=True, help="output directory")

    t = sub.add_parser("train", help="train one model per channel (or one joint model)", formatter_class=fmt)
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="output directory for checkpoints and loss history")
    t.add_argument("--lr", type=float, default=1e-3, help="initial Adam learning rate (range 1e-4..1e-3)")
    t.add_argument("--epochs", type=int, default=100, help="training epochs")
    t.add_argument("--decay", type=float, default=0.6, help="learning-rate factor applied every --decay-every epochs")
    t.add_argument("--decay-every", type=int, default=5, help="epochs between learning-rate decays")
    t.add_argument("--k", type=int, default=10, help="input window length k")
    t.add_argument("--n", type=int, default=20, help="roll-out horizon n used in the loss")
    t.add_argument("--preset", choices=["small", "paper"], default="small", help="model size preset")
    t.add_argument("--grid", type=_grid, default=None, help="latent grid S1,S2,S3 (preset default: small 4,4,8; paper 16,16,16)")
    t.add_argument("--wavelet", default=None, help="Daubechies family db1..db10 (preset default: small db2; paper db4)")
    t.add_argument("--channels", default=None, help="comma-separated channels (default: all)")
    t.add_argument("--joint", action="store_true", help="one model for all channels instead of one per channel")
    t.add_argument("--teacher-forcing", action="store_true", help="feed true fields instead of predictions (ablation)")
    t.add_argument("--seed", type=int, default=None, help="initialisation/shuffle seed (default: GWF_SEED or 0)")

    pr = sub.add_parser("predict", help="roll out a trained model", formatter_class=fmt)
    pr.add_argument("--model", required=True, help="checkpoint (.gwf)")
    pr.add_argument("--data", required=True, help="dataset directory")
    pr.add_argument("--mode", choices=["window", "progressive"], default="window",
                    help="window: start from u_0..u_{k-1}; progressive: start from u_0 only")
    pr.add_argument("--horizon", type=int, default=20, help="number of predicted steps")
    pr.add_argument("--split", default="test", help="which split's trajectories to predict")
    pr.add_argument("--out", required=True, help="output directory")

    u = sub.add_parser("uq", help="Monte Carlo initial-condition uncertainty", formatter_class=fmt)
    u.add_argument("--model", required=True, help="checkpoint (.gwf)")
    u.add_argument("--data", required=True, help="dataset directory")
    u.add_argument("--alpha", type=float, default=0.01, help="noise std as a fraction of the initial field's std")
    u.add_argument("--ensemble", type=int, default=100, help="ensemble size E")
    u.add_argument("--horizon", type=int, default=20, help="progressive roll-out length")
    u.add_argument("--probes", default="", help='comma-separated probes "<point>@t<step>", e.g. "12@t20"')
    u.add_argument("--bins", type=int, default=30, help="histogram bins per probe")
    u.add_argument("--traj", type=int, default=None, help="trajectory providing u_0 (default: first test one)")
    u.add_argument("--seed", type=int, default=None, help="noise seed (default: GWF_SEED or 0)")
    u.add_argument("--out", required=True, help="output directory")

    e = sub.add_parser("eval", help="train/test relative MSE table", formatter_class=fmt)
    e.add_argument("--model", required=True, help="checkpoint (.gwf)")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--n", type=int, default=None, help="roll-out horizon (default: the training horizon)")
    e.add_argument("--out", required=True, help="output directory")
    return p


# -- helpers -----------------------------------------------------------------

def load_model(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing checkpoint {path}")
    model, meta = GeometryWaveformer.load(path)
    stats = NormStats.from_dict(meta["norm"])
    return model, meta, stats


def _dataset_for(meta: dict, data_dir):
    ds = load_dataset(data_dir)
    missing = [c for c in meta["channels"] if c not in ds.channels]
    if missing:
        raise DataError(f"dataset {data_dir} lacks channel(s) {missing} required by the model")
    return ds.select_channels(meta["channels"])


def eval_rows(model, ds, stats, k: int, n: int, name: str = "") -> list:
    """Rows ``[data set, train error %, test error %]``."""
    train = evaluate(model, ds, stats, "train", k, n) if ds.splits.get("train") else float("nan")
    test = evaluate(model, ds, stats, "test", k, n) if ds.splits.get("test") else float("nan")
    return [[name, train, test]]


def write_table(rows: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["Data set", "Train error", "Test error"])
        for r in rows:
            w.writerow([r[0], f"{r[1]:.3f}", f"{r[2]:.3f}"])


def format_table(rows: list) -> str:
    head = f"{'Data set':<24}{'Train error':>14}{'Test error':>14}"
    lines = [head, "-" * len(head)]
    lines += [f"{r[0]:<24}{r[1]:>13.3f}%{r[2]:>13.3f}%" for r in rows]
    return "\n".join(lines)


# -- commands ------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    ds = gen_synthetic(args.kind, args.points, args.steps, args.trajs, _seed(args), dt=args.dt, n_test=args.test)
    save_dataset(ds, args.out)
    print(f"wrote {ds.n_trajectories} trajectories x {ds.n_steps} steps x {ds.n_points} points "
          f"({', '.join(ds.channels)}) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    check_lengths(ds, args.k, args.n)
    chans = ds.channels if args.channels is None else [c.strip() for c in args.channels.split(",")]
    unknown = [c for c in chans if c not in ds.channels]
    if unknown:
        raise UsageError(f"unknown channel(s) {unknown}; dataset has {ds.channels}")
    groups = [chans] if args.joint else [[c] for c in chans]
    seed = _seed(args)
    cfg = TrainConfig(lr=args.lr, decay=args.decay, decay_every=args.decay_every, epochs=args.epochs,
                      rollout=args.n, window=args.k, seed=seed, teacher_forcing=args.teacher_forcing)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for group in groups:
        sub = ds.select_channels(group)
        over = {"window": args.k, "field_channels": len(group), "seed": seed, "channel_names": list(group)}
        if args.grid is not None:
            over["resolution"] = args.grid
        if args.wavelet is not None:
            over["wavelet"] = args.wavelet
        model = GeometryWaveformer(preset(args.preset, **over), sub.cloud)
        tag = "_".join(group)
        t0 = time.perf_counter()
        model, history, stats = fit(model, sub, cfg, history_path=out / f"history_{tag}.csv")
        elapsed = time.perf_counter() - t0
        ckpt = out / f"model_{tag}.gwf"
        model.save(ckpt, {"norm": stats.to_dict(), "channels": list(group), "train": cfg.to_dict(),
                          "elapsed_s": elapsed})
        rows += eval_rows(model, sub, stats, args.k, args.n, tag)
        print(f"saved {ckpt} ({model.num_parameters()} parameters, {elapsed:.1f}s)")
    print(format_table(rows))
    write_table(rows, out / "train_summary.csv")
    return EXIT_OK


def cmd_predict(args) -> int:
    if args.horizon < 1:
        raise UsageError("--horizon must be >= 1")
    model, meta, stats = load_model(args.model)
    ds = _dataset_for(meta, args.data)
    if args.split not in ds.splits:
        raise UsageError(f"unknown split {args.split!r}; have {sorted(ds.splits)}")
    k = model.config.window
    start = 1 if args.mode == "progressive" else k
    if ds.n_steps < start:
        raise DataError(f"trajectories have {ds.n_steps} steps, need at least {start}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    errs = np.full((len(ds.splits[args.split]), args.horizon), np.nan)
    for r, i in enumerate(ds.splits[args.split]):
        x = stats.apply(ds.fields[i])
        with T.no_grad():
            if args.mode == "window":
                preds = predict_steps(model, [np.ascontiguousarray(f) for f in x[:k]], args.horizon)
            else:
                preds = progressive_predict(model, np.ascontiguousarray(x[0]), args.horizon, k)
        pred = stats.invert(to_numpy(preds))
        td = out / f"traj_{i}"
        td.mkdir(exist_ok=True)
        for j in range(args.horizon):
            t = start + j
            lines = ["point_id," + ",".join(ds.channels)]
            lines += [f"{p}," + ",".join(repr(float(v)) for v in pred[j, p]) for p in range(ds.n_points)]
            (td / f"step_{t}.csv").write_text("\n".join(lines) + "\n")
            if t < ds.n_steps:
                errs[r, j] = relative_mse(pred[j], ds.fields[i, t])
    with open(out / "errors.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "rel_mse_pct"])
        for j in range(args.horizon):
            col = errs[:, j]
            w.writerow([start + j, repr(float(np.mean(col))) if np.all(np.isfinite(col)) else "nan"])
    print(f"predicted {args.horizon} steps ({args.mode}) for {errs.shape[0]} trajectories -> {out}")
    return EXIT_OK


def cmd_uq(args) -> int:
    probes = [parse_probe(s) for s in args.probes.split(",") if s.strip()] if args.probes else []
    spec = EnsembleSpec(size=args.ensemble, alpha=args.alpha, seed=_seed(args), bins=args.bins)
    if args.horizon < 1:
        raise UsageError("--horizon must be >= 1")
    for point, step in probes:
        if not 1 <= step <= args.horizon:
            raise UsageError(f"probe step t{step} outside 1..{args.horizon}")
    model, meta, stats = load_model(args.model)
    ds = _dataset_for(meta, args.data)
    traj = args.traj if args.traj is not None else (ds.splits.get("test") or [0])[0]
    if not 0 <= traj < ds.n_trajectories:
        raise UsageError(f"--traj {traj} outside 0..{ds.n_trajectories - 1}")
    for point, _ in probes:
        if not 0 <= point < ds.n_points:
            raise UsageError(f"probe point {point} outside 0..{ds.n_points - 1}")
    fs = ensemble_run(model, ds.fields[traj, 0], spec, args.horizon, stats, probes)
    out = Path(args.out)
    write_stats(fs, out, ds.channels)
    write_pdfs(fs, out, ds.channels)
    (out / "uq_summary.json").write_text(json.dumps({
        "trajectory": traj, "alpha": spec.alpha, "ensemble": spec.size, "seed": spec.seed,
        "members_used": fs.n_members, "members_excluded": fs.n_excluded, "horizon": args.horizon,
        "probes": [f"{p}@t{s}" for p, s in probes]}, indent=1))
    print(f"ensemble of {fs.n_members} (excluded {fs.n_excluded}); max std {float(fs.std.max()):.4g} -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta, stats = load_model(args.model)
    ds = _dataset_for(meta, args.data)
    k = model.config.window
    n = args.n if args.n is not None else int(meta.get("train", {}).get("rollout", 20))
    check_lengths(ds, k, n)
    name = "_".join(meta["channels"])
    kind = ds.meta.get("generator", {}).get("kind")
    rows = eval_rows(model, ds, stats, k, n, f"{kind} {name}" if kind else name)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_table(rows, out / "eval.csv")
    print(format_table(rows))
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "predict": cmd_predict, "uq": cmd_uq, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
