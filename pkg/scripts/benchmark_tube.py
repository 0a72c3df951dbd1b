"""Train the small model on the synthetic tube and report held-out relative MSE.

    python scripts/benchmark_tube.py --epochs 100 --out runs/bench
"""

import argparse
import json
import logging
from pathlib import Path

from geowaveformer.benchmark import run_tube_benchmark


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channel", default="pressure", choices=["pressure", "flow"])
    p.add_argument("--preset", default="small", choices=["small", "paper"])
    p.add_argument("--out", default="runs/bench")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = run_tube_benchmark(args.epochs, args.seed, args.channel, args.preset, history_path=out / "history.csv")
    res["model"].save(out / "model.gwf", {"norm": res["stats"].to_dict(), "channels": [args.channel]})
    summary = {k: res[k] for k in ("untrained_test_pct", "train_pct", "test_pct", "improvement", "runtime_s", "epochs")}
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary, indent=1))


if __name__ == "__main__":
    main()
