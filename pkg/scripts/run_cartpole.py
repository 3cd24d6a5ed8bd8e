"""Train Enhanced TIT with PPO on CartPole for every configured seed and score it.

    python scripts/run_cartpole.py                 # scripts/configs/cartpole_acceptance.txt
    python scripts/run_cartpole.py --config my.txt --parallel 5

Each seed writes metrics.csv, model.tit and result.json under ``out_dir/seed_<n>``.
The summary counts seeds whose 100-episode greedy mean reaches 475.
"""
import argparse
import json
import sys
from pathlib import Path

from titrl.cli import main as cli_main
from titrl.config import parse_config

HERE = Path(__file__).resolve().parent
THRESHOLD = 475.0


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(HERE / "configs" / "cartpole_acceptance.txt"))
    ap.add_argument("--out-dir")
    ap.add_argument("--parallel", default="1")
    args = ap.parse_args(argv)

    flags = ["--config", args.config, "--parallel", args.parallel]
    if args.out_dir:
        flags += ["--out-dir", args.out_dir]
    code = cli_main(["train", *flags])
    if code:
        return code

    cfg = parse_config(args.config, {"out_dir": args.out_dir} if args.out_dir else None)
    passed = 0
    for seed in cfg.seeds:
        result = json.loads((Path(cfg.out_dir) / f"seed_{seed}" / "result.json").read_text())
        hit = result["mean"] >= THRESHOLD
        passed += hit
        print(f"seed {seed}: {result['mean']:.2f} +- {result['std']:.2f}  {'>=' if hit else '<'} {THRESHOLD:g}")
    print(f"{passed}/{len(cfg.seeds)} seeds reach {THRESHOLD:g}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
