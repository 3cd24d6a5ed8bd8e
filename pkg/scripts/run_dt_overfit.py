"""Collect expert DotCatcher episodes and fit the return-conditioned model to them.

    python scripts/run_dt_overfit.py [--episodes 10] [--work-dir runs/dt_overfit]

The final line reports the greedy action accuracy on the training windows.
"""
import argparse
import sys
from pathlib import Path

from titrl.cli import main as cli_main
from titrl.config import parse_config

CONFIG = Path(__file__).resolve().parent / "configs" / "dotcatcher_dt.txt"


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--episodes", default="10")
    ap.add_argument("--work-dir", default="runs/dt_overfit")
    args = ap.parse_args(argv)

    work = Path(args.work_dir)
    work.mkdir(parents=True, exist_ok=True)
    data = work / "expert.eps"
    frame = str(parse_config(CONFIG).frame_size)
    code = cli_main(["collect", "--episodes", args.episodes, "--frame-size", frame, "--out", str(data)])
    if code:
        return code
    return cli_main(["dt-train", "--config", str(CONFIG), "--data", str(data), "--out-dir", str(work)])


if __name__ == "__main__":
    sys.exit(main())
