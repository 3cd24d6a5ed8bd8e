"""Train the full model and its three ablations on DotCatcher, then print the table.

Writes ``out_dir/ablation.csv`` (variant, mean, std) plus one run directory per variant.
"""
import sys
from pathlib import Path

from titrl.cli import main as cli_main

CONFIG = Path(__file__).resolve().parent / "configs" / "dotcatcher_ablation.txt"

if __name__ == "__main__":
    # extra command-line flags (e.g. --seeds 0,1,2 --out-dir runs/abl) are passed through
    sys.exit(cli_main(["ablate", "--config", str(CONFIG), *sys.argv[1:]]))
