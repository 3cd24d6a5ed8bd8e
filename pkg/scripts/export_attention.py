"""Dump inner and outer attention maps of a trained checkpoint as CSV and PGM files.

    python scripts/export_attention.py runs/abl/enhanced/seed_0/model.tit attention/ [--steps 5]
"""
import sys

from titrl.cli import main as cli_main

if __name__ == "__main__":
    if len(sys.argv) < 3:
        sys.exit(__doc__)
    checkpoint, out_dir, *rest = sys.argv[1:]
    sys.exit(cli_main(["visualize", "--checkpoint", checkpoint, "--out-dir", out_dir, *rest]))
