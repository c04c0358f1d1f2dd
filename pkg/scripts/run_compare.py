"""Generate the phantom dataset (if needed) and run the protocol comparison.

    python3 scripts/run_compare.py --out runs/compare --seeds 0,1,2
"""

import argparse
import logging
import time
from pathlib import Path

from cmseg.compare import compare
from cmseg.config import load_config
from cmseg.data import Manifest
from cmseg.phantom import generate_dataset

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default=str(ROOT / "configs" / "compare.ini"))
    ap.add_argument("--data", default="runs/phantom48")
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--out", default="runs/compare")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--set", action="append", default=[])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    manifest_path = Path(args.data) / "manifest.txt"
    if not manifest_path.exists():
        generate_dataset(args.data, args.data_seed)
    cfg = load_config(args.config, [f"manifest={manifest_path}", *args.set])
    t0 = time.perf_counter()
    rows = compare(cfg, Manifest.load(manifest_path), [int(s) for s in args.seeds.split(",")], args.out)
    for row in rows:
        print(f"{row['protocol']:>24}  B {row['mean_dice_b']:.4f}  A {row['mean_dice_a']:.4f}")
    print(f"total {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
