"""Run the three reference configurations through the CLI and print their summaries.

    python3 scripts/reproduce_tables.py [--out runs] [--threads 1]
"""

import argparse
import json
import sys
import time
from pathlib import Path

from wickpath.experiments.cli import main as cli

ROOT = Path(__file__).resolve().parent.parent
RUNS = [
    ("simulate", "table1.cfg", "walrasian_path"),
    ("mc", "table1.cfg", "walrasian_mc"),
    ("compare-ex3", "table2.cfg", "ex3_compare"),
    ("mc", "table2.cfg", "ex3_mc"),
    ("pi-compare", "table3.cfg", "pareto_pi_compare"),
]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=ROOT / "runs")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args(argv)
    for cmd, cfg, name in RUNS:
        out = args.out / name
        start = time.perf_counter()
        code = cli([cmd, "--config", str(ROOT / "configs" / cfg), "--out", str(out), "--threads", str(args.threads)])
        print(f"{cmd:12s} {cfg:11s} exit={code} {time.perf_counter() - start:6.1f}s -> {out}")
        if code:
            return code
        summary = json.loads((out / "summary.json").read_text())
        print(json.dumps(summary, indent=2, sort_keys=True)[:2000])
    return 0


if __name__ == "__main__":
    sys.exit(main())
