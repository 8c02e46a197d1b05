"""First-order-condition scan and pricing-operator defect study."""

import sys
from pathlib import Path

from wickpath.experiments.cli import main as cli

ROOT = Path(__file__).resolve().parent.parent

if __name__ == "__main__":
    out = ROOT / "runs"
    code = cli(["foc-scan", "--config", str(ROOT / "configs" / "foc_scan.cfg"), "--out", str(out / "foc_scan")])
    code = code or cli(["mgh-defect", "--config", str(ROOT / "configs" / "mgh_defect.cfg"), "--out", str(out / "mgh_defect")])
    for name in ("foc_scan/summary.json", "mgh_defect/defect.csv"):
        if (out / name).exists():
            print(f"== {name}\n{(out / name).read_text()}")
    sys.exit(code)
