#!/usr/bin/env python3
"""Compare simulated predictors of increasing boundary jitter.

Runs the synthetic stability benchmark for several jitter levels and
renders the pooled metrics as one table, which is the workflow for
comparing real methods from their metric report files.

Example:
    python3 scripts/compare_predictors.py --out /tmp/cmp --jitters 0,0.15,0.4
"""

from __future__ import annotations

import argparse
import subprocess
import sys
from pathlib import Path

from cohseg import codecs
from cohseg.cli import render_table


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--jitters", default="0,0.2,0.5")
    ap.add_argument("--size", type=int, default=96)
    ap.add_argument("--length", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    script = Path(__file__).with_name("run_synth_benchmark.py")
    rows = []
    for jitter in (float(j) for j in args.jitters.split(",")):
        method = f"jitter={jitter:g}"
        run_dir = args.out / f"jitter_{jitter:g}"
        subprocess.run(
            [sys.executable, str(script), "--out", str(run_dir),
             "--size", str(args.size), "--length", str(args.length),
             "--seed", str(args.seed), "--jitter", str(jitter),
             "--method", method],
            check=True, stdout=subprocess.DEVNULL,
        )
        rows.append(codecs.read_keyvalues(run_dir / "metrics.txt"))

    table = render_table(rows)
    print(table)
    (args.out / "comparison.txt").write_text(table + "\n", encoding="utf-8")


if __name__ == "__main__":
    main()
