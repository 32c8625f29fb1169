import argparse
from pathlib import Path

import pandas as pd

from src.evaluation import read_metrics_csv, summarize

EXPERIMENTS = ["diit", "eval", "ablation", "sweep", "plug_study", "compat"]


def generate_summary(run_dir: str):
    run_path = Path(run_dir)
    print(f"--- Transfer Lab Report ({run_path}) ---")

    found = [name for name in EXPERIMENTS if (run_path / name / "metrics.csv").exists()]
    if not found:
        print("No metrics available.")
        return

    for name in found:
        records = read_metrics_csv(run_path / name / "metrics.csv")
        print(f"\n[{name}] {len(records)} rows")
        print(summarize(records).to_string(index=False, float_format=lambda v: f"{v:.6f}"))

    # Per-period curves of the plug study, one column per curve
    if "plug_study" in found:
        frame = pd.read_csv(run_path / "plug_study" / "metrics.csv")
        curves = frame.pivot_table(index="period", columns="variant", values="auc", aggfunc="mean")
        print("\n[Plug study AUC by period]")
        print(curves.to_string(float_format=lambda v: f"{v:.6f}"))

    probe = run_path / "reprs" / "probe.csv"
    if probe.exists():
        print("\n[Domain probe accuracy]")
        print(pd.read_csv(probe).to_string(index=False))


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("run_dir", help="Run directory (<output_dir>/<run id>)")
    args = parser.parse_args()

    generate_summary(args.run_dir)
