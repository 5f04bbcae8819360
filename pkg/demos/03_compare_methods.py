"""
Six training methods on one task
================================

Writes one JSON config per method, runs them through ``dgs-bench compare``
and draws the loss curves. Output goes to ./demo_out.
"""

import json
from pathlib import Path

from dgs.bench import main

out = Path("demo_out")
configs = out / "configs"
configs.mkdir(parents=True, exist_ok=True)

task = {"name": "logistic", "n_features": 20, "n_samples": 1000, "separation": 2.5, "seed": 0}
common = {"momentum": 0.7, "learning_rate": 1.0, "batch_size": 8, "epochs": 5, "task": task,
          "seed": 0, "eval_every": 25}
methods = [("msgd", 1), ("asgd", 8), ("gd_async", 8), ("dgc_async", 8), ("dgs_residual", 8), ("dgs_samomentum", 8)]
for i, (method, workers) in enumerate(methods):
    cfg = dict(common, method=method, workers=workers)
    if method not in ("msgd", "asgd"):
        cfg["drop_ratio"] = 99.0
    (configs / f"{i}_{method}.json").write_text(json.dumps(cfg, indent=2))

main(["compare", "--configs", str(configs), "--out", str(out / "runs")])

csvs = []
for p in sorted((out / "runs").glob("*.csv")):
    if p.name != "ranking.csv":
        csvs += ["--input", str(p)]
main(["plot", *csvs, "--out", str(out / "loss.svg"), "--x", "time", "--y", "loss"])
main(["plot", *csvs, "--out", str(out / "bytes.svg"), "--x", "step", "--y", "bytes"])
print("wrote", out / "loss.svg", "and", out / "bytes.svg")
