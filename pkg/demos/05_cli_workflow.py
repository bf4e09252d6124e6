"""
The command-line workflow
=========================

Writes a small run configuration, then drives the ``dms`` command: search,
evaluate the retrained model, re-export the architecture and summarize.
Each step is the same call the shell command makes.
"""

import json
import os
import tempfile

from dms.cli import run_command

config = {
    "schema_version": "dms.run/1",
    "model": {"input_dim": 16, "input_search": {}, "layers": [
        {"kind": "linear", "out": 64, "search": {}},
        {"kind": "linear", "out": 64, "search": {}},
        {"kind": "linear", "out": 3, "act": "none"}]},
    "task": {"kind": "planted-features", "input_dim": 16, "informative": 3, "classes": 3,
             "n_train": 1000, "n_val": 200, "n_test": 400, "seed": 1},
    "resource": {"kind": "macs", "target_ratio": 0.3},
    "hyperparams": {"search_epochs": 6, "retrain_epochs": 10, "lr_structure": 0.01},
    "compare_uniform": True,
}

with tempfile.TemporaryDirectory() as tmp:
    cfg = os.path.join(tmp, "run.json")
    with open(cfg, "w") as fh:
        json.dump(config, fh)
    run = os.path.join(tmp, "run")
    steps = [
        ["search", "--config", cfg, "--out", run],
        ["eval", "--run", run],
        ["export", "--checkpoint", os.path.join(run, "supernet.npz"), "--out", os.path.join(tmp, "arch.json")],
        ["report", run],
    ]
    for argv in steps:
        print("$ dms", " ".join(os.path.relpath(a, tmp) if a.startswith(tmp) else a for a in argv))
        code = run_command(argv)
        print(f"(exit {code})\n")
    print("run directory:", sorted(os.listdir(run)))
