"""
A latency budget from a measured table
======================================

Per-layer latency is modelled as a quadratic in the input and output pruning
ratios.  Here the table is synthesized from a known quadratic with 1% noise,
fitted back, and then used as the search constraint.
"""

import os
import tempfile

from dms.network import ModelSpec, build_supernet
from dms.resource import fit_latency_model, synthesize_latency_table, write_latency_table
from dms.search import PipelineConfig, search_and_export

MODEL = {"input_dim": 64, "input_search": {}, "layers": [
    {"kind": "linear", "out": 256, "search": {}},
    {"kind": "linear", "out": 256, "search": {}},
    {"kind": "linear", "out": 4, "act": "none"}]}

table = synthesize_latency_table(build_supernet(ModelSpec.model_validate(MODEL)), noise=0.01, seed=0)
for name, fit in fit_latency_model(table).items():
    print(f"{name}: R^2 {fit.r2:.4f}  coefficients {fit.coef.round(3).tolist()}")

with tempfile.TemporaryDirectory() as tmp:
    path = os.path.join(tmp, "latency.csv")
    write_latency_table(path, table)
    cfg = PipelineConfig.model_validate({
        "model": MODEL, "task": {"kind": "planted-features", "seed": 0},
        "resource": {"kind": "latency", "target_ratio": 0.4, "latency_table": path},
        "hyperparams": {"seed": 0, "lr_structure": 2e-3}})
    res = search_and_export(cfg)

print(f"predicted latency {res.counted * 1e6:.2f} us for a target of {res.r_final * 1e6:.2f} us")
print("widths:", res.desc.sizes())
