"""
Width search against a uniform baseline
=======================================

The planted-features task hides the label in a few of 64 input coordinates.
A 64-256-256-4 supernet is searched down to a quarter of its MACs, retrained
from scratch, and compared with shrinking every searchable width by the same
factor at an equal budget.
"""

from dms.search import PipelineConfig, retrain, search_and_export, uniform_baseline

cfg = PipelineConfig.model_validate({
    "model": {"input_dim": 64, "input_search": {}, "layers": [
        {"kind": "linear", "out": 256, "search": {}},
        {"kind": "linear", "out": 256, "search": {}},
        {"kind": "linear", "out": 4, "act": "none"}]},
    "task": {"kind": "planted-features", "seed": 0},
    "resource": {"kind": "macs", "target_ratio": 0.25},
    "hyperparams": {"seed": 0, "lr_structure": 2e-3, "retrain_epochs": 40},
})

res = search_and_export(cfg)
for r in res.state.records:
    print(f"epoch {r['epoch']}  {r['phase']:<10} task loss {r['task_loss']:.3f}  "
          f"r_c {r['r_c']:9.0f}  r_t {r['r_t']:9.0f}")
print(f"exported MACs {res.counted:.0f} for a target of {res.r_final:.0f}")
print("searched widths:", res.desc.sizes())

# The most important inputs should include the planted ones.
informative = sorted(res.data.meta["informative"])
rank = res.model.ops["input"].importance.argsort()[::-1].argsort()
print("planted inputs", informative, "have importance ranks", sorted(rank[informative].tolist()))

_, searched = retrain(res.desc, res.data, cfg.hyperparams)
ub = uniform_baseline(cfg.model, res.counted)
_, uniform = retrain(ub, res.data, cfg.hyperparams)
print("uniform widths:", ub.sizes())
print(f"test accuracy: searched {searched['test']['accuracy']:.3f}, uniform {uniform['test']['accuracy']:.3f}")
