"""
Searching the number of residual blocks
=======================================

A student with eight residual blocks learns to imitate a two-block teacher.
The MAC budget admits at most four blocks, so the depth gate has to decide
which blocks to keep while the stream widths stay fixed.
"""

from dms.data import TaskSpec, teacher_spec
from dms.network import ModelSpec, build_supernet
from dms.resource import ResourceModel, supernet_consumption
from dms.search import PipelineConfig, retrain, search_and_export

task = TaskSpec(kind="teacher-student", seed=0, teacher_blocks=2)
spec = teacher_spec(task, blocks=8)
spec["layers"][1]["depth"] = {}

four = build_supernet(ModelSpec.model_validate(teacher_spec(task, blocks=4)))
budget = supernet_consumption(four, ResourceModel("macs"))

cfg = PipelineConfig.model_validate({
    "model": spec, "task": task.model_dump(), "resource": {"kind": "macs", "target": budget},
    "hyperparams": {"seed": 0, "retrain_epochs": 40}})
res = search_and_export(cfg)

for r in res.state.records:
    print(f"epoch {r['epoch']}  {r['phase']:<10} blocks kept {r['k']['layers.1.depth']}  r_c {r['r_c']:.0f}")
print("kept blocks:", res.desc.keep()["layers.1.depth"].tolist())
_, metrics = retrain(res.desc, res.data, cfg.hyperparams)
print(f"retrained test mse {metrics['test']['mse']:.4f}")
