"""
Where do image and text tokens go?
==================================

After a short tuning run we trace a batch through the MoE layers, then
summarise the per-expert load, the text/image mix each expert sees, and the
most distinctive expert pathways.
"""

import numpy as np

from moetune.analytics import RoutingTrace, expert_load_distribution, modality_preference, token_pathways
from moetune.data import make_synthetic_dataset
from moetune.model import ModelConfig
from moetune.tuning import PipelineSpec, StageSpec, run_pipeline

cfg = ModelConfig()
data = make_synthetic_dataset(0)
pipe = PipelineSpec(StageSpec("I", 40, 3e-3), StageSpec("II", 80, 1e-3), StageSpec("III", 120, 3e-3))
model, _ = run_pipeline(cfg, data, seed=0, pipeline=pipe)

sink = []
model.forward(data.eval.subset(slice(0, 64)), trace_sink=sink, use_capacity=False)
trace = RoutingTrace(sink)

np.set_printoptions(precision=2, suppress=True)
for lt, loads, prefs in zip(trace.layers, expert_load_distribution(trace), modality_preference(trace)):
    print(f"layer {lt.layer}: top-1 load {loads}  image share {prefs[:, 1]}")

report = token_pathways(trace, n=10)
for i, p in enumerate(report.pathways):
    tag = [m for m, idx in report.highlighted.items() if i in idx]
    print(f"{p['experts']}  tokens {p['tokens']:4d}  text {p['text']:4d}  image {p['image']:4d}  {' '.join(tag)}")
