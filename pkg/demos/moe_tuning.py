"""
Three-stage tuning on the synthetic bimodal task
================================================

Stage I fits the projector alone, stage II the whole language model, and
stage III expands the FFNs into experts and trains only those.  Step counts
here are cut down so the script finishes in well under a minute.
"""

from moetune.data import make_synthetic_dataset
from moetune.model import ModelConfig
from moetune.tuning import PipelineSpec, StageSpec, evaluate, run_pipeline

cfg = ModelConfig()
data = make_synthetic_dataset(0)
pipe = PipelineSpec(
    StageSpec("I", 40, 3e-3),
    StageSpec("II", 80, 1e-3),
    StageSpec("III", 120, 3e-3),
)


def on_stage_end(stage, model, seconds):
    ev = evaluate(model, data.eval)
    extra = f", max expert load {ev['max_load']:.2f}" if "max_load" in ev else ""
    print(f"stage {stage:3s} {seconds:5.1f}s  eval loss {ev['regressive']:.3f}{extra}")


model, timelines = run_pipeline(cfg, data, seed=0, pipeline=pipe, on_stage_end=on_stage_end)

# The aux loss pulls the router away from the all-to-experts-0-and-1 start.
first, last = timelines["III"][0], timelines["III"][-1]
print("stage III loads, first step:", [round(v, 2) for v in first["loads"][0]])
print("stage III loads, last step: ", [round(v, 2) for v in last["loads"][0]])
