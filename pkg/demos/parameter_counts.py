"""
Activated and total parameters
==============================

A sparse model stores ``E`` experts per MoE layer but runs only ``k`` of them
per token.  The closed form below is checked against the buffers of a built
toy model and against the published configurations in ``configs/``.
"""

from pathlib import Path

from moetune.config import load
from moetune.model import ModelConfig, build, buffer_walk, count_parameters

toy = ModelConfig()
print("toy formula   ", count_parameters(toy))
print("toy buffers   ", buffer_walk(build(toy, 0)))

root = Path(__file__).resolve().parents[1] / "configs"
for path in sorted(root.glob("*.json")):
    cfg = load(path).model
    if cfg.name == "toy":
        continue
    a, t = count_parameters(cfg)
    print(f"{cfg.name:28s} activated {a / 1e9:5.2f}B  total {t / 1e9:5.2f}B")
