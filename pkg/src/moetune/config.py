"""Run configuration files (JSON).

Schema (every section but ``model`` optional)::

    {
      "name": "toy",
      "seed": 0,
      "model":   {ModelConfig fields},
      "dataset": {"n_classes": 8, "prompt_len": 4, "answer_len": 3,
                  "n_questions": 4, "n_values": 16, "n_train": 2048,
                  "n_eval": 256, "noise": 1.0},
      "stages":  {"I":   {"steps": 100, "learning_rate": 3e-3, ...},
                  "II":  {...},
                  "III": {..., "tuned_subset": "moe"}}
    }

Stage entries take the :class:`~moetune.tuning.StageSpec` fields other than
``stage``.  The dataset's image token count and feature width come from the
model section (``pseudo_image_tokens``, ``image_feature_dim``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .data import SyntheticDataset, make_synthetic_dataset
from .model import ConfigError, ModelConfig
from .tuning import PipelineSpec, StageSpec

_STAGE_SCHEMA = {
    "type": "object",
    "properties": {
        "steps": {"type": "integer", "minimum": 0},
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "schedule": {"enum": ["cosine", "constant"]},
        "tuned_subset": {"enum": ["moe", "ffn", "all"]},
        "batch_size": {"type": "integer", "minimum": 1},
        "alpha": {"type": ["number", "null"], "minimum": 0},
    },
    "additionalProperties": False,
}

RUN_SCHEMA = {
    "type": "object",
    "required": ["model"],
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "model": {"type": "object"},
        "dataset": {
            "type": "object",
            "properties": {
                k: {"type": "integer", "minimum": 1}
                for k in ("n_classes", "prompt_len", "answer_len", "n_questions", "n_values", "n_train", "n_eval")
            }
            | {"noise": {"type": "number", "minimum": 0}},
            "additionalProperties": False,
        },
        "stages": {
            "type": "object",
            "properties": {s: _STAGE_SCHEMA for s in ("I", "II", "III")},
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}


@dataclass
class RunConfig:
    model: ModelConfig
    pipeline: PipelineSpec = field(default_factory=PipelineSpec)
    dataset: dict = field(default_factory=dict)
    seed: int = 0
    name: str = "run"

    def make_dataset(self, seed: int | None = None) -> SyntheticDataset:
        return make_synthetic_dataset(
            self.seed if seed is None else seed,
            P=self.model.pseudo_image_tokens,
            feature_dim=self.model.image_feature_dim,
            **self.dataset,
        )

    def to_dict(self) -> dict:
        stages = {}
        for s in ("I", "II", "III"):
            spec = self.pipeline.by_stage(s)
            stages[s] = {k: v for k, v in vars(spec).items() if k != "stage"}
        return {
            "name": self.name,
            "seed": self.seed,
            "model": self.model.to_dict(),
            "dataset": dict(self.dataset),
            "stages": stages,
        }


def parse(doc: dict) -> RunConfig:
    try:
        jsonschema.validate(doc, RUN_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"invalid run config: {exc.message}") from exc
    model = ModelConfig.from_dict(doc["model"])
    pipeline = PipelineSpec()
    for s, entry in doc.get("stages", {}).items():
        base = vars(pipeline.by_stage(s)) | entry
        spec = StageSpec(**base)
        setattr(pipeline, {"I": "stage1", "II": "stage2", "III": "stage3"}[s], spec)
    return RunConfig(model, pipeline, dict(doc.get("dataset", {})), doc.get("seed", 0), doc.get("name", model.name))


def load(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return parse(doc)
