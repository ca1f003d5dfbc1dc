"""Routing analytics over recorded traces: expert loads, modality shares and
PCA-ranked token pathways, plus their CSV/JSON report files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

TEXT, IMAGE = 0, 1


@dataclass
class LayerTrace:
    """Routing of the K tokens of one batch through one MoE block."""

    layer: int
    probs: np.ndarray  # (K, E)
    selected: np.ndarray  # (K, k), descending probability
    kept: np.ndarray  # (K, k)
    modality: np.ndarray  # (K,) 0 text / 1 image
    position: np.ndarray  # (K,)

    def __post_init__(self):
        K = self.probs.shape[0]
        for name in ("selected", "kept"):
            if getattr(self, name).shape[0] != K:
                raise ValueError(f"{name} has {getattr(self, name).shape[0]} rows, expected {K}")
        self.modality = np.asarray(self.modality).reshape(K)
        self.position = np.asarray(self.position).reshape(K)

    @property
    def num_tokens(self) -> int:
        return self.probs.shape[0]

    @property
    def num_experts(self) -> int:
        return self.probs.shape[1]


@dataclass
class RoutingTrace:
    layers: list[LayerTrace] = field(default_factory=list)

    def __post_init__(self):
        counts = {lt.num_tokens for lt in self.layers}
        if len(counts) > 1:
            raise ValueError("every token must appear once per layer")

    def append(self, lt: LayerTrace) -> None:
        self.layers.append(lt)
        self.__post_init__()

    @classmethod
    def merge(cls, traces: list["RoutingTrace"]) -> "RoutingTrace":
        """Concatenate the tokens of several same-depth traces."""
        if not traces:
            return cls()
        merged = []
        for per_layer in zip(*(t.layers for t in traces)):
            merged.append(
                LayerTrace(
                    per_layer[0].layer,
                    np.concatenate([lt.probs for lt in per_layer]),
                    np.concatenate([lt.selected for lt in per_layer]),
                    np.concatenate([lt.kept for lt in per_layer]),
                    np.concatenate([lt.modality for lt in per_layer]),
                    np.concatenate([lt.position for lt in per_layer]),
                )
            )
        return cls(merged)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def num_tokens(self) -> int:
        return self.layers[0].num_tokens if self.layers else 0


def expert_load_distribution(trace: RoutingTrace) -> np.ndarray:
    """(layers, E) fraction of tokens whose top-1 expert is each expert."""
    out = []
    for lt in trace.layers:
        counts = np.bincount(lt.selected[:, 0], minlength=lt.num_experts)
        out.append(counts / lt.num_tokens)
    return np.array(out)


def max_load_fraction(trace: RoutingTrace) -> float:
    """Mean over layers of the busiest expert's top-1 share."""
    loads = expert_load_distribution(trace)
    return float(loads.max(axis=1).mean()) if loads.size else float("nan")


def modality_preference(trace: RoutingTrace) -> np.ndarray:
    """(layers, E, 2) shares (text, image) of each expert's processed tokens.

    Every kept top-k assignment counts once.  Experts with no assignments
    hold NaN in both slots.
    """
    out = []
    for lt in trace.layers:
        E = lt.num_experts
        mod = np.repeat(lt.modality, lt.selected.shape[1])
        exp = lt.selected.ravel()
        keep = lt.kept.ravel()
        text = np.bincount(exp[keep & (mod == TEXT)], minlength=E).astype(float)
        image = np.bincount(exp[keep & (mod == IMAGE)], minlength=E).astype(float)
        total = text + image
        with np.errstate(invalid="ignore", divide="ignore"):
            shares = np.stack([text / total, image / total], axis=1)
        shares[total == 0] = np.nan
        out.append(shares)
    return np.array(out)


def drop_rate(trace: RoutingTrace) -> float:
    kept = [lt.kept for lt in trace.layers]
    if not kept:
        return 0.0
    return 1.0 - float(np.mean(np.concatenate([k.ravel() for k in kept])))


def canonical_sign(v: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    if nz.size and v[nz[0]] < 0:
        return -v
    return v


def principal_component(X: np.ndarray) -> tuple[np.ndarray, float]:
    """Leading eigenvector of the sample covariance of rows of ``X`` and its eigenvalue."""
    if X.shape[0] < 2:
        raise ValueError("PCA needs at least two samples")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    return canonical_sign(vecs[:, -1]), float(vals[-1])


@dataclass
class PathwayReport:
    pathways: list[dict]  # experts (per layer top-1), score, tokens, text, image
    highlighted: dict[str, list[int]]  # modality -> indices into pathways
    component: list[float]
    explained_variance: float

    def to_dict(self) -> dict:
        return {
            "pathways": self.pathways,
            "highlighted": self.highlighted,
            "component": self.component,
            "explained_variance": self.explained_variance,
        }


def pathway_vectors(trace: RoutingTrace) -> np.ndarray:
    """(K, layers*E): each token's gate probabilities concatenated across layers."""
    return np.concatenate([lt.probs for lt in trace.layers], axis=1)


def token_pathways(trace: RoutingTrace, n: int = 10) -> PathwayReport:
    """Top-``n`` distinct expert pathways ranked by |projection| on the first PC.

    Tokens are ranked by the magnitude of their pathway vector's projection on
    the leading principal component; each token's discrete pathway is its
    sequence of top-1 experts.  Repeated pathways keep their best score and
    accumulate token counts.  The two best pathways reached by each modality
    are flagged in ``highlighted``.
    """
    if trace.num_tokens < 2:
        raise ValueError("token_pathways needs at least two tokens")
    X = pathway_vectors(trace)
    pc, var = principal_component(X)
    scores = np.abs((X - X.mean(axis=0)) @ pc)
    discrete = np.stack([lt.selected[:, 0] for lt in trace.layers], axis=1)
    modality = trace.layers[0].modality
    order = np.lexsort((np.arange(len(scores)), -np.round(scores, 12)))

    index: dict[tuple, int] = {}
    paths: list[dict] = []
    first_by_mod: dict[str, list[int]] = {"text": [], "image": []}
    for tok in order:
        key = tuple(int(e) for e in discrete[tok])
        if key not in index:
            index[key] = len(paths)
            paths.append({"experts": list(key), "score": float(scores[tok]), "tokens": 0, "text": 0, "image": 0})
        j = index[key]
        mod = "image" if modality[tok] == IMAGE else "text"
        paths[j]["tokens"] += 1
        paths[j][mod] += 1
        if j not in first_by_mod[mod]:
            first_by_mod[mod].append(j)

    kept_idx = list(range(min(n, len(paths))))
    highlighted = {m: [j for j in js if j in kept_idx][:2] for m, js in first_by_mod.items()}
    return PathwayReport([paths[j] for j in kept_idx], highlighted, pc.tolist(), var)


# --- report files -------------------------------------------------------------

LOADS_COLUMNS = ["layer", "expert", "value"]
PREFERENCE_COLUMNS = ["layer", "expert", "modality", "value"]

PATHWAYS_SCHEMA = {
    "type": "object",
    "required": ["pathways", "highlighted", "component", "explained_variance"],
    "properties": {
        "pathways": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["experts", "score", "tokens", "text", "image"],
                "properties": {
                    "experts": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                    "score": {"type": "number", "minimum": 0},
                    "tokens": {"type": "integer", "minimum": 1},
                    "text": {"type": "integer", "minimum": 0},
                    "image": {"type": "integer", "minimum": 0},
                },
            },
        },
        "highlighted": {
            "type": "object",
            "required": ["text", "image"],
            "properties": {
                "text": {"type": "array", "items": {"type": "integer"}, "maxItems": 2},
                "image": {"type": "array", "items": {"type": "integer"}, "maxItems": 2},
            },
        },
        "component": {"type": "array", "items": {"type": "number"}},
        "explained_variance": {"type": "number"},
    },
}


def validate_csv(path: Path, columns: list[str]) -> None:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != columns:
        raise ValueError(f"{path}: header {rows[:1]} != {columns}")
    for r in rows[1:]:
        if len(r) != len(columns):
            raise ValueError(f"{path}: malformed row {r}")
        int(r[0]), int(r[1])
        if r[-1] != "":
            v = float(r[-1])
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{path}: fraction out of range in {r}")


def write_loads_csv(loads: np.ndarray, layer_ids: list[int], path: Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOADS_COLUMNS)
        for layer, row in zip(layer_ids, loads):
            for e, v in enumerate(row):
                w.writerow([layer, e, repr(float(v))])
    validate_csv(path, LOADS_COLUMNS)
    return path


def write_preferences_csv(prefs: np.ndarray, layer_ids: list[int], path: Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PREFERENCE_COLUMNS)
        for layer, per_expert in zip(layer_ids, prefs):
            for e, shares in enumerate(per_expert):
                for mod, v in zip(("text", "image"), shares):
                    w.writerow([layer, e, mod, "" if math.isnan(v) else repr(float(v))])
    validate_csv(path, PREFERENCE_COLUMNS)
    return path


def write_pathways_json(report: PathwayReport, path: Path) -> Path:
    path = Path(path)
    doc = report.to_dict()
    jsonschema.validate(doc, PATHWAYS_SCHEMA)
    path.write_text(json.dumps(doc, indent=2))
    return path
