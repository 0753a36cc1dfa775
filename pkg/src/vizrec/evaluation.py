"""RMSE and the multi-model comparison table."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from vizrec.dataset import RatingDataset, VisualFeatureStore
from vizrec.models import ModelKind, ModelParams, clamp, predict_batch
from vizrec.numeric import DTYPE


class EvaluationError(ValueError):
    pass


def rmse_values(targets, predictions) -> float:
    t = np.asarray(targets, dtype=DTYPE)
    p = np.asarray(predictions, dtype=DTYPE)
    if t.shape != p.shape:
        raise EvaluationError(f"{t.shape} targets vs {p.shape} predictions")
    if t.size == 0:
        raise EvaluationError("RMSE of an empty test set is undefined")
    err = t - p
    return math.sqrt(float(err @ err) / t.size)


def feature_matrix(params: ModelParams, data: RatingDataset, features) -> np.ndarray | None:
    """Resolve ``features`` (store, aligned matrix or None) against the data's item index."""
    if not params.kind.visual:
        return None
    if features is None:
        raise EvaluationError(f"{params.kind.label} needs visual features")
    if isinstance(features, VisualFeatureStore):
        if features.dim_f != params.feature_dim:
            raise EvaluationError(f"feature dim {features.dim_f} does not match model F={params.feature_dim}")
        return features.matrix(data.item_index)
    return np.asarray(features, dtype=DTYPE)


def predict_dataset(params: ModelParams, data: RatingDataset, features=None, clamp_eval: bool = False,
                    chunk: int = 65536) -> np.ndarray:
    fm = feature_matrix(params, data, features)
    out = np.empty(len(data), dtype=DTYPE)
    for start in range(0, len(data), chunk):
        sl = slice(start, start + chunk)
        items = data.items[sl]
        out[sl] = predict_batch(params, data.users[sl], items, None if fm is None else fm[items])
    return clamp(out) if clamp_eval else out


def rmse(params: ModelParams, test: RatingDataset, features=None, clamp_eval: bool = False) -> float:
    if len(test) == 0:
        raise EvaluationError("RMSE of an empty test set is undefined")
    return rmse_values(test.ratings, predict_dataset(params, test, features, clamp_eval))


@dataclass
class EvalReport:
    rmse: dict[ModelKind, float]
    baseline: ModelKind
    improvement_pct: dict[ModelKind, float] = field(default_factory=dict)
    n_test: int = 0

    @property
    def headline(self) -> ModelKind:
        """Model reported in the single improvement column: the fused model when present."""
        return max(self.rmse)

    def to_dict(self) -> dict:
        return {
            "baseline": self.baseline.label,
            "n_test": self.n_test,
            "rmse": {k.label: v for k, v in sorted(self.rmse.items())},
            "improvement_pct": {k.label: v for k, v in sorted(self.improvement_pct.items())},
        }


def compare(reports: dict, baseline=ModelKind.MF, n_test: int = 0) -> EvalReport:
    reports = {ModelKind.parse(k): float(v) for k, v in reports.items()}
    baseline = ModelKind.parse(baseline)
    if baseline not in reports:
        raise EvaluationError(f"baseline {baseline.label} missing from reports")
    base = reports[baseline]
    imp = {k: (base - v) / base * 100.0 for k, v in reports.items()}
    return EvalReport(reports, baseline, imp, n_test)


def format_table(rows: list[tuple[str, EvalReport]]) -> str:
    """Plain-text table: Dataset | MF | VMF | VMLP | MF-VMLP | improvement."""
    header = ["Dataset"] + [k.label for k in ModelKind] + ["improvement"]
    body = []
    for name, rep in rows:
        cells = [name]
        for k in ModelKind:
            cells.append(f"{rep.rmse[k]:.4f}" if k in rep.rmse else "-")
        cells.append(f"{rep.improvement_pct[rep.headline]:.1f}%")
        body.append(cells)
    widths = [max(len(r[c]) for r in [header] + body) for c in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in [header] + body]
    return "\n".join(lines) + "\n"


def report_json(rows: list[tuple[str, EvalReport]]) -> str:
    doc = {"datasets": [dict(name=name, **rep.to_dict()) for name, rep in rows]}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
