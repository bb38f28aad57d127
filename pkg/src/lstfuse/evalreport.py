"""Before/after evaluation: aggregate predictions, score RMSE/MAE per region.

Evaluation is strictly separated from adaptation: predictions here use a
single deterministic pass with dropout disabled (an MC-mean mode exists
behind a flag), no weights change, and ground truth enters only through
this module.  Predictions and truth are block-aggregated to the coarser
comparison resolution before scoring.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .grid import Grid, IndexStack, block_aggregate, upsample_replicate
from .model import EfdModel, forward, mc_forward


def rmse(pred: Grid, truth: Grid) -> float:
    """Root mean square error over all pixels, in kelvin."""
    _require_same_dims(pred, truth)
    err = pred.values - truth.values
    return float(np.sqrt(np.mean(err * err)))


def mae(pred: Grid, truth: Grid) -> float:
    """Mean absolute error over all pixels, in kelvin."""
    _require_same_dims(pred, truth)
    return float(np.mean(np.abs(pred.values - truth.values)))


def _require_same_dims(a: Grid, b: Grid) -> None:
    if (a.height, a.width) != (b.height, b.width):
        raise ValueError(
            f"dimension mismatch: {a.height}x{a.width} vs {b.height}x{b.width}"
        )


def predict_scene(
    model: EfdModel,
    x_coarse: Grid,
    indices: IndexStack,
    mc_passes: int = 0,
    key: rng.RngKey | None = None,
) -> Grid:
    """Fine-lattice prediction for a whole scene.

    mc_passes == 0 (the default) runs one pass with dropout off.  A positive
    count averages that many stochastic passes under the given key instead.
    """
    ratio = indices.height // x_coarse.height
    if ratio * x_coarse.height != indices.height or ratio * x_coarse.width != indices.width:
        raise ValueError("fine dims must be an integer multiple of coarse dims")
    x_on_fine = upsample_replicate(x_coarse, ratio).values[None]
    idx = np.stack([g.values for g in indices.grids()])
    if mc_passes == 0:
        pred = forward(model, x_on_fine, idx, mask_key=None)
        return Grid.from_array(pred.values[0])
    if key is None:
        raise ValueError("MC-mean prediction needs an rng key")
    passes = mc_forward(model, x_on_fine, idx, mc_passes, key)
    stacked = np.stack([p.values[0] for p in passes])
    return Grid.from_array(stacked.mean(axis=0))


@dataclass(frozen=True)
class MetricRow:
    region: str
    metric: str  # "RMSE" or "MAE"
    before: float
    after: float
    improvement_pct: float

    def __post_init__(self):
        expected = improvement_pct(self.before, self.after)
        if abs(self.improvement_pct - expected) > 1e-9:
            raise ValueError(
                f"inconsistent improvement for {self.region}/{self.metric}: "
                f"{self.improvement_pct} vs {expected}"
            )

    @classmethod
    def build(cls, region: str, metric: str, before: float, after: float) -> "MetricRow":
        return cls(region, metric, before, after, improvement_pct(before, after))


def improvement_pct(before: float, after: float) -> float:
    if before == 0.0:
        return 0.0
    return 100.0 * (before - after) / before


def evaluate(
    model: EfdModel,
    regions: list[tuple[str, list]],
    aggregation_factor: int = 2,
    mc_passes: int = 0,
    key: rng.RngKey | None = None,
) -> dict[str, dict[str, float]]:
    """Per-region RMSE/MAE for one model, dates weighted equally.

    `regions` pairs a region name with its samples; each sample must carry
    x_coarse, indices_t1, and truth_fine grids.
    """
    results: dict[str, dict[str, float]] = {}
    for region, samples in regions:
        if not samples:
            raise ValueError(f"region {region} has no samples")
        rmses, maes = [], []
        for i, sample in enumerate(samples):
            date_key = key.child(region).child("date", i) if key is not None else None
            pred = predict_scene(model, sample.x_coarse, sample.indices_t1,
                                 mc_passes, date_key)
            pred_agg = block_aggregate(pred, aggregation_factor)
            truth_agg = block_aggregate(sample.truth_fine, aggregation_factor)
            rmses.append(rmse(pred_agg, truth_agg))
            maes.append(mae(pred_agg, truth_agg))
        results[region] = {
            "RMSE": float(np.mean(rmses)),
            "MAE": float(np.mean(maes)),
        }
    return results


def compare(
    model_before: EfdModel,
    model_after,
    regions: list[tuple[str, list]],
    aggregation_factor: int = 2,
    mc_passes: int = 0,
    key: rng.RngKey | None = None,
) -> list[MetricRow]:
    """Before/after metric rows per region plus an Average row.

    model_after is either one model for every region or a mapping from
    region name to its adapted model.  The Average row averages the region
    columns and recomputes its improvement from those averages.
    """
    before = evaluate(model_before, regions, aggregation_factor, mc_passes, key)
    rows: list[MetricRow] = []
    per_metric: dict[str, list[tuple[float, float]]] = {"RMSE": [], "MAE": []}
    for region, samples in regions:
        after_model = model_after[region] if isinstance(model_after, dict) else model_after
        after = evaluate(after_model, [(region, samples)], aggregation_factor, mc_passes, key)
        for metric in ("RMSE", "MAE"):
            b, a = before[region][metric], after[region][metric]
            rows.append(MetricRow.build(region, metric, b, a))
            per_metric[metric].append((b, a))
    for metric in ("RMSE", "MAE"):
        b = float(np.mean([x[0] for x in per_metric[metric]]))
        a = float(np.mean([x[1] for x in per_metric[metric]]))
        rows.append(MetricRow.build("Average", metric, b, a))
    return rows


def write_metrics_csv(rows: list[MetricRow], path) -> None:
    lines = ["region,metric,before,after,improvement_pct"]
    for r in rows:
        lines.append(f"{r.region},{r.metric},{r.before!r},{r.after!r},{r.improvement_pct!r}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_metrics_csv(path) -> list[MetricRow]:
    with open(path, encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    rows = []
    for line in lines[1:]:
        region, metric, before, after, pct = line.split(",")
        rows.append(MetricRow(region, metric, float(before), float(after), float(pct)))
    return rows


def format_table(rows: list[MetricRow]) -> str:
    """Plain-text before/after table, one block per region."""
    header = f"{'Region':<14}{'Metric':<8}{'Before':>10}{'After':>10}{'Improvement':>14}"
    rule = "-" * len(header)
    out = [header, rule]
    for r in rows:
        out.append(
            f"{r.region:<14}{r.metric:<8}{r.before:>10.3f}{r.after:>10.3f}"
            f"{r.improvement_pct:>13.2f}%"
        )
    return "\n".join(out)
