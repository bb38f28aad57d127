"""The three unsupervised adaptation losses and their weighted combination.

Per patch: the spread of stochastic predictions (kelvin^2), an agreement
penalty between the mean prediction and the spectral-index stack
(dimensionless, in [0, 1]), and the gap between prediction and coarse-sensor
spatial means (kelvin).  The mean over the stochastic passes is the single
prediction fed to the agreement and bias terms, so no individual dropout
mask can bias them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .grid import Grid, IndexStack

INDEX_NAMES = ("ndvi", "ndwi", "ndbi")


@dataclass(frozen=True)
class LossWeights:
    """Nonnegative weights for (uncertainty, lulc, bias)."""

    lambda1: float = 0.65
    lambda2: float = 0.30
    lambda3: float = 0.25

    def __post_init__(self):
        for name, value in (("lambda1", self.lambda1), ("lambda2", self.lambda2),
                            ("lambda3", self.lambda3)):
            if not np.isfinite(value) or value < 0.0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")


@dataclass(frozen=True)
class LossBreakdown:
    uncertainty: float
    lulc: float
    bias: float
    total: float
    degenerate_rho_count: int

    CSV_HEADER = "epoch,patch_id,uncertainty,lulc,bias,total,degenerate_rho_count"

    def csv_row(self, epoch: int, patch_id: str) -> str:
        return (
            f"{epoch},{patch_id},{self.uncertainty!r},{self.lulc!r},"
            f"{self.bias!r},{self.total!r},{self.degenerate_rho_count}"
        )


def uncertainty_loss(predictions: list[Tensor]) -> Tensor:
    """Spatial mean of the per-pixel unbiased variance across the passes."""
    return ad.reduce_mean(ad.sample_variance_over_set(predictions))


def _index_arrays(indices) -> list[np.ndarray]:
    if isinstance(indices, IndexStack):
        return [g.values for g in indices.grids()]
    arrays = [np.asarray(ix.values if isinstance(ix, (Tensor, Grid)) else ix, dtype=np.float64)
              for ix in indices]
    if len(arrays) != 3:
        raise ValueError(f"expected 3 index fields, got {len(arrays)}")
    return arrays


def lulc_loss(y_hat: Tensor, indices) -> tuple[Tensor, int]:
    """Mean of (1 - |rho|) over the three indices, plus a degeneracy count.

    rho is the Pearson correlation between the prediction and each index; a
    constant field on either side makes rho degenerate, scores the full
    penalty of 1, and increments the count.
    """
    spatial = y_hat.values.shape[-2:]
    penalties = []
    degenerate = 0
    for name, values in zip(INDEX_NAMES, _index_arrays(indices)):
        if values.shape[-2:] != spatial:
            raise ValueError(
                f"{name}: spatial dims {values.shape[-2:]} != prediction {spatial}"
            )
        if ad.correlation_degenerate(y_hat.values, values):
            degenerate += 1
            penalties.append(ad.constant(1.0))
            continue
        index_t = ad.constant(values.reshape(y_hat.values.shape))
        rho = ad.pearson_correlation(y_hat, index_t)
        penalties.append(ad.scalar_add(ad.scalar_mul(ad.abs_smooth(rho), -1.0), 1.0))
    acc = penalties[0]
    for p in penalties[1:]:
        acc = ad.add(acc, p)
    return ad.scalar_mul(acc, 1.0 / 3.0), degenerate


def bias_loss(y_hat: Tensor, x_coarse) -> Tensor:
    """|mean(prediction) - mean(coarse)|, each mean over its own lattice."""
    values = x_coarse.values if isinstance(x_coarse, Grid) else np.asarray(x_coarse, dtype=np.float64)
    if values.size == 0:
        raise ValueError("bias_loss: empty coarse grid")
    coarse_mean = ad.constant(values.mean())
    return ad.abs_smooth(ad.sub(ad.spatial_mean(y_hat), coarse_mean))


def tta_loss(
    predictions: list[Tensor],
    indices,
    x_coarse,
    weights: LossWeights = LossWeights(),
) -> tuple[Tensor, LossBreakdown]:
    """Weighted per-patch total; returns the tape scalar and a float breakdown."""
    unc = uncertainty_loss(predictions)
    y_mean = ad.mean_over_set(predictions)
    lulc, degenerate = lulc_loss(y_mean, indices)
    bias = bias_loss(y_mean, x_coarse)
    total = ad.add(
        ad.add(ad.scalar_mul(unc, weights.lambda1), ad.scalar_mul(lulc, weights.lambda2)),
        ad.scalar_mul(bias, weights.lambda3),
    )
    breakdown = LossBreakdown(
        uncertainty=unc.item(),
        lulc=lulc.item(),
        bias=bias.item(),
        total=total.item(),
        degenerate_rho_count=degenerate,
    )
    return total, breakdown
