"""The test-time adaptation loop.

Iterates epochs over every (date, patch) of a region's unlabeled samples,
evaluates the weighted unsupervised loss on stochastic forward passes, and
applies Adam updates to the fusion parameters only.  Encoder and decoder
weights never change; a checksum taken before and after the run proves it.

One optimizer step per patch is the default.  Full-batch mode (one step per
epoch over the mean patch loss) is available for ablation, and is also where
worker threads help: per-patch tapes are independent, and gradients reduce
in fixed patch order either way, so results are bit-identical at any thread
count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .grid import Grid, IndexStack, extract_patches, upsample_replicate
from .losses import LossBreakdown, LossWeights, tta_loss
from .model import (
    DropoutPlan,
    EfdModel,
    bind_parameters,
    encode_features,
    frozen_checksum,
    mc_forward,
    partition_parameters,
)
from .autodiff import Tape


class NonFiniteLossError(RuntimeError):
    """Adaptation aborted: a loss term left the reals."""


@dataclass(frozen=True)
class TtaConfig:
    """Hyperparameters of the adaptation loop."""

    weights: LossWeights = field(default_factory=LossWeights)
    mc_samples: int = 10
    epochs: int = 10
    learning_rate: float = 4e-4
    patch_size: int = 32
    stride: int = 8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    shuffle: bool = False
    full_batch: bool = False
    plain_sgd: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.mc_samples < 2:
            raise ValueError(f"mc_samples must be >= 2, got {self.mc_samples}")
        # learning_rate 0 is allowed as an explicit dry run
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not self.patch_size >= self.stride >= 1:
            raise ValueError(
                f"need patch_size >= stride >= 1, got {self.patch_size}, {self.stride}"
            )
        if self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")


@dataclass(frozen=True)
class AdaptSample:
    """One unlabeled target date: coarse LST plus reference-time indices.

    Deliberately truth-free; evaluation-only fields live on TargetSample and
    never cross into the adaptation loop.
    """

    name: str
    x_coarse: Grid
    indices: IndexStack

    def __post_init__(self):
        if self.indices.height % self.x_coarse.height or self.indices.width % self.x_coarse.width:
            raise ValueError(
                f"{self.name}: fine dims {self.indices.height}x{self.indices.width} "
                f"not a multiple of coarse {self.x_coarse.height}x{self.x_coarse.width}"
            )

    @property
    def ratio(self) -> int:
        return self.indices.height // self.x_coarse.height


@dataclass
class AdamState:
    """First/second moments and step counter for one parameter set."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; pure, returns new params and state."""
    if set(grads) != set(params) or set(state.m) != set(params):
        raise ValueError(
            f"gradient/parameter set mismatch: params {sorted(params)}, grads {sorted(grads)}"
        )
    t = state.t + 1
    new_params, new_m, new_v = {}, {}, {}
    for name in params:
        g = grads[name]
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, t)


def sgd_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float
) -> dict[str, np.ndarray]:
    """Plain gradient step, kept for ablation against the Adam default."""
    if set(grads) != set(params):
        raise ValueError("gradient/parameter set mismatch")
    return {name: params[name] - lr * grads[name] for name in params}


@dataclass(frozen=True)
class PlanStep:
    epoch: int
    date_index: int
    patch_index: int  # global, date-major, stable across epochs
    row: int
    col: int

    @property
    def patch_id(self) -> str:
        return f"d{self.date_index}_r{self.row}_c{self.col}"


def schedule(samples: list[AdaptSample], config: TtaConfig) -> list[PlanStep]:
    """Deterministic iteration plan: epochs x (dates x patches), row-major.

    With config.shuffle, a seeded permutation is applied within each epoch;
    the set of steps per epoch never changes.
    """
    base = []
    global_index = 0
    for date_index, sample in enumerate(samples):
        geometry = sample.indices.ndvi
        for patch in extract_patches(geometry, config.patch_size, config.stride):
            base.append((date_index, global_index, patch.row, patch.col))
            global_index += 1
    plan = []
    for epoch in range(config.epochs):
        order = list(range(len(base)))
        if config.shuffle:
            draws = rng.uniform(
                rng.RngKey(config.seed).child("shuffle", epoch), len(base)
            )
            order = list(np.argsort(draws, kind="stable"))
        for i in order:
            date_index, patch_index, row, col = base[i]
            plan.append(PlanStep(epoch, date_index, patch_index, row, col))
    return plan


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_uncertainty: float
    mean_lulc: float
    mean_bias: float
    mean_total: float
    degenerate_rho_total: int


@dataclass
class AdaptReport:
    """Everything a run produces besides the adapted weights themselves."""

    model: EfdModel
    epoch_stats: list[EpochStats]
    patch_rows: list[tuple[int, str, LossBreakdown]]
    checksum_before: str
    checksum_after: str
    steps: int

    def write_losscurve_csv(self, path) -> None:
        lines = ["epoch,mean_uncertainty,mean_lulc,mean_bias,mean_total"]
        for s in self.epoch_stats:
            lines.append(
                f"{s.epoch},{s.mean_uncertainty!r},{s.mean_lulc!r},"
                f"{s.mean_bias!r},{s.mean_total!r}"
            )
        with open(path, "w", encoding="ascii") as fh:
            fh.write("\n".join(lines) + "\n")

    def write_patches_csv(self, path) -> None:
        lines = [LossBreakdown.CSV_HEADER]
        for epoch, patch_id, row in self.patch_rows:
            lines.append(row.csv_row(epoch, patch_id))
        with open(path, "w", encoding="ascii") as fh:
            fh.write("\n".join(lines) + "\n")


@dataclass(frozen=True)
class _PatchData:
    date_index: int
    x_patch: np.ndarray       # (1, s, s) coarse LST replicated onto the patch
    idx_patch: np.ndarray     # (3, s, s)
    features: tuple[np.ndarray, np.ndarray]


def _prepare_patches(
    model: EfdModel, samples: list[AdaptSample], config: TtaConfig
) -> dict[int, _PatchData]:
    """Patch tensors and frozen-encoder features, keyed by global patch index.

    Encoder weights are frozen throughout adaptation, so their outputs are
    computed once per patch and reused across every epoch and MC pass.
    """
    prepared = {}
    global_index = 0
    for date_index, sample in enumerate(samples):
        x_on_fine = upsample_replicate(sample.x_coarse, sample.ratio).values
        idx_stack = np.stack([g.values for g in sample.indices.grids()])
        for patch in extract_patches(sample.indices.ndvi, config.patch_size, config.stride):
            x_patch = patch.slice_array(x_on_fine)[None]
            idx_patch = patch.slice_array(idx_stack)
            prepared[global_index] = _PatchData(
                date_index, x_patch, idx_patch, encode_features(model, x_patch, idx_patch)
            )
            global_index += 1
    return prepared


def _check_finite(breakdown: LossBreakdown, epoch: int, patch_id: str) -> None:
    for term in ("uncertainty", "lulc", "bias", "total"):
        value = getattr(breakdown, term)
        if not np.isfinite(value):
            raise NonFiniteLossError(
                f"epoch {epoch}, patch {patch_id}: {term} loss is {value}"
            )


def _patch_loss(
    work: EfdModel,
    data: _PatchData,
    fusion_names: tuple[str, ...],
    dropout_plan: DropoutPlan,
    step: PlanStep,
    config: TtaConfig,
) -> tuple[dict[str, np.ndarray], LossBreakdown]:
    """Loss and fusion gradients for one patch on a private tape."""
    tape = Tape()
    params = bind_parameters(work, tape, fusion_names)
    preds = mc_forward(
        work, None, None, config.mc_samples,
        dropout_plan.step_key(step.epoch, step.patch_index),
        params=params, features=data.features,
    )
    total, breakdown = tta_loss(preds, data.idx_patch, data.x_patch, config.weights)
    _check_finite(breakdown, step.epoch, step.patch_id)
    grads_by_id = tape.backward(total)
    grads = {name: grads_by_id[params[name].node_id] for name in fusion_names}
    return grads, breakdown


def adapt(model: EfdModel, samples: list[AdaptSample], config: TtaConfig) -> AdaptReport:
    """Adapt the fusion block of a pretrained model on unlabeled samples.

    The input model is left untouched; the adapted copy rides back on the
    report together with loss curves, per-patch rows, and the frozen-weight
    checksum pair.
    """
    if not samples:
        raise ValueError("adapt requires at least one target sample")
    work = model.copy()
    frozen_names, fusion_names = partition_parameters(work)
    checksum_before = frozen_checksum(work)

    prepared = _prepare_patches(work, samples, config)
    plan = schedule(samples, config)
    steps_per_epoch = len(prepared)
    dropout_plan = DropoutPlan(work.dropout_rate, rng.RngKey(config.seed).child("tta"))

    state = AdamState.fresh({n: work.params[n] for n in fusion_names})
    patch_rows: list[tuple[int, str, LossBreakdown]] = []
    epoch_stats: list[EpochStats] = []

    def apply_update(grads: dict[str, np.ndarray]) -> None:
        nonlocal state
        fusion_params = {n: work.params[n] for n in fusion_names}
        if config.plain_sgd:
            updated = sgd_step(fusion_params, grads, config.learning_rate)
            state = AdamState(state.m, state.v, state.t + 1)
        else:
            updated, state = adam_step(
                fusion_params, grads, state, config.learning_rate,
                config.adam_beta1, config.adam_beta2, config.adam_eps,
            )
        work.params.update(updated)

    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        for epoch in range(config.epochs):
            epoch_plan = plan[epoch * steps_per_epoch : (epoch + 1) * steps_per_epoch]
            epoch_rows: list[LossBreakdown] = []
            if config.full_batch:
                def run(s: PlanStep):
                    return _patch_loss(
                        work, prepared[s.patch_index], fusion_names, dropout_plan, s, config
                    )
                results = list(pool.map(run, epoch_plan)) if pool else [run(s) for s in epoch_plan]
                mean_grads = {
                    name: np.mean([g[name] for g, _ in results], axis=0)
                    for name in fusion_names
                }
                for step, (_, breakdown) in zip(epoch_plan, results):
                    patch_rows.append((epoch, step.patch_id, breakdown))
                    epoch_rows.append(breakdown)
                apply_update(mean_grads)
            else:
                for step in epoch_plan:
                    grads, breakdown = _patch_loss(
                        work, prepared[step.patch_index], fusion_names,
                        dropout_plan, step, config,
                    )
                    apply_update(grads)
                    patch_rows.append((epoch, step.patch_id, breakdown))
                    epoch_rows.append(breakdown)
            n = len(epoch_rows)
            epoch_stats.append(EpochStats(
                epoch,
                sum(r.uncertainty for r in epoch_rows) / n,
                sum(r.lulc for r in epoch_rows) / n,
                sum(r.bias for r in epoch_rows) / n,
                sum(r.total for r in epoch_rows) / n,
                sum(r.degenerate_rho_count for r in epoch_rows),
            ))
    finally:
        if pool:
            pool.shutdown()

    checksum_after = frozen_checksum(work)
    if checksum_after != checksum_before:
        raise RuntimeError("frozen parameters changed during adaptation")
    return AdaptReport(
        model=work,
        epoch_stats=epoch_stats,
        patch_rows=patch_rows,
        checksum_before=checksum_before,
        checksum_after=checksum_after,
        steps=state.t,
    )
