"""Synthetic worlds with an analytic ground truth, plus supervised pretraining.

A region is drawn as a smooth random field split into water / vegetation /
built-up classes by its mixture fractions.  Per-class reflectance bands give
the three spectral indices through the usual normalized differences, and the
fine-lattice LST obeys a fixed linear law in those indices plus noise, so
index-LST correlation holds by construction.  The coarse sensor sees the
block-aggregated truth shifted by a radiometric bias.

Target regions differ from the source along three controlled axes: class
composition, base temperature, and coarse-sensor bias.  Ground truth is
carried on each sample for evaluation only; the adaptation view drops it.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import rng
from .adapt import AdamState, AdaptSample, NonFiniteLossError, adam_step
from . import autodiff as ad
from .autodiff import Tape
from .evalreport import predict_scene, rmse
from .grid import (
    Grid,
    IndexStack,
    block_aggregate,
    extract_patches,
    normalized_difference,
    read_grid,
    read_index_stack,
    upsample_replicate,
    write_grid,
    write_index_stack,
)
from .model import EfdModel, bind_parameters, forward, DropoutPlan

# per-class reflectance means, class order (water, vegetation, built)
_BAND_LEVELS = {
    "nir": (0.05, 0.50, 0.30),
    "red": (0.06, 0.10, 0.28),
    "green": (0.10, 0.15, 0.25),
    "swir": (0.03, 0.20, 0.40),
}
_BAND_JITTER = 0.04


@dataclass(frozen=True)
class WorldSpec:
    """One region's generator settings."""

    name: str
    height: int = 96
    width: int = 96
    water_fraction: float = 0.15
    vegetation_fraction: float = 0.60
    built_fraction: float = 0.25
    base_temp_k: float = 295.0
    gain_ndbi: float = 6.0
    gain_ndvi: float = 6.0
    gain_ndwi: float = 4.0
    noise_sigma_k: float = 0.5
    sensor_bias_k: float = 0.0
    n_dates: int = 4
    coarse_ratio: int = 4
    smooth_scale: float = 6.0
    date_spread_k: float = 3.0
    seed: int = 0

    def __post_init__(self):
        fr = (self.water_fraction, self.vegetation_fraction, self.built_fraction)
        if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"{self.name}: fractions must be >= 0 and sum to 1, got {fr}")
        if self.noise_sigma_k < 0:
            raise ValueError(f"{self.name}: noise sigma must be >= 0")
        if self.height % self.coarse_ratio or self.width % self.coarse_ratio:
            raise ValueError(f"{self.name}: dims must be divisible by coarse_ratio")
        if self.n_dates < 1:
            raise ValueError(f"{self.name}: need at least one date")

    def fractions(self) -> tuple[float, float, float]:
        return (self.water_fraction, self.vegetation_fraction, self.built_fraction)


@dataclass(frozen=True)
class TargetSample:
    """One date of one region; truth_fine is for evaluation only."""

    name: str
    x_coarse: Grid
    indices_t1: IndexStack
    truth_fine: Grid

    def adaptation_view(self) -> AdaptSample:
        """The truth-free view handed to the adaptation loop."""
        return AdaptSample(self.name, self.x_coarse, self.indices_t1)


@dataclass
class RegionData:
    spec: WorldSpec
    indices_t1: IndexStack
    samples: list[TargetSample]


@dataclass
class World:
    source: RegionData
    targets: list[RegionData]


def _smooth(values: np.ndarray, scale: float) -> np.ndarray:
    """Separable Gaussian smoothing with reflect padding."""
    if scale <= 0:
        return values
    radius = max(1, int(round(3.0 * scale)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / scale) ** 2)
    kernel /= kernel.sum()
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (radius, radius)
        padded = np.pad(values, pad, mode="reflect")
        values = sliding_window_view(padded, 2 * radius + 1, axis=axis) @ kernel
    return values


def _class_map(spec: WorldSpec, key: rng.RngKey) -> np.ndarray:
    """0=water, 1=vegetation, 2=built, split by smoothed-noise quantiles."""
    noise = rng.gaussian(key, spec.height * spec.width).reshape(spec.height, spec.width)
    terrain = _smooth(noise, spec.smooth_scale)
    q_water = np.quantile(terrain, spec.water_fraction)
    q_built = np.quantile(terrain, 1.0 - spec.built_fraction)
    classes = np.ones_like(terrain, dtype=np.int64)
    classes[terrain <= q_water] = 0
    if spec.built_fraction > 0:
        classes[terrain >= q_built] = 2
    return classes


def _indices(spec: WorldSpec, key: rng.RngKey) -> IndexStack:
    classes = _class_map(spec, key.child("terrain"))
    bands = {}
    for i, (band, levels) in enumerate(_BAND_LEVELS.items()):
        base = np.choose(classes, levels)
        jitter = _smooth(
            rng.gaussian(key.child("band", i), classes.size).reshape(classes.shape),
            spec.smooth_scale / 2.0,
        )
        bands[band] = Grid.from_array(np.clip(base + _BAND_JITTER * jitter, 1e-3, 1.0))
    return IndexStack(
        ndvi=normalized_difference(bands["nir"], bands["red"]),
        ndwi=normalized_difference(bands["green"], bands["nir"]),
        ndbi=normalized_difference(bands["swir"], bands["nir"]),
    )


def generate_region(spec: WorldSpec) -> RegionData:
    """All dates of one region from its spec; pure function of the spec."""
    key = rng.RngKey(spec.seed).child("world").child(spec.name)
    indices = _indices(spec, key.child("indices"))
    structure = (
        spec.gain_ndbi * indices.ndbi.values
        - spec.gain_ndvi * indices.ndvi.values
        - spec.gain_ndwi * indices.ndwi.values
    )
    samples = []
    for d in range(spec.n_dates):
        offset = spec.date_spread_k * float(rng.gaussian(key.child("date_offset", d), 1)[0])
        noise = spec.noise_sigma_k * rng.gaussian(
            key.child("noise", d), spec.height * spec.width
        ).reshape(spec.height, spec.width)
        truth = Grid.from_array(spec.base_temp_k + offset + structure + noise)
        coarse = block_aggregate(truth, spec.coarse_ratio)
        x_coarse = Grid.from_array(coarse.values + spec.sensor_bias_k)
        samples.append(TargetSample(f"{spec.name}_d{d}", x_coarse, indices, truth))
    return RegionData(spec, indices, samples)


def default_specs(seed: int = 0, **overrides) -> tuple[WorldSpec, list[WorldSpec]]:
    """The stock five-region world: one temperate source, four shifted targets."""
    def make(name, water, veg, built, base, bias, dates):
        return WorldSpec(
            name=name,
            water_fraction=water,
            vegetation_fraction=veg,
            built_fraction=built,
            base_temp_k=base,
            sensor_bias_k=bias,
            n_dates=dates,
            seed=seed,
            **overrides,
        )

    source = make("orleans", 0.15, 0.60, 0.25, 295.0, 0.0, 4)
    targets = [
        make("rome", 0.15, 0.40, 0.45, 303.0, 1.5, 4),
        make("cairo", 0.20, 0.10, 0.70, 312.0, 3.0, 3),
        make("madrid", 0.10, 0.35, 0.55, 306.0, -2.0, 2),
        make("montpellier", 0.20, 0.45, 0.35, 300.0, 1.0, 2),
    ]
    return source, targets


def generate_world(source_spec: WorldSpec, target_specs: list[WorldSpec]) -> World:
    return World(
        source=generate_region(source_spec),
        targets=[generate_region(s) for s in target_specs],
    )


def default_world(seed: int = 0, **overrides) -> World:
    source, targets = default_specs(seed, **overrides)
    return generate_world(source, targets)


def _fraction_distance(a: WorldSpec, b: WorldSpec) -> float:
    return float(sum(abs(x - y) for x, y in zip(a.fractions(), b.fractions())))


def write_world(world: World, out_dir) -> None:
    """Serialize every raster as GRD1 plus a manifest of paths and shifts."""
    os.makedirs(out_dir, exist_ok=True)

    def dump_region(region: RegionData) -> dict:
        rdir = os.path.join(out_dir, region.spec.name)
        os.makedirs(rdir, exist_ok=True)
        write_index_stack(region.indices_t1, os.path.join(rdir, "indices_t1"))
        dates = []
        for i, sample in enumerate(region.samples):
            x_path = os.path.join(region.spec.name, f"date{i}.x.grd")
            t_path = os.path.join(region.spec.name, f"date{i}.truth.grd")
            write_grid(sample.x_coarse, os.path.join(out_dir, x_path))
            write_grid(sample.truth_fine, os.path.join(out_dir, t_path))
            dates.append({"name": sample.name, "x_coarse": x_path, "truth_fine": t_path})
        return {
            "name": region.spec.name,
            "spec": asdict(region.spec),
            "indices_t1": os.path.join(region.spec.name, "indices_t1"),
            "dates": dates,
            "shift": {
                "fraction_distance": _fraction_distance(region.spec, world.source.spec),
                "sensor_bias_k": region.spec.sensor_bias_k,
                "base_temp_delta_k": region.spec.base_temp_k - world.source.spec.base_temp_k,
            },
        }

    manifest = {
        "format": "lstfuse-world-v1",
        "source": dump_region(world.source),
        "targets": [dump_region(r) for r in world.targets],
    }
    with open(os.path.join(out_dir, "world.manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(world_dir) -> dict:
    with open(os.path.join(world_dir, "world.manifest.json"), encoding="utf-8") as fh:
        return json.load(fh)


def _load_region(world_dir, block: dict) -> RegionData:
    spec = WorldSpec(**block["spec"])
    indices = read_index_stack(os.path.join(world_dir, block["indices_t1"]))
    samples = []
    for date in block["dates"]:
        x_coarse = read_grid(os.path.join(world_dir, date["x_coarse"]))
        truth = read_grid(os.path.join(world_dir, date["truth_fine"]))
        samples.append(TargetSample(date["name"], x_coarse, indices, truth))
    return RegionData(spec, indices, samples)


def read_world(world_dir) -> World:
    """Full world, truth included (evaluation side)."""
    manifest = read_manifest(world_dir)
    return World(
        source=_load_region(world_dir, manifest["source"]),
        targets=[_load_region(world_dir, t) for t in manifest["targets"]],
    )


def read_adaptation_inputs(world_dir) -> dict[str, list[AdaptSample]]:
    """Target samples without ground truth; truth files are never opened."""
    manifest = read_manifest(world_dir)
    out: dict[str, list[AdaptSample]] = {}
    for block in manifest["targets"]:
        indices = read_index_stack(os.path.join(world_dir, block["indices_t1"]))
        out[block["name"]] = [
            AdaptSample(
                date["name"],
                read_grid(os.path.join(world_dir, date["x_coarse"])),
                indices,
            )
            for date in block["dates"]
        ]
    return out


@dataclass
class PretrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    final_rmse: float = float("nan")
    baseline_rmse: float = float("nan")


def pretrain(
    model: EfdModel,
    source_samples: list[TargetSample],
    epochs: int = 30,
    learning_rate: float = 3e-3,
    patch_size: int = 32,
    stride: int = 16,
    seed: int = 0,
) -> tuple[EfdModel, PretrainReport]:
    """Supervised MSE pretraining of all parameters on the source region.

    Unlike adaptation this sees ground truth; dropout stays active so the
    network is born with the stochastic layers it will be probed through.
    Returns the trained copy and a report with per-epoch loss and final
    source RMSE against the predict-the-mean baseline.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if not source_samples:
        raise ValueError("pretrain requires source samples")
    work = model.copy()
    plan = DropoutPlan(work.dropout_rate, rng.RngKey(seed).child("pretrain"))

    patches = []
    for sample in source_samples:
        ratio = sample.indices_t1.height // sample.x_coarse.height
        x_on_fine = upsample_replicate(sample.x_coarse, ratio).values
        idx_stack = np.stack([g.values for g in sample.indices_t1.grids()])
        for patch in extract_patches(sample.indices_t1.ndvi, patch_size, stride):
            patches.append(
                (
                    patch.slice_array(x_on_fine)[None],
                    patch.slice_array(idx_stack),
                    patch.slice_array(sample.truth_fine.values)[None],
                )
            )

    names = tuple(work.params)
    state = AdamState.fresh(work.params)
    report = PretrainReport()
    for epoch in range(epochs):
        epoch_loss = 0.0
        for p_idx, (x_patch, idx_patch, truth_patch) in enumerate(patches):
            tape = Tape()
            params = bind_parameters(work, tape, names)
            pred = forward(work, x_patch, idx_patch,
                           mask_key=plan.pass_key(epoch, p_idx, 0), params=params)
            err = ad.sub(pred, ad.constant(truth_patch))
            loss = ad.reduce_mean(ad.mul(err, err))
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLossError(
                    f"pretraining diverged at epoch {epoch}, patch {p_idx}: {value}"
                )
            epoch_loss += value
            grads_by_id = tape.backward(loss)
            grads = {n: grads_by_id[params[n].node_id] for n in names}
            updated, state = adam_step(work.params, grads, state, learning_rate)
            work.params.update(updated)
        report.epoch_losses.append(epoch_loss / len(patches))

    preds = [
        predict_scene(work, s.x_coarse, s.indices_t1) for s in source_samples
    ]
    report.final_rmse = float(
        np.mean([rmse(p, s.truth_fine) for p, s in zip(preds, source_samples)])
    )
    report.baseline_rmse = float(
        np.mean(
            [
                rmse(Grid.from_array(np.full_like(s.truth_fine.values, s.truth_fine.mean())),
                     s.truth_fine)
                for s in source_samples
            ]
        )
    )
    return work, report
