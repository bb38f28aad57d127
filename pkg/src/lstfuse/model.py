"""Compact encoder-fusion-decoder network for coarse-to-fine LST regression.

Two convolutional encoders (one for the coarse LST injected onto the fine
lattice, one for the spectral-index stack) feed a 1x1 fusion convolution,
the only place the branches mix and the only block adapted at test time.
A small convolutional decoder maps fused features back to kelvin.  Dropout
sits on both encoder outputs with externally keyed masks, so stochastic
forward passes replay bit-exactly.

Kelvin inputs and outputs are shifted/scaled by fixed constants around
typical land surface temperatures; weights live in normalized units.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import rng
from .autodiff import Tape, Tensor

# (layer, in_channels, out_channels, kernel)
_LAYER_SPECS = (
    ("enc_coarse", 1, 8, 3),
    ("enc_fine", 3, 8, 3),
    ("fusion", 16, 8, 1),
    ("dec_hidden", 8, 8, 3),
    ("dec_out", 8, 1, 3),
)
FUSION_PARAMS = ("fusion.w", "fusion.b")

LST_OFFSET_K = 288.0
LST_SCALE_K = 20.0

EFD1_MAGIC = "EFD1"
_RATE_ENTRY = "dropout.rate"


class CheckpointFormatError(ValueError):
    """Raised for malformed or truncated EFD1 files."""


def parameter_shapes() -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for name, ci, co, k in _LAYER_SPECS:
        shapes[f"{name}.w"] = (co, ci, k, k)
        shapes[f"{name}.b"] = (co,)
    return shapes


@dataclass
class EfdModel:
    """Weights plus dropout rate; the parameter set is fixed by the layer table."""

    params: dict[str, np.ndarray]
    dropout_rate: float = 0.1

    def __post_init__(self):
        expected = parameter_shapes()
        if set(self.params) != set(expected):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ValueError(f"bad parameter set: missing {missing}, extra {extra}")
        for name, shape in expected.items():
            arr = np.asarray(self.params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape}, expected {shape}")
            self.params[name] = arr
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.dropout_rate}")

    def copy(self) -> "EfdModel":
        return EfdModel({k: v.copy() for k, v in self.params.items()}, self.dropout_rate)


def init_model(key: rng.RngKey, dropout_rate: float = 0.1) -> EfdModel:
    """Kaiming-uniform fan-in init, fully determined by the key."""
    params = {}
    for name, ci, co, k in _LAYER_SPECS:
        fan_in = ci * k * k
        w_bound = np.sqrt(6.0 / fan_in)
        b_bound = 1.0 / np.sqrt(fan_in)
        layer_key = key.child("init").child(name)
        w = (2.0 * rng.uniform(layer_key.child("w"), co * ci * k * k) - 1.0) * w_bound
        b = (2.0 * rng.uniform(layer_key.child("b"), co) - 1.0) * b_bound
        params[f"{name}.w"] = w.reshape(co, ci, k, k)
        params[f"{name}.b"] = b
    return EfdModel(params, dropout_rate)


def partition_parameters(model: EfdModel) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """(frozen, fusion) parameter names; disjoint and jointly exhaustive."""
    fusion = tuple(n for n in model.params if n in FUSION_PARAMS)
    frozen = tuple(n for n in model.params if n not in FUSION_PARAMS)
    return frozen, fusion


def fusion_parameter_count(model: EfdModel) -> int:
    return sum(model.params[n].size for n in partition_parameters(model)[1])


def frozen_checksum(model: EfdModel) -> str:
    """SHA-256 over the frozen partition's raw bytes, in name order."""
    frozen, _ = partition_parameters(model)
    h = hashlib.sha256()
    for name in sorted(frozen):
        h.update(name.encode("ascii"))
        h.update(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class DropoutPlan:
    """Counter-keyed Bernoulli masks: (epoch, patch, mc pass, layer) -> mask.

    step_key(epoch, patch) is what an MC set hands to mc_forward; each pass i
    then draws under .child("mc", i) and each dropout layer under its name,
    so the full path is base/epoch/patch/mc/layer.
    """

    rate: float
    base_key: rng.RngKey

    def step_key(self, epoch: int, patch_index: int) -> rng.RngKey:
        return self.base_key.child("epoch", epoch).child("patch", patch_index)

    def pass_key(self, epoch: int, patch_index: int, mc_pass: int) -> rng.RngKey:
        return self.step_key(epoch, patch_index).child("mc", mc_pass)


def _layer_mask(mask_key: rng.RngKey | None, rate: float, layer: str, shape) -> np.ndarray | None:
    if mask_key is None:
        return None
    n = int(np.prod(shape))
    return rng.bernoulli_mask(mask_key.child(layer), n, rate).reshape(shape)


def bind_parameters(
    model: EfdModel, tape: Tape | None, trainable: tuple[str, ...] | None = None
) -> dict[str, Tensor]:
    """Lift weights into tensors; names in `trainable` become tape parameters.

    With tape None (or trainable empty) every weight is a constant and the
    network runs as a pure function.
    """
    trainable = trainable or ()
    bound = {}
    for name, values in model.params.items():
        if name in trainable:
            if tape is None:
                raise ValueError("trainable parameters require a tape")
            bound[name] = tape.parameter(values)
        else:
            bound[name] = ad.constant(values)
    return bound


def _as_tensor(x, channels: int, what: str) -> Tensor:
    t = x if isinstance(x, Tensor) else ad.constant(x)
    if t.values.ndim != 3 or t.values.shape[0] != channels:
        raise ValueError(f"{what}: expected ({channels}, H, W), got {t.values.shape}")
    return t


def encode(params: dict[str, Tensor], x_coarse_on_fine, indices) -> tuple[Tensor, Tensor]:
    """Run both encoder branches; returns pre-dropout feature maps."""
    x = _as_tensor(x_coarse_on_fine, 1, "coarse input")
    idx = _as_tensor(indices, 3, "index stack input")
    if x.values.shape[1:] != idx.values.shape[1:]:
        raise ValueError(
            f"spatial dims differ: coarse {x.values.shape[1:]} vs indices {idx.values.shape[1:]}"
        )
    x_norm = ad.scalar_mul(ad.scalar_add(x, -LST_OFFSET_K), 1.0 / LST_SCALE_K)
    feat_c = ad.relu(ad.conv2d(x_norm, params["enc_coarse.w"], params["enc_coarse.b"]))
    feat_f = ad.relu(ad.conv2d(idx, params["enc_fine.w"], params["enc_fine.b"]))
    return feat_c, feat_f


def encode_features(model: EfdModel, x_coarse_on_fine, indices) -> tuple[np.ndarray, np.ndarray]:
    """Encoder outputs as plain arrays, for reuse while the encoders are frozen."""
    params = bind_parameters(model, None)
    feat_c, feat_f = encode(params, x_coarse_on_fine, indices)
    return feat_c.values, feat_f.values


def head(
    params: dict[str, Tensor],
    feat_c: Tensor,
    feat_f: Tensor,
    rate: float,
    mask_key: rng.RngKey | None,
) -> Tensor:
    """Dropout, fuse, decode, and map back to kelvin."""
    mask_c = _layer_mask(mask_key, rate, "enc_coarse", feat_c.values.shape)
    mask_f = _layer_mask(mask_key, rate, "enc_fine", feat_f.values.shape)
    if mask_c is not None:
        feat_c = ad.dropout_with_mask(feat_c, mask_c)
        feat_f = ad.dropout_with_mask(feat_f, mask_f)
    stacked = ad.concat_channels(feat_c, feat_f)
    fused = ad.relu(ad.conv2d(stacked, params["fusion.w"], params["fusion.b"]))
    hidden = ad.relu(ad.conv2d(fused, params["dec_hidden.w"], params["dec_hidden.b"]))
    raw = ad.conv2d(hidden, params["dec_out.w"], params["dec_out.b"])
    return ad.scalar_add(ad.scalar_mul(raw, LST_SCALE_K), LST_OFFSET_K)


def forward(
    model: EfdModel,
    x_coarse_on_fine,
    indices,
    mask_key: rng.RngKey | None = None,
    params: dict[str, Tensor] | None = None,
) -> Tensor:
    """One pass end to end.  mask_key None disables dropout (inference mode)."""
    if params is None:
        params = bind_parameters(model, None)
    feat_c, feat_f = encode(params, x_coarse_on_fine, indices)
    return head(params, feat_c, feat_f, model.dropout_rate, mask_key)


def mc_forward(
    model: EfdModel,
    x_coarse_on_fine,
    indices,
    n: int,
    key_base: rng.RngKey,
    params: dict[str, Tensor] | None = None,
    features: tuple[np.ndarray, np.ndarray] | None = None,
) -> list[Tensor]:
    """n stochastic passes with distinct per-pass mask keys.

    `features` short-circuits the encoders with precomputed maps; valid only
    while encoder weights are unchanged (they are constants on the tape, so
    no gradient is lost).
    """
    if n < 2:
        raise ValueError(f"mc_forward needs n >= 2 passes, got {n}")
    if params is None:
        params = bind_parameters(model, None)
    if features is None:
        feat_c, feat_f = encode(params, x_coarse_on_fine, indices)
    else:
        feat_c, feat_f = ad.constant(features[0]), ad.constant(features[1])
    return [
        head(params, feat_c, feat_f, model.dropout_rate, key_base.child("mc", i))
        for i in range(n)
    ]


def write_checkpoint(model: EfdModel, path) -> None:
    """EFD1: ASCII header of (name, shape, trainable) entries, then <f8 payload."""
    _, fusion = partition_parameters(model)
    entries = [(name, model.params[name]) for name in model.params]
    entries.append((_RATE_ENTRY, np.asarray(model.dropout_rate)))
    lines = [f"{EFD1_MAGIC} {len(entries)}"]
    for name, arr in entries:
        dims = " ".join(str(d) for d in arr.shape)
        flag = 1 if name in fusion else 0
        lines.append(f"{name} {dims} {flag}".rstrip())
    header = ("\n".join(lines) + "\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path) -> EfdModel:
    with open(path, "rb") as fh:
        magic_line = fh.readline().decode("ascii", errors="replace").strip()
        parts = magic_line.split(" ")
        if len(parts) != 2 or parts[0] != EFD1_MAGIC:
            raise CheckpointFormatError(f"{path}: bad magic line {magic_line!r}")
        try:
            n_entries = int(parts[1])
        except ValueError as exc:
            raise CheckpointFormatError(f"{path}: bad entry count") from exc
        entries = []
        for _ in range(n_entries):
            tokens = fh.readline().decode("ascii", errors="replace").split()
            if len(tokens) < 2:
                raise CheckpointFormatError(f"{path}: truncated header")
            name, flag = tokens[0], tokens[-1]
            shape = tuple(int(t) for t in tokens[1:-1])
            if flag not in ("0", "1"):
                raise CheckpointFormatError(f"{path}: bad trainable flag for {name}")
            entries.append((name, shape, flag == "1"))
        params = {}
        rate = None
        for name, shape, trainable in entries:
            count = int(np.prod(shape)) if shape else 1
            payload = fh.read(count * 8)
            if len(payload) != count * 8:
                raise CheckpointFormatError(f"{path}: truncated payload at {name}")
            arr = np.frombuffer(payload, dtype="<f8").reshape(shape)
            if name == _RATE_ENTRY:
                rate = float(arr)
            else:
                params[name] = arr.copy()
                if trainable != (name in FUSION_PARAMS):
                    raise CheckpointFormatError(f"{path}: partition flag mismatch for {name}")
        if fh.read(1):
            raise CheckpointFormatError(f"{path}: trailing bytes")
    if rate is None:
        raise CheckpointFormatError(f"{path}: missing {_RATE_ENTRY} entry")
    try:
        return EfdModel(params, rate)
    except ValueError as exc:
        raise CheckpointFormatError(f"{path}: {exc}") from exc
