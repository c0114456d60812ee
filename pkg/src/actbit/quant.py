"""Uniform affine quantizers.

Weights get per-output-channel symmetric integer grids with a bit-width from
{0, 2, 4, 8, 16}: 0 prunes the channel (row and bias entry zeroed), 16 is a
lossless passthrough. Activations share one bit-width across the whole model
and use asymmetric ranges calibrated from percentiles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .allocator import BitAllocation
from .calibration import CalibrationSet, as_calibration
from .model import ChannelId, Layer, PolicyModel, activate, forward
from .tensor import ShapeError

BITS = (0, 2, 4, 8, 16)
GRID_BITS = (2, 4, 8)
ACTIVATION_BITS = (4, 8, 16)
DEFAULT_PERCENTILE = 99.9


def check_bits(bit: int, allowed=BITS) -> int:
    if isinstance(bit, bool) or int(bit) != bit or int(bit) not in allowed:
        raise ValueError(f"bit-width must be one of {allowed}, got {bit!r}")
    return int(bit)


@dataclass(frozen=True)
class ChannelQuantParams:
    bit: int
    scale: float = 1.0
    zero_point: int = 0

    def __post_init__(self):
        check_bits(self.bit)
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bit - 1))

    @property
    def qmax(self) -> int:
        return 2 ** (self.bit - 1) - 1


def channel_scale(row: np.ndarray, bit: int) -> ChannelQuantParams:
    """Symmetric per-row scale: max |w| maps to the largest positive code."""
    if int(bit) not in GRID_BITS:
        raise ValueError(f"no quantization parameters apply to bit-width {bit}")
    peak = float(np.max(np.abs(row))) if np.size(row) else 0.0
    scale = peak / (2 ** (bit - 1) - 1) if peak > 0 else 1.0
    return ChannelQuantParams(int(bit), scale, 0)


def quantize_channel(row: np.ndarray, params: ChannelQuantParams) -> tuple[np.ndarray, np.ndarray]:
    """Integer codes and dequantized values for one weight row.

    Codes are ``clamp(rint(w / scale) + zero_point, -2^(b-1), 2^(b-1) - 1)``
    with ties rounded to even.
    """
    if params.bit not in GRID_BITS:
        raise ValueError(f"bit-width {params.bit} has no integer grid")
    row = np.asarray(row, dtype=np.float64)
    q = np.clip(np.rint(row / params.scale) + params.zero_point, params.qmin, params.qmax)
    deq = (q - params.zero_point) * params.scale
    return q.astype(np.int64), deq


def dequantized_row(row: np.ndarray, bit: int) -> np.ndarray:
    """Weight row as seen by the quantized model at ``bit`` (0 prunes, 16 passes through)."""
    bit = check_bits(bit)
    row = np.asarray(row, dtype=np.float64)
    if bit == 16:
        return row.copy()
    if bit == 0:
        return np.zeros_like(row)
    return quantize_channel(row, channel_scale(row, bit))[1]


def fake_quantize_activation(x: np.ndarray, lo: float, hi: float, bits: int) -> np.ndarray:
    """Asymmetric fake quantization onto ``2**bits`` levels spanning [lo, hi]."""
    if lo > hi:
        raise ValueError(f"empty range: lo={lo} > hi={hi}")
    x = np.asarray(x, dtype=np.float64)
    if bits == 16:
        return x
    if hi == lo:
        return np.full_like(x, lo)
    levels = 2**bits - 1
    scale = (hi - lo) / levels
    zero_point = np.rint(-lo / scale)
    q = np.clip(np.rint(np.clip(x, lo, hi) / scale) + zero_point, 0, levels)
    return (q - zero_point) * scale


def calibrate_activations(
    model: PolicyModel,
    calib,
    bits: int,
    percentile: float = DEFAULT_PERCENTILE,
) -> tuple[tuple[float, float], ...]:
    """Per-layer (lo, hi) clipping range of post-activation values.

    ``lo`` is the (100 - percentile)-th and ``hi`` the percentile-th
    percentile of all values a layer emits over the calibration set.
    """
    check_bits(bits, ACTIVATION_BITS)
    if not 0 < percentile <= 100:
        raise ValueError(f"percentile must lie in (0, 100], got {percentile}")
    calib = as_calibration(calib)
    calib.check_dim(model.input_dim)
    trace = forward(model, calib.observations)
    ranges = []
    for post in trace.post:
        lo, hi = np.percentile(post.ravel(), [100.0 - percentile, percentile])
        ranges.append((float(lo), float(hi)))
    return tuple(ranges)


@dataclass(frozen=True, eq=False)
class QuantizedModel:
    """A policy with per-channel quantized weights and uniform-bit activations.

    ``effective`` holds the dequantized weights actually used at inference;
    ``base`` is the untouched full-precision model. Channels not listed in
    ``params`` stay at full precision. Activation fake quantization is applied
    to every hidden layer output (the action itself is left unquantized).
    """

    base: PolicyModel
    params: Mapping[ChannelId, ChannelQuantParams]
    activation_bits: int
    activation_ranges: tuple[tuple[float, float], ...]
    effective: PolicyModel
    designated_tags: tuple[str, ...] = ()

    @property
    def input_dim(self) -> int:
        return self.base.input_dim

    @property
    def output_dim(self) -> int:
        return self.base.output_dim

    def bits(self, ch: ChannelId) -> int:
        p = self.params.get(ch)
        return 16 if p is None else p.bit

    def act(self, obs: np.ndarray) -> np.ndarray:
        h = np.asarray(obs, dtype=np.float64)
        if h.ndim < 1 or h.shape[-1] != self.input_dim:
            raise ShapeError(f"observation of shape {h.shape} does not match input_dim {self.input_dim}")
        last = len(self.effective.layers) - 1
        for k, layer in enumerate(self.effective.layers):
            h = activate(layer.activation, h @ layer.weight.T + layer.bias)
            if k < last and self.activation_bits != 16:
                lo, hi = self.activation_ranges[k]
                h = fake_quantize_activation(h, lo, hi, self.activation_bits)
        return h


def _designated_layers(model: PolicyModel, alloc: BitAllocation) -> list[int]:
    layers = sorted({ch.layer for ch in alloc.designated})
    for l in layers:
        if l >= len(model.layers):
            raise ValueError(f"allocation refers to layer {l}, model has {len(model.layers)}")
        expected = {ChannelId(l, c) for c in range(model.layers[l].out_dim)}
        present = {ch for ch in alloc.designated if ch.layer == l}
        if present != expected:
            raise ValueError(f"allocation covers {len(present)} of {len(expected)} channels of layer {l}")
    return layers


def apply_allocation(
    model: PolicyModel,
    alloc: BitAllocation,
    act_bits: int = 16,
    calib: CalibrationSet | np.ndarray | None = None,
    percentile: float = DEFAULT_PERCENTILE,
) -> QuantizedModel:
    check_bits(act_bits, ACTIVATION_BITS)
    layers_used = _designated_layers(model, alloc)
    params: dict[ChannelId, ChannelQuantParams] = {}
    new_layers = list(model.layers)
    for l in layers_used:
        layer = model.layers[l]
        w = np.array(layer.weight)
        b = np.array(layer.bias)
        for c in range(layer.out_dim):
            ch = ChannelId(l, c)
            bit = check_bits(alloc.assignment[ch])
            if bit in GRID_BITS:
                p = channel_scale(layer.weight[c], bit)
                w[c] = quantize_channel(layer.weight[c], p)[1]
            else:
                p = ChannelQuantParams(bit)
                if bit == 0:
                    w[c] = 0.0
                    b[c] = 0.0
            params[ch] = p
        new_layers[l] = Layer(w, b, layer.activation, layer.tag)
    effective = PolicyModel(tuple(new_layers))
    if act_bits == 16:
        ranges = tuple((0.0, 0.0) for _ in model.layers)
    else:
        if calib is None:
            raise ValueError("activation quantization needs a calibration set")
        ranges = calibrate_activations(effective, calib, act_bits, percentile)
    tags = tuple(sorted({model.layers[l].tag for l in layers_used}))
    return QuantizedModel(model, params, act_bits, ranges, effective, tags)


def bitmap_to_dict(qmodel: QuantizedModel) -> dict:
    return {
        "activation_bits": qmodel.activation_bits,
        "designated_tags": list(qmodel.designated_tags),
        "assignments": [
            {"layer": ch.layer, "channel": ch.channel, "bits": p.bit, "scale": p.scale, "zero_point": p.zero_point}
            for ch, p in sorted(qmodel.params.items())
        ],
    }


def save_bitmap(qmodel: QuantizedModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(bitmap_to_dict(qmodel), indent=1) + "\n")


def load_bitmap(path: str | Path) -> tuple[BitAllocation, int, tuple[str, ...]]:
    """Read a bit-map file back into (allocation, activation bits, designated tags)."""
    data = json.loads(Path(path).read_text())
    try:
        assignment = {
            ChannelId(int(a["layer"]), int(a["channel"])): check_bits(a["bits"]) for a in data["assignments"]
        }
        act_bits = check_bits(data["activation_bits"], ACTIVATION_BITS)
        tags = tuple(data["designated_tags"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed bit-map {path}: {exc!r}") from exc
    return BitAllocation(assignment, frozenset(assignment)), act_bits, tags
