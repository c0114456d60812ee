"""Action-space sensitivity of individual channels.

A channel's sensitivity at bit-width b is the action error caused by
quantizing only that channel's weight row to b bits:

* ``exact_single_step``: mean squared action deviation over a calibration set;
* ``cumulative_sensitivity``: mean over closed-loop episodes of the summed
  (unsquared) per-step deviation;
* ``proxy_sensitivity``: first-order estimate ``sigma^2 * E||J||_F^2`` with
  ``J`` the action Jacobian w.r.t. the channel and ``sigma`` the
  quantization noise it sees.

``two_stage_scores`` screens every channel with the proxy and recomputes the
most sensitive fraction exactly.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import spearmanr

from ._parallel import ordered_map
from .calibration import as_calibration
from .model import ChannelId, ForwardTrace, PolicyModel, activate, forward, forward_from, layer_jacobian
from .quant import GRID_BITS, ChannelQuantParams, channel_scale, check_bits, dequantized_row
from .simenv import EnvConfig, rollout_deviations

SCORED_BITS = (0, 2, 4, 8)
METHODS = ("exact_single_step", "proxy", "cumulative")
CSV_HEADER = ["layer", "channel", "bits", "score", "method"]
_COL = {b: i for i, b in enumerate(SCORED_BITS)}


@dataclass(frozen=True, eq=False)
class SensitivityTable:
    """Scores for bits 0, 2, 4, 8 of each channel; bit 16 is implicitly 0.

    ``scores`` and ``methods`` are (n_channels, 4) arrays aligned with
    ``channels`` and the column order of SCORED_BITS.
    """

    channels: tuple[ChannelId, ...]
    scores: np.ndarray
    methods: np.ndarray | None = None

    def __post_init__(self):
        chans = tuple(ChannelId(*c) for c in self.channels)
        scores = np.array(self.scores, dtype=np.float64, copy=True)
        if scores.shape != (len(chans), len(SCORED_BITS)):
            raise ValueError(f"scores must have shape ({len(chans)}, 4), got {scores.shape}")
        if not np.all(np.isfinite(scores)) or np.any(scores < 0):
            raise ValueError("scores must be finite and nonnegative")
        if len(set(chans)) != len(chans):
            raise ValueError("duplicate channel ids")
        if self.methods is None:
            methods = np.full(scores.shape, METHODS[0], dtype=object)
        else:
            methods = np.array(self.methods, dtype=object, copy=True)
            if methods.shape != scores.shape or not set(methods.ravel()) <= set(METHODS):
                raise ValueError("methods must match scores and name a known method")
        scores.setflags(write=False)
        methods.setflags(write=False)
        object.__setattr__(self, "channels", chans)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "methods", methods)
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(chans)})

    def __len__(self) -> int:
        return len(self.channels)

    def _row(self, ch: ChannelId) -> int:
        try:
            return self._index[ChannelId(*ch)]
        except KeyError:
            raise KeyError(f"no sensitivity entries for channel {tuple(ch)}") from None

    def score(self, ch: ChannelId, bit: int) -> float:
        if check_bits(bit) == 16:
            return 0.0
        return float(self.scores[self._row(ch), _COL[bit]])

    def method(self, ch: ChannelId, bit: int) -> str:
        return str(self.methods[self._row(ch), _COL[check_bits(bit, SCORED_BITS)]])

    def column(self, bit: int, chans: Sequence[ChannelId] | None = None) -> np.ndarray:
        if check_bits(bit) == 16:
            return np.zeros(len(chans if chans is not None else self.channels))
        if chans is None:
            return self.scores[:, _COL[bit]].copy()
        return self.score_matrix(chans)[:, _COL[bit]]

    def score_matrix(self, chans: Sequence[ChannelId]) -> np.ndarray:
        return self.scores[[self._row(c) for c in chans]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for i in _sorted_rows(self.channels):
            ch = self.channels[i]
            for j, bit in enumerate(SCORED_BITS):
                w.writerow([ch.layer, ch.channel, bit, f"{self.scores[i, j]:.17g}", self.methods[i, j]])
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str, source: str = "<csv>") -> SensitivityTable:
        rows = csv.reader(io.StringIO(text))
        header = next(rows, None)
        if header != CSV_HEADER:
            raise ValueError(f"{source}:1: expected header {','.join(CSV_HEADER)}, got {header}")
        entries: dict[ChannelId, dict[int, tuple[float, str]]] = {}
        for lineno, row in enumerate(rows, start=2):
            if not row:
                continue
            try:
                if len(row) != 5:
                    raise ValueError(f"expected 5 fields, got {len(row)}")
                ch = ChannelId(int(row[0]), int(row[1]))
                bit = check_bits(int(row[2]), SCORED_BITS)
                score = float(row[3])
                if not (math.isfinite(score) and score >= 0):
                    raise ValueError(f"score must be finite and nonnegative, got {row[3]!r}")
                if row[4] not in METHODS:
                    raise ValueError(f"unknown method {row[4]!r}")
                if bit in entries.get(ch, {}):
                    raise ValueError(f"duplicate entry for {tuple(ch)} at {bit} bits")
            except ValueError as exc:
                raise ValueError(f"{source}:{lineno}: {exc}") from None
            entries.setdefault(ch, {})[bit] = (score, row[4])
        chans = sorted(entries)
        for ch in chans:
            missing = set(SCORED_BITS) - set(entries[ch])
            if missing:
                raise ValueError(f"{source}: channel {tuple(ch)} lacks bits {sorted(missing)}")
        scores = [[entries[ch][b][0] for b in SCORED_BITS] for ch in chans]
        methods = [[entries[ch][b][1] for b in SCORED_BITS] for ch in chans]
        return cls(tuple(chans), np.array(scores).reshape(len(chans), 4), np.array(methods, dtype=object).reshape(len(chans), 4))

    @classmethod
    def load(cls, path: str | Path) -> SensitivityTable:
        return cls.from_csv(Path(path).read_text(), str(path))


def _sorted_rows(chans: Sequence[ChannelId]) -> list[int]:
    return sorted(range(len(chans)), key=lambda i: chans[i])


class _Evaluator:
    """Caches the calibration forward trace and per-layer Jacobians for one model."""

    def __init__(self, model: PolicyModel, calib):
        self.model = model
        self.calib = as_calibration(calib)
        self.calib.check_dim(model.input_dim)
        self.trace: ForwardTrace = forward(model, self.calib.observations)
        self._gain: dict[int, np.ndarray] = {}

    def check(self, ch: ChannelId) -> ChannelId:
        ch = ChannelId(*ch)
        if not (0 <= ch.layer < len(self.model.layers) and 0 <= ch.channel < self.model.layers[ch.layer].out_dim):
            raise IndexError(f"channel {tuple(ch)} does not exist")
        return ch

    def exact(self, ch: ChannelId, bit: int) -> float:
        ch, bit = self.check(ch), check_bits(bit)
        if bit == 16:
            return 0.0
        layer = self.model.layers[ch.layer]
        z = self.trace.pre[ch.layer].copy()
        if bit == 0:
            z[:, ch.channel] = 0.0
        else:
            row = dequantized_row(layer.weight[ch.channel], bit)
            z[:, ch.channel] = self.trace.layer_input(ch.layer) @ row + layer.bias[ch.channel]
        action = forward_from(self.model, ch.layer, activate(layer.activation, z))
        diff = action - self.trace.action
        return float(np.mean(np.sum(diff * diff, axis=1)))

    def gain(self, layer: int) -> np.ndarray:
        """Mean squared Frobenius norm of the pre-activation Jacobian, per channel of ``layer``."""
        if layer not in self._gain:
            jac = layer_jacobian(self.model, self.trace, layer, pre_activation=True)
            self._gain[layer] = np.mean(np.sum(jac * jac, axis=1), axis=0)
        return self._gain[layer]

    def noise_var(self, ch: ChannelId, bit: int, noise: str) -> float:
        row = self.model.layers[ch.layer].weight[ch.channel]
        x = self.trace.layer_input(ch.layer)
        if noise == "empirical":
            delta = x @ (dequantized_row(row, bit) - row)
            return float(np.mean(delta * delta))
        if noise == "uniform":
            sigma = quant_noise_std(channel_scale(row, bit))
            return sigma * sigma * float(np.mean(np.sum(x * x, axis=1)))
        raise ValueError(f"noise model must be 'empirical' or 'uniform', got {noise!r}")

    def proxy(self, ch: ChannelId, bit: int, noise: str = "empirical") -> float:
        ch, bit = self.check(ch), check_bits(bit)
        if bit == 16:
            return 0.0
        if bit == 0:
            raise ValueError("the first-order proxy does not apply to pruning (bit 0)")
        return self.noise_var(ch, bit, noise) * float(self.gain(ch.layer)[ch.channel])


def quant_noise_std(params: ChannelQuantParams) -> float:
    """Std of rounding noise uniform over one quantization step."""
    if params.bit not in GRID_BITS:
        raise ValueError(f"no rounding noise model for bit-width {params.bit}")
    return params.scale / math.sqrt(12.0)


def exact_single_step(model: PolicyModel, calib, ch: ChannelId, bit: int) -> float:
    """Mean over ``calib`` of ||A(x) - A*(x)||^2 with only ``ch`` quantized to ``bit``."""
    return _Evaluator(model, calib).exact(ch, bit)


def proxy_sensitivity(model: PolicyModel, calib, ch: ChannelId, bit: int, noise: str = "empirical") -> float:
    """First-order estimate of :func:`exact_single_step`.

    The noise variance is the mean square over ``calib`` of the channel's
    pre-activation error ``(Q(w) - w) . x`` (``noise="empirical"``), or
    ``scale^2 / 12 * E||x||^2`` under the uniform rounding-noise model
    (``noise="uniform"``). It multiplies the mean squared norm of the
    action Jacobian w.r.t. the channel's pre-activation.
    """
    return _Evaluator(model, calib).proxy(ch, bit, noise)


def perturbed_model(model: PolicyModel, ch: ChannelId, bit: int) -> PolicyModel:
    """The model with only channel ``ch`` quantized to ``bit``."""
    bit = check_bits(bit)
    row = model.layers[ch.layer].weight[ch.channel]
    return model.with_row(ch, dequantized_row(row, bit), 0.0 if bit == 0 else None)


def cumulative_sensitivity(
    model: PolicyModel,
    env: EnvConfig,
    ch: ChannelId,
    bit: int,
    horizon: int | None = None,
    episodes: int = 16,
    seed: int = 0,
    mode: str = "lockstep",
) -> float:
    """Mean over episodes of the summed per-step action deviation ||A - A*||."""
    if not isinstance(env, EnvConfig):
        raise TypeError(f"expected an EnvConfig, got {type(env).__name__}")
    if horizon is not None:
        if horizon < 1:
            raise ValueError("horizon must be at least 1")
        env = env.with_overrides(horizon=horizon)
    if check_bits(bit) == 16:
        return 0.0
    dev, _ = rollout_deviations(env, model, perturbed_model(model, ChannelId(*ch), bit), episodes, seed, mode)
    return float(np.mean(dev.sum(axis=1)))


def exact_table(
    model: PolicyModel, calib, chans: Iterable[ChannelId], workers: int | None = None
) -> SensitivityTable:
    ev = _Evaluator(model, calib)
    chans = tuple(ev.check(c) for c in chans)
    rows = ordered_map(lambda c: [ev.exact(c, b) for b in SCORED_BITS], chans, workers)
    return SensitivityTable(chans, np.array(rows).reshape(len(chans), 4))


def proxy_table(
    model: PolicyModel, calib, chans: Iterable[ChannelId], noise: str = "empirical"
) -> SensitivityTable:
    """Proxy scores at bits 2, 4, 8 with exact pruning scores at bit 0."""
    return two_stage_scores(model, calib, chans, refine_fraction=0.0, noise=noise)


def cumulative_table(
    model: PolicyModel,
    env: EnvConfig,
    chans: Iterable[ChannelId],
    episodes: int = 16,
    seed: int = 0,
    horizon: int | None = None,
    workers: int | None = None,
) -> SensitivityTable:
    chans = tuple(ChannelId(*c) for c in chans)
    rows = ordered_map(
        lambda c: [cumulative_sensitivity(model, env, c, b, horizon, episodes, seed) for b in SCORED_BITS],
        chans,
        workers,
    )
    methods = np.full((len(chans), 4), "cumulative", dtype=object)
    return SensitivityTable(chans, np.array(rows).reshape(len(chans), 4), methods)


def two_stage_scores(
    model: PolicyModel,
    calib,
    chans: Iterable[ChannelId],
    refine_fraction: float = 0.25,
    noise: str = "empirical",
    workers: int | None = None,
) -> SensitivityTable:
    """Proxy screening of every channel, exact re-scoring of the top ``refine_fraction``.

    Channels are ranked by their 2-bit proxy score; the leading
    ``floor(refine_fraction * n)`` are re-scored exactly at 2, 4 and 8 bits.
    Pruning (bit 0) is always scored exactly.
    """
    if not 0 <= refine_fraction <= 1:
        raise ValueError(f"refine_fraction must lie in [0, 1], got {refine_fraction}")
    ev = _Evaluator(model, calib)
    chans = tuple(ev.check(c) for c in chans)
    n = len(chans)
    scores = np.empty((n, 4))
    methods = np.full((n, 4), "proxy", dtype=object)
    methods[:, _COL[0]] = "exact_single_step"
    for i, c in enumerate(chans):
        for b in GRID_BITS:
            scores[i, _COL[b]] = ev.proxy(c, b, noise)
    scores[:, _COL[0]] = ordered_map(lambda c: ev.exact(c, 0), chans, workers)

    n_refine = int(math.floor(refine_fraction * n + 1e-9))
    # Stable sort: ties keep (layer, channel) order.
    order = sorted(range(n), key=lambda i: (-scores[i, _COL[2]], chans[i]))[:n_refine]
    refined = ordered_map(lambda i: [ev.exact(chans[i], b) for b in GRID_BITS], order, workers)
    for i, vals in zip(order, refined):
        for b, v in zip(GRID_BITS, vals):
            scores[i, _COL[b]] = v
            methods[i, _COL[b]] = "exact_single_step"
    return SensitivityTable(chans, scores, methods)


def rank_consistency(single: SensitivityTable, cumul: SensitivityTable, bit: int) -> float:
    """Spearman rank correlation of two tables' scores at ``bit`` over their shared channels."""
    if set(single.channels) != set(cumul.channels):
        raise ValueError("tables cover different channels")
    chans = sorted(single.channels)
    if len(chans) < 3:
        raise ValueError("rank correlation needs at least 3 channels")
    a, b = single.column(bit, chans), cumul.column(bit, chans)
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise ValueError("rank correlation is undefined for constant scores")
    return float(spearmanr(a, b).statistic)
