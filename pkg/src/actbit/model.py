"""Policy network as an explicit chain of tagged linear layers.

Each layer computes ``act(W @ x + b)``; a weight row is one output channel.
Tags mirror the module split of an action-producing model (vision encoder,
projector, backbone, action head) so module-level analyses survive at toy
scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .tensor import ShapeError, as_matrix, as_vector

ACTIVATIONS = ("identity", "relu", "tanh")
TAGS = ("vision", "projector", "backbone", "action_head")
# Layers excluded from quantization by default: the interfaces kept at full precision.
FULL_PRECISION_TAGS = frozenset({"projector", "action_head"})
DESIGNATED_TAGS = tuple(t for t in TAGS if t not in FULL_PRECISION_TAGS)


class ChannelId(NamedTuple):
    layer: int
    channel: int


def activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {name!r}")


def activation_grad(name: str, z: np.ndarray) -> np.ndarray:
    """Elementwise derivative at pre-activation ``z`` (relu uses 0 at the kink)."""
    if name == "identity":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    raise ValueError(f"unknown activation {name!r}")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"
    tag: str = "backbone"

    def __post_init__(self):
        w = as_matrix(self.weight, "weight")
        b = as_vector(self.bias, "bias")
        if w.shape[0] != b.shape[0]:
            raise ShapeError(f"weight has {w.shape[0]} rows but bias has {b.shape[0]} entries")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.tag not in TAGS:
            raise ValueError(f"tag must be one of {TAGS}, got {self.tag!r}")
        object.__setattr__(self, "weight", _frozen(w))
        object.__setattr__(self, "bias", _frozen(b))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class PolicyModel:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("a policy needs at least one layer")
        for k in range(1, len(layers)):
            if layers[k].in_dim != layers[k - 1].out_dim:
                raise ShapeError(
                    f"layer {k} expects {layers[k].in_dim} inputs, "
                    f"layer {k - 1} produces {layers[k - 1].out_dim}"
                )
        if layers[-1].activation != "identity":
            raise ValueError("the action layer must use the identity activation")
        object.__setattr__(self, "layers", layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def act(self, obs: np.ndarray) -> np.ndarray:
        return forward(self, obs).action

    def replace_layer(self, index: int, layer: Layer) -> PolicyModel:
        layers = list(self.layers)
        layers[index] = layer
        return PolicyModel(tuple(layers))

    def with_row(self, ch: ChannelId, row: np.ndarray, bias: float | None = None) -> PolicyModel:
        """Copy of the model with one output row (and optionally its bias) replaced."""
        layer = self.layers[ch.layer]
        w = np.array(layer.weight)
        w[ch.channel] = row
        b = np.array(layer.bias)
        if bias is not None:
            b[ch.channel] = bias
        return self.replace_layer(ch.layer, Layer(w, b, layer.activation, layer.tag))


@dataclass(frozen=True)
class ForwardTrace:
    obs: np.ndarray
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)

    @property
    def action(self) -> np.ndarray:
        return self.post[-1]

    def layer_input(self, layer: int) -> np.ndarray:
        return self.obs if layer == 0 else self.post[layer - 1]


def forward(model: PolicyModel, obs: np.ndarray) -> ForwardTrace:
    """Run the layer chain, keeping every pre- and post-activation.

    ``obs`` is a single observation (input_dim,) or a batch (n, input_dim).
    """
    x = np.asarray(obs, dtype=np.float64)
    if x.ndim < 1 or x.shape[-1] != model.input_dim:
        raise ShapeError(f"observation of shape {x.shape} does not match input_dim {model.input_dim}")
    pre, post = [], []
    h = x
    for layer in model.layers:
        z = h @ layer.weight.T + layer.bias
        h = activate(layer.activation, z)
        pre.append(z)
        post.append(h)
    return ForwardTrace(x, pre, post)


def forward_from(model: PolicyModel, layer: int, post: np.ndarray) -> np.ndarray:
    """Action obtained by feeding ``post`` as the output of ``layer`` into the rest of the chain."""
    h = np.asarray(post, dtype=np.float64)
    for lay in model.layers[layer + 1:]:
        h = activate(lay.activation, h @ lay.weight.T + lay.bias)
    return h


def _check_channel(model: PolicyModel, ch: ChannelId) -> None:
    if not 0 <= ch.layer < len(model.layers):
        raise IndexError(f"layer {ch.layer} out of range for {len(model.layers)}-layer model")
    if not 0 <= ch.channel < model.layers[ch.layer].out_dim:
        raise IndexError(f"channel {ch.channel} out of range for layer {ch.layer}")


def layer_jacobian(
    model: PolicyModel, trace: ForwardTrace, layer: int, pre_activation: bool = False
) -> np.ndarray:
    """Jacobian of the action w.r.t. every channel output of ``layer``.

    Reverse-mode over the downstream layers. Returns shape
    (..., output_dim, layer width) matching the batch shape of ``trace``.
    With ``pre_activation`` the derivative is taken w.r.t. the channel's
    pre-activation instead (the channel's own activation slope is folded in).
    """
    batch = trace.obs.shape[:-1]
    g = np.broadcast_to(np.eye(model.output_dim), batch + (model.output_dim, model.output_dim))
    for k in range(len(model.layers) - 1, layer, -1):
        lay = model.layers[k]
        g = (g * activation_grad(lay.activation, trace.pre[k])[..., None, :]) @ lay.weight
    if pre_activation:
        lay = model.layers[layer]
        g = g * activation_grad(lay.activation, trace.pre[layer])[..., None, :]
    return np.ascontiguousarray(g)


def action_jacobian_wrt_channel(
    model: PolicyModel, obs: np.ndarray, ch: ChannelId, pre_activation: bool = False
) -> np.ndarray:
    """Analytic d(action)/d(channel output) as an (output_dim, 1) matrix."""
    _check_channel(model, ch)
    obs = as_vector(obs, "obs")
    trace = forward(model, obs)
    return layer_jacobian(model, trace, ch.layer, pre_activation)[:, ch.channel : ch.channel + 1]


def fd_jacobian_wrt_channel(model: PolicyModel, obs: np.ndarray, ch: ChannelId, h: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of :func:`action_jacobian_wrt_channel`."""
    if h <= 0:
        raise ValueError("step h must be positive")
    _check_channel(model, ch)
    trace = forward(model, as_vector(obs, "obs"))
    base = trace.post[ch.layer]
    plus, minus = base.copy(), base.copy()
    plus[ch.channel] += h
    minus[ch.channel] -= h
    diff = forward_from(model, ch.layer, plus) - forward_from(model, ch.layer, minus)
    return (diff / (2.0 * h))[:, None]


def channels(model: PolicyModel, tags: Iterable[str] | None = None) -> list[ChannelId]:
    """All channel ids, layer-major; restricted to layers whose tag is in ``tags`` if given."""
    keep = None if tags is None else frozenset(tags)
    if keep is not None and not keep <= set(TAGS):
        raise ValueError(f"unknown tags {sorted(keep - set(TAGS))}")
    return [
        ChannelId(l, c)
        for l, layer in enumerate(model.layers)
        if keep is None or layer.tag in keep
        for c in range(layer.out_dim)
    ]


def model_to_dict(model: PolicyModel) -> dict:
    return {
        "input_dim": model.input_dim,
        "output_dim": model.output_dim,
        "layers": [
            {
                "tag": layer.tag,
                "activation": layer.activation,
                "weight": layer.weight.tolist(),
                "bias": layer.bias.tolist(),
            }
            for layer in model.layers
        ],
    }


def model_from_dict(data: dict) -> PolicyModel:
    try:
        layers = tuple(
            Layer(
                np.asarray(d["weight"], dtype=np.float64).reshape(len(d["weight"]), -1),
                d["bias"],
                d["activation"],
                d["tag"],
            )
            for d in data["layers"]
        )
        input_dim, output_dim = int(data["input_dim"]), int(data["output_dim"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed model description: {exc!r}") from exc
    model = PolicyModel(layers)
    if model.input_dim != input_dim or model.output_dim != output_dim:
        raise ShapeError(
            f"declared dims ({input_dim}, {output_dim}) disagree with layers "
            f"({model.input_dim}, {model.output_dim})"
        )
    return model


def save_model(model: PolicyModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)) + "\n")


def load_model(path: str | Path) -> PolicyModel:
    return model_from_dict(json.loads(Path(path).read_text()))
