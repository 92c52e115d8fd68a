"""Encoder, projector and the three classification heads.

Layout (default dims, ``K`` seen classes)::

    x --enc--> h (D=32) --closed--> p  (K-way softmax)
               |
               +--proj--> z (d=8) --multibinary--> o  (K two-way softmaxes)
                                  --open-------->  q  ((K+1)-way softmax)

With ``decoupled=False`` the projector is skipped and the multi-binary and
open heads read ``h`` directly.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_FORMAT = "iomatch-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Invalid model or training configuration."""


@dataclass(frozen=True)
class NetworkDims:
    input_dim: int = 16
    hidden: tuple[int, ...] = (192, 192)
    feature_dim: int = 32
    proj_hidden: int = 32
    proj_dim: int = 8
    decoupled: bool = True

    def validate(self) -> None:
        widths = (self.input_dim, *self.hidden, self.feature_dim, self.proj_hidden, self.proj_dim)
        if any(int(w) <= 0 for w in widths):
            raise ConfigError(f"all layer widths must be positive, got {widths}")


@dataclass
class NetworkParams:
    """Trainable weights, keyed by layer name in a fixed order."""

    dims: NetworkDims
    num_classes: int
    seed: int
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def parameters(self, prefixes: tuple[str, ...] | None = None) -> list[Tensor]:
        if prefixes is None:
            return list(self.tensors.values())
        return [t for k, t in self.tensors.items() if k.startswith(prefixes)]

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def count(self, prefixes: tuple[str, ...] | None = None) -> int:
        return sum(t.data.size for t in self.parameters(prefixes))

    def copy(self) -> "NetworkParams":
        out = NetworkParams(self.dims, self.num_classes, self.seed)
        for k, t in self.tensors.items():
            out.tensors[k] = Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k)
        return out

    @property
    def encoder_layers(self) -> int:
        return len(self.dims.hidden) + 1


# heads used by each training mode; the rest receive no gradient
BACKBONE_PREFIXES = ("enc", "closed")
IOMATCH_PREFIXES = ("proj", "multibinary", "open")


def _layer(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return w, np.zeros((1, fan_out))


def init_params(seed: int, dims: NetworkDims | None = None, num_classes: int = 4) -> NetworkParams:
    """Uniform(+-1/sqrt(fan_in)) weights and zero biases, deterministic in ``seed``."""
    dims = dims or NetworkDims()
    if num_classes < 2:
        raise ConfigError(f"need at least 2 seen classes, got K={num_classes}")
    dims.validate()
    rng = np.random.default_rng(seed)
    params = NetworkParams(dims, num_classes, seed)
    shapes: list[tuple[str, int, int]] = []
    widths = [dims.input_dim, *dims.hidden, dims.feature_dim]
    for i in range(len(widths) - 1):
        shapes.append((f"enc{i}", widths[i], widths[i + 1]))
    shapes.append(("closed", dims.feature_dim, num_classes))
    if dims.decoupled:
        shapes.append(("proj0", dims.feature_dim, dims.proj_hidden))
        shapes.append(("proj1", dims.proj_hidden, dims.proj_dim))
        head_in = dims.proj_dim
    else:
        head_in = dims.feature_dim
    shapes.append(("multibinary", head_in, 2 * num_classes))
    shapes.append(("open", head_in, num_classes + 1))
    for name, fan_in, fan_out in shapes:
        w, b = _layer(rng, fan_in, fan_out)
        params.tensors[f"{name}.w"] = Tensor(w, requires_grad=True, name=f"{name}.w")
        params.tensors[f"{name}.b"] = Tensor(b, requires_grad=True, name=f"{name}.b")
    return params


@dataclass
class ForwardOutputs:
    h: Tensor
    z: Tensor
    p: Tensor
    o: Tensor
    q_open: Tensor
    closed_logits: Tensor


def _linear(params: NetworkParams, name: str, x: Tensor) -> Tensor:
    return T.add(T.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def encode(params: NetworkParams, x: Tensor) -> Tensor:
    h = x
    for i in range(params.encoder_layers):
        h = T.relu(_linear(params, f"enc{i}", h))
    return h


def project(params: NetworkParams, h: Tensor) -> Tensor:
    if not params.dims.decoupled:
        return h
    return _linear(params, "proj1", T.relu(_linear(params, "proj0", h)))


def forward(params: NetworkParams, x, heads: str = "all") -> ForwardOutputs:
    """Run the network. ``heads="closed"`` skips the projector and its heads
    (their fields are then ``None``)."""
    x = T.as_tensor(x)
    if x.cols != params.dims.input_dim:
        raise T.ShapeError(f"expected {params.dims.input_dim} input columns, got shape {x.shape}")
    h = encode(params, x)
    logits = _linear(params, "closed", h)
    p = T.softmax_rows(logits)
    if heads == "closed":
        return ForwardOutputs(h, None, p, None, None, logits)
    z = project(params, h)
    o = T.pair_softmax(_linear(params, "multibinary", z))
    q = T.softmax_rows(_linear(params, "open", z))
    return ForwardOutputs(h, z, p, o, q, logits)


def forward_views(params: NetworkParams, x_weak, x_strong, heads: str = "all"):
    x_weak = T.as_tensor(x_weak)
    x_strong = T.as_tensor(x_strong)
    if x_weak.shape != x_strong.shape:
        raise T.ShapeError(f"weak and strong views differ in shape: {x_weak.shape} vs {x_strong.shape}")
    return forward(params, x_weak, heads), forward(params, x_strong, heads)


# ---------------------------------------------------------------------------
# checkpoints


def params_to_dict(params: NetworkParams, meta: dict | None = None) -> dict:
    d = params.dims
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "num_classes": params.num_classes,
        "seed": params.seed,
        "dims": {
            "input_dim": d.input_dim,
            "hidden": list(d.hidden),
            "feature_dim": d.feature_dim,
            "proj_hidden": d.proj_hidden,
            "proj_dim": d.proj_dim,
            "decoupled": d.decoupled,
        },
        "meta": meta or {},
        "layers": [
            {"name": k, "shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
            for k, t in params.tensors.items()
        ],
    }


def params_from_dict(blob: dict) -> NetworkParams:
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not an {CHECKPOINT_FORMAT} file")
    dims = dict(blob["dims"])
    dims["hidden"] = tuple(dims["hidden"])
    params = NetworkParams(NetworkDims(**dims), int(blob["num_classes"]), int(blob["seed"]))
    for layer in blob["layers"]:
        rows, cols = layer["shape"]
        values = np.array(layer["values"], dtype=np.float64)
        if values.size != rows * cols:
            raise ValueError(f"layer {layer['name']}: {values.size} values for shape {rows}x{cols}")
        params.tensors[layer["name"]] = Tensor(values.reshape(rows, cols), requires_grad=True,
                                               name=layer["name"])
    return params


def save_checkpoint(params: NetworkParams, path, meta: dict | None = None) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(params_to_dict(params, meta), indent=1))


def load_checkpoint(path) -> NetworkParams:
    return params_from_dict(json.loads(Path(path).read_text()))


def checkpoint_meta(path) -> dict:
    return copy.deepcopy(json.loads(Path(path).read_text()).get("meta", {}))
