"""Multi-layer perceptron classifier and its flat parameter view."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import numerics as nx
from .errors import CheckpointFormatError, CompatibilityError, DimensionError, SpecError
from .rng import STREAM_INIT, make_rng

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of an MLP: affine layers with an activation in between.

    ``hidden_dims=()`` gives a single affine layer, i.e. a model that is linear
    in its parameters.
    """

    input_dim: int = 3
    hidden_dims: tuple = (16,)
    output_dim: int = 2
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        if any(int(d) != d or d < 1 for d in dims):
            raise SpecError(f"every layer dimension must be a positive integer, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise SpecError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_dims)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(d["input_dim"], tuple(d["hidden_dims"]), d["output_dim"], d["activation"])


@dataclass(frozen=True)
class ParamDescriptor:
    layer: int
    name: str
    shape: tuple

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def to_list(self) -> list:
        return [self.layer, self.name, list(self.shape)]


def layout_for(spec: MlpSpec) -> tuple[ParamDescriptor, ...]:
    out = []
    for k, (i, o) in enumerate(spec.layer_dims):
        out.append(ParamDescriptor(k, "weight", (i, o)))
        out.append(ParamDescriptor(k, "bias", (o,)))
    return tuple(out)


def layout_from_list(items: Iterable) -> tuple[ParamDescriptor, ...]:
    return tuple(ParamDescriptor(int(l), str(n), tuple(int(s) for s in shp)) for l, n, shp in items)


@dataclass
class ParamVector:
    """Flat, ordered copy of all model parameters."""

    values: np.ndarray
    layout: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = sum(d.size for d in self.layout)
        if self.values.ndim != 1 or self.values.size != expected:
            raise DimensionError(f"parameter vector of length {self.values.size} does not fit layout of {expected}")

    def __len__(self) -> int:
        return self.values.size

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def check_compatible(self, other: "ParamVector") -> None:
        if len(self.layout) != len(other.layout):
            raise CompatibilityError(
                f"layouts differ in length: {len(self.layout)} vs {len(other.layout)} descriptors"
            )
        for a, b in zip(self.layout, other.layout):
            if a != b:
                raise CompatibilityError(f"layouts differ at descriptor {a} vs {b}")

    def unflatten(self) -> list[np.ndarray]:
        out, offset = [], 0
        for d in self.layout:
            out.append(self.values[offset: offset + d.size].reshape(d.shape).copy())
            offset += d.size
        return out

    @classmethod
    def flatten(cls, arrays: Sequence[np.ndarray], layout: tuple) -> "ParamVector":
        for a, d in zip(arrays, layout):
            if tuple(np.shape(a)) != d.shape:
                raise DimensionError(f"array of shape {np.shape(a)} does not match descriptor {d}")
        return cls(np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays]), layout)


class Mlp:
    """MLP whose parameters live in one contiguous float64 buffer.

    Each weight and bias is a view into that buffer, wrapped by a persistent
    requires-grad leaf tensor, so ``set_params`` is a single copy and the
    gradient comes back in the same order via :meth:`grad_vector`.
    """

    def __init__(self, spec: MlpSpec, values: Optional[np.ndarray] = None):
        self.spec = spec
        self.layout = layout_for(spec)
        self._flat = np.zeros(spec.n_params) if values is None else np.array(values, dtype=np.float64)
        if self._flat.shape != (spec.n_params,):
            raise DimensionError(f"expected {spec.n_params} parameters, got shape {self._flat.shape}")
        self._views = []
        offset = 0
        for d in self.layout:
            self._views.append(self._flat[offset: offset + d.size].reshape(d.shape))
            offset += d.size
        self.leaves = [nx.Tensor(v, requires_grad=True, copy=False) for v in self._views]

    @classmethod
    def init(cls, spec: MlpSpec, seed: int) -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        rng = make_rng(seed, STREAM_INIT)
        model = cls(spec)
        for d, view in zip(model.layout, model._views):
            if d.name == "weight":
                fan_in, fan_out = d.shape
                bound = np.sqrt(6.0 / (fan_in + fan_out))
                view[...] = rng.uniform(-bound, bound, size=d.shape)
        return model

    def clone(self) -> "Mlp":
        return Mlp(self.spec, self._flat)

    def forward(self, x, track_params: bool = True) -> nx.Tensor:
        """Raw logits for a batch ``x`` of shape ``B x input_dim``.

        With ``track_params=False`` the parameters enter the tape as constants,
        which is what input-gradient attacks want.
        """
        x = nx.as_tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise DimensionError(f"expected input of shape (B, {self.spec.input_dim}), got {x.shape}")
        params = self.leaves if track_params else [nx.Tensor(v, copy=False) for v in self._views]
        act = nx.tanh if self.spec.activation == "tanh" else nx.relu
        h = x
        n_layers = len(params) // 2
        for k in range(n_layers):
            h = nx.matmul(h, params[2 * k]) + params[2 * k + 1]
            if k < n_layers - 1:
                h = act(h)
        return h

    __call__ = forward

    def logits(self, x) -> np.ndarray:
        """Forward pass on plain arrays, outside any tape."""
        return self.forward(x, track_params=False).data

    def predict(self, x) -> np.ndarray:
        # np.argmax picks the lowest index on ties
        return np.argmax(self.logits(x), axis=1)

    def accuracy(self, x, y) -> float:
        y = np.asarray(y)
        if y.size == 0:
            return 0.0
        return float(np.mean(self.predict(x) == y))

    def get_params(self) -> ParamVector:
        return ParamVector(self._flat.copy(), self.layout)

    def set_params(self, p: ParamVector) -> None:
        self.get_params_view().check_compatible(p)
        self._flat[...] = p.values

    def get_params_view(self) -> ParamVector:
        return ParamVector(self._flat, self.layout)

    def zero_grad(self) -> None:
        for leaf in self.leaves:
            leaf.grad = None

    def grad_vector(self) -> np.ndarray:
        return np.concatenate([
            (np.zeros(leaf.data.size) if leaf.grad is None else leaf.grad.ravel()) for leaf in self.leaves
        ])


def get_params(model: Mlp) -> ParamVector:
    return model.get_params()


def set_params(model: Mlp, p: ParamVector) -> None:
    model.set_params(p)


# --- checkpoint file codec -------------------------------------------------
#
#   b"ADVL" | u16 version | u32 header length | JSON header | float64 payload
#
# All integers and floats are little-endian. The header carries the layout
# descriptors plus caller metadata; "arrays" names the payload segments in order.

MAGIC = b"ADVL"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sHI")


def encode_checkpoint(header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    header = dict(header)
    header["arrays"] = [[name, int(np.asarray(a).size)] for name, a in arrays.items()]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.asarray(a, dtype="<f8").ravel().tobytes() for a in arrays.values())
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(blob)) + blob + payload


def decode_checkpoint(raw: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(raw) < _PREFIX.size:
        raise CheckpointFormatError("file too short to be a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    start = _PREFIX.size
    if len(raw) < start + hlen:
        raise CheckpointFormatError("truncated header")
    try:
        header = json.loads(raw[start: start + hlen].decode("utf-8"))
        segments = [(str(n), int(k)) for n, k in header["arrays"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"corrupt header: {exc}") from None
    body = raw[start + hlen:]
    total = sum(k for _, k in segments)
    if len(body) != 8 * total:
        raise CheckpointFormatError(f"payload holds {len(body)} bytes, expected {8 * total}")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    arrays, offset = {}, 0
    for name, k in segments:
        arrays[name] = flat[offset: offset + k].copy()
        offset += k
    return header, arrays


def model_header(model: Mlp) -> dict:
    return {"spec": model.spec.to_dict(), "layout": [d.to_list() for d in model.layout]}


def model_from_header(header: dict, values: np.ndarray) -> Mlp:
    try:
        spec = MlpSpec.from_dict(header["spec"])
        layout = layout_from_list(header["layout"])
    except (KeyError, TypeError, ValueError, SpecError) as exc:
        raise CheckpointFormatError(f"corrupt model header: {exc}") from None
    if layout != layout_for(spec):
        raise CheckpointFormatError("layout descriptor does not match the stored model spec")
    if values.size != spec.n_params:
        raise CheckpointFormatError(f"expected {spec.n_params} parameters, found {values.size}")
    return Mlp(spec, values)
