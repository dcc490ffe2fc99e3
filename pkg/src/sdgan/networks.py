"""Generator and discriminator topologies, and checkpoint files.

Three roles share one layer interpreter:

* ``g1``: strided conv encoder, dense bottleneck, transposed-conv decoder,
  1x1 conv with sigmoid.  Maps an occluded batch to a completed batch.
* ``g2``: plain convolutional denoising autoencoder (two strided convs, two
  transposed convs, sigmoid output).
* ``d``: strided conv stack followed by a dense sigmoid unit, one
  probability per image.  D1 and D2 use this topology with separate weights.
"""

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, FormatError
from .optim import ModelParams
from .tensor import Tensor

INIT_STD = 0.02
LEAK = 0.2


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | tconv | dense | flatten | unflatten
    out: object = None  # channels, width, or target shape for unflatten
    kernel: int = 3
    stride: int = 1
    activation: str = "linear"


@dataclass
class NetworkSpec:
    role: str
    input_shape: tuple
    layers: list = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers]
        self.layers = [
            LayerSpec(l.kind, tuple(l.out), l.kernel, l.stride, l.activation) if l.kind == "unflatten" else l
            for l in self.layers
        ]
        shape = self.input_shape
        for layer in self.layers:
            shape = _next_shape(shape, layer)
        self.output_shape = shape
        if self.role in ("g1", "g2") and self.output_shape != self.input_shape:
            raise DimensionError(f"{self.role} must preserve shape: {self.input_shape} -> {self.output_shape}")
        if self.role == "d" and self.output_shape != (1,):
            raise DimensionError(f"discriminator must emit one value per image, got {self.output_shape}")

    def to_dict(self):
        return {"role": self.role, "input_shape": list(self.input_shape), "layers": [asdict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["role"], tuple(d["input_shape"]), [LayerSpec(**l) for l in d["layers"]])


def _next_shape(shape, layer):
    if layer.kind == "conv":
        c, h, w = shape
        pad = layer.kernel // 2
        return (layer.out, (h + 2 * pad - layer.kernel) // layer.stride + 1, (w + 2 * pad - layer.kernel) // layer.stride + 1)
    if layer.kind == "tconv":
        c, h, w = shape
        return (layer.out, h * layer.stride, w * layer.stride)
    if layer.kind == "flatten":
        return (int(np.prod(shape)),)
    if layer.kind == "dense":
        return (layer.out,)
    if layer.kind == "unflatten":
        if int(np.prod(layer.out)) != int(np.prod(shape)):
            raise DimensionError(f"cannot unflatten {shape} into {layer.out}")
        return tuple(layer.out)
    raise ValueError(f"unknown layer kind {layer.kind!r}")


def g1_spec(channels=1, size=32, widths=(16, 32, 64), bottleneck=256, decoder=(32, 16, 16)):
    layers = [LayerSpec("conv", w, 3, 2, "leaky_relu") for w in widths]
    side = size // 2 ** len(widths)
    inner = (widths[-1], side, side)
    layers += [
        LayerSpec("flatten"),
        LayerSpec("dense", bottleneck, activation="leaky_relu"),
        LayerSpec("dense", int(np.prod(inner)), activation="leaky_relu"),
        LayerSpec("unflatten", inner),
    ]
    layers += [LayerSpec("tconv", w, 3, 2, "leaky_relu") for w in decoder]
    layers.append(LayerSpec("conv", channels, 1, 1, "sigmoid"))
    return NetworkSpec("g1", (channels, size, size), layers)


def g2_spec(channels=1, size=32, widths=(16, 32)):
    layers = [LayerSpec("conv", w, 3, 2, "leaky_relu") for w in widths]
    layers.append(LayerSpec("tconv", widths[0], 3, 2, "leaky_relu"))
    layers.append(LayerSpec("tconv", channels, 3, 2, "sigmoid"))
    return NetworkSpec("g2", (channels, size, size), layers)


def d_spec(channels=1, size=32, widths=(16, 32, 64)):
    layers = [LayerSpec("conv", w, 3, 2, "leaky_relu") for w in widths]
    layers += [LayerSpec("flatten"), LayerSpec("dense", 1, activation="sigmoid")]
    return NetworkSpec("d", (channels, size, size), layers)


SPEC_BUILDERS = {"g1": g1_spec, "g2": g2_spec, "d": d_spec}


def _init_std(scheme, fan_in, is_output):
    if scheme == "normal" or is_output:
        return INIT_STD
    if scheme == "he":
        return float(np.sqrt(2.0 / ((1.0 + LEAK**2) * fan_in)))
    raise ValueError(f"unknown init scheme {scheme!r}")


def init_params(spec, rng, scheme="he"):
    """Zero biases; Gaussian weights drawn layer by layer.

    ``scheme="normal"`` uses std 0.02 everywhere.  ``"he"`` (default) scales
    hidden layers by their fan-in for leaky ReLU and keeps std 0.02 on the
    output layer, so fresh networks still emit values near sigmoid(0).
    """
    params = ModelParams(spec=spec)
    shape = spec.input_shape
    last = max(i for i, l in enumerate(spec.layers) if l.kind in ("conv", "tconv", "dense"))
    for i, layer in enumerate(spec.layers):
        if layer.kind in ("conv", "tconv"):
            fan_in = shape[0] * layer.kernel * layer.kernel
            if layer.kind == "tconv":
                fan_in //= layer.stride * layer.stride
            std = _init_std(scheme, fan_in, i == last)
            w = rng.normal(0.0, std, size=(layer.out, shape[0], layer.kernel, layer.kernel))
            params.add(f"{i}.weight", Tensor(w))
            params.add(f"{i}.bias", Tensor(np.zeros(layer.out)))
        elif layer.kind == "dense":
            w = rng.normal(0.0, _init_std(scheme, shape[0], i == last), size=(shape[0], layer.out))
            params.add(f"{i}.weight", Tensor(w))
            params.add(f"{i}.bias", Tensor(np.zeros(layer.out)))
        shape = _next_shape(shape, layer)
    return params


def build_network(role, rng, scheme="he", **shape_kwargs):
    return init_params(SPEC_BUILDERS[role](**shape_kwargs), rng, scheme)


def forward(params, x):
    """Run the layer list stored on ``params.spec`` over the batch ``x``."""
    spec = params.spec
    if spec is None:
        raise ContractError("parameters carry no network spec")
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise DimensionError(f"{spec.role} expects batches of shape (N, {spec.input_shape}), got {x.shape}")
    n = x.shape[0]
    for i, layer in enumerate(spec.layers):
        if layer.kind == "conv":
            x = T.conv2d(x, params[f"{i}.weight"], params[f"{i}.bias"], layer.stride, layer.kernel // 2)
        elif layer.kind == "tconv":
            x = T.conv_transpose2d(x, params[f"{i}.weight"], params[f"{i}.bias"], layer.stride)
        elif layer.kind == "dense":
            x = T.dense(x, params[f"{i}.weight"], params[f"{i}.bias"])
        elif layer.kind == "flatten":
            x = x.reshape(n, -1)
        elif layer.kind == "unflatten":
            x = x.reshape(n, *layer.out)
        x = T.activation(x, layer.activation, LEAK)
    return x


def _forward_role(role, params, x):
    if params.spec is None or params.spec.role != role:
        found = None if params.spec is None else params.spec.role
        raise ContractError(f"expected {role} parameters, got {found}")
    return forward(params, x)


def g1_forward(occluded, params):
    return _forward_role("g1", params, occluded)


def g2_forward(nice, params):
    return _forward_role("g2", params, nice)


def d_forward(images, params):
    return _forward_role("d", params, images)


# checkpoint files

MAGIC = b"SDG1"


@dataclass
class Checkpoint:
    models: dict
    epoch: int = 0
    rng_state: dict = None
    meta: dict = field(default_factory=dict)
    arrays: dict = field(default_factory=dict)


def save_checkpoint(path, models, epoch=0, rng_state=None, meta=None, arrays=None):
    """Write ``models`` (name -> ModelParams) plus extra float arrays.

    Layout: magic ``SDG1``, little-endian uint32 header length, UTF-8 JSON
    header, then every blob as little-endian float32 in header order.
    """
    blobs = []
    for model_name, params in models.items():
        for pname, t in params.items():
            blobs.append((f"{model_name}/{pname}", t.data))
    for name, arr in (arrays or {}).items():
        blobs.append((f"extra/{name}", np.asarray(arr)))
    header = {
        "format": 1,
        "epoch": int(epoch),
        "rng_state": rng_state,
        "models": {name: p.spec.to_dict() for name, p in models.items()},
        "meta": meta or {},
        "blobs": [[name, list(arr.shape)] for name, arr in blobs],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for _, arr in blobs:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}", offset=0)
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header length", offset=len(raw))
    (head_len,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + head_len:
        raise FormatError(f"{path}: header declares {head_len} bytes, file ends early", offset=len(raw))
    try:
        header = json.loads(raw[8 : 8 + head_len].decode("utf-8"))
        specs = {name: NetworkSpec.from_dict(d) for name, d in header["models"].items()}
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}", offset=8) from exc

    models = {name: ModelParams(spec=spec) for name, spec in specs.items()}
    arrays = {}
    offset = 8 + head_len
    for name, shape in header["blobs"]:
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: blob {name!r} truncated", offset=offset)
        arr = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape).astype(np.float32)
        offset += nbytes
        group, _, rest = name.partition("/")
        if group == "extra":
            arrays[rest] = arr
        elif group in models:
            models[group].add(rest, Tensor(arr))
        else:
            raise FormatError(f"{path}: blob {name!r} belongs to no declared model", offset=offset - nbytes)
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes", offset=offset)
    return Checkpoint(models, header["epoch"], header["rng_state"], header["meta"], arrays)
