"""Declarative model specs, parameter stores, the reference food-recognition
architecture, transfer-learning surgery, and weight serialization.

A `ModelSpec` is an immutable sequence of `LayerSpec`s plus an input shape
and a `top_boundary` index that splits the convolutional backbone from the
classification top. Parameters live outside the spec in a `ParamStore`
keyed `"<layer>.<field>"`, so the same spec can be evaluated against many
parameter sets.

Two on-disk formats live here: a line-oriented text form of the spec
(one layer per line, `name kind key=value ...`) and the "PFW1" weight
container, which binds its tensors to a digest of the spec text so weights
cannot be loaded onto a different architecture.
"""

from __future__ import annotations

import dataclasses
import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import layers as L
from .errors import (
    DataFormatError,
    GeometryError,
    ShapeError,
    UnknownLayerError,
    WeightDigestError,
)
from .seeding import make_rng
from .tensor import (
    ConvGeometry,
    Tensor4,
    atomic_write_bytes,
    conv_output_size,
    same_padding_amount,
    tensor_from_bytes,
    tensor_to_bytes,
)

LAYER_KINDS = ("conv", "pool", "flatten", "dense", "dropout", "batchnorm")
PFW1_MAGIC = b"PFW1"

# Reference architecture constants: conv layers per block and base filter
# counts, scaled by width_scale at build time.
PUREFOODNET_BLOCKS = (2, 3, 3)
PUREFOODNET_WIDTHS = (128, 256, 512)
PUREFOODNET_DENSE_WIDTH = 512


@dataclass(frozen=True)
class LayerSpec:
    """One layer's kind, name, hyperparameters, and trainable flag.

    Fields that do not apply to the kind must stay None; validation is
    per kind.
    """

    name: str
    kind: str
    trainable: bool = True
    filters: int | None = None
    kernel: int | None = None
    stride: int | None = None
    padding: int | None = None
    activation: str | None = None
    window: int | None = None
    mode: str | None = None
    units: int | None = None
    rate: float | None = None

    def __post_init__(self):
        if not self.name or any(ch.isspace() for ch in self.name):
            raise ValueError(f"layer name must be a non-empty token, got {self.name!r}")
        if self.kind not in LAYER_KINDS:
            raise UnknownLayerError(f"unknown layer kind {self.kind!r} (layer {self.name!r})")
        required = {
            "conv": ("filters", "kernel", "stride", "padding", "activation"),
            "pool": ("window", "stride", "mode"),
            "flatten": (),
            "dense": ("units", "activation"),
            "dropout": ("rate",),
            "batchnorm": (),
        }[self.kind]
        all_fields = ("filters", "kernel", "stride", "padding", "activation",
                      "window", "mode", "units", "rate")
        for f in all_fields:
            v = getattr(self, f)
            if f in required and v is None:
                raise ValueError(f"layer {self.name!r} ({self.kind}) is missing {f}")
            if f not in required and v is not None:
                raise ValueError(f"layer {self.name!r} ({self.kind}) does not take {f}")
        if self.kind == "conv":
            if self.filters < 1:
                raise ValueError(f"layer {self.name!r}: filters must be >= 1")
            ConvGeometry(self.kernel, self.stride, self.padding)
            if self.activation not in L.CONV_ACTIVATIONS:
                raise ValueError(f"layer {self.name!r}: conv activation {self.activation!r}")
        elif self.kind == "pool":
            if self.window < 1 or self.stride < 1:
                raise ValueError(f"layer {self.name!r}: window and stride must be >= 1")
            if self.mode not in L.POOL_MODES:
                raise ValueError(f"layer {self.name!r}: pool mode {self.mode!r}")
        elif self.kind == "dense":
            if self.units < 1:
                raise ValueError(f"layer {self.name!r}: units must be >= 1")
            if self.activation not in L.DENSE_ACTIVATIONS:
                raise ValueError(f"layer {self.name!r}: dense activation {self.activation!r}")
        elif self.kind == "dropout":
            if not 0.0 <= self.rate < 1.0:
                raise ValueError(f"layer {self.name!r}: rate must be in [0, 1), got {self.rate}")


def conv_spec(name, filters, kernel=3, stride=1, padding=None, activation="relu"):
    """Conv LayerSpec; padding defaults to the size-preserving amount."""
    if padding is None:
        padding = same_padding_amount(kernel)
    return LayerSpec(name=name, kind="conv", filters=filters, kernel=kernel,
                     stride=stride, padding=padding, activation=activation)


def pool_spec(name, window=2, stride=2, mode="max"):
    return LayerSpec(name=name, kind="pool", window=window, stride=stride, mode=mode)


def flatten_spec(name="flatten"):
    return LayerSpec(name=name, kind="flatten")


def dense_spec(name, units, activation="none"):
    return LayerSpec(name=name, kind="dense", units=units, activation=activation)


def dropout_spec(name, rate):
    return LayerSpec(name=name, kind="dropout", rate=rate)


def batchnorm_spec(name):
    return LayerSpec(name=name, kind="batchnorm")


@dataclass(frozen=True)
class ModelSpec:
    """Input shape (h, w, c), ordered layers, and the backbone/top split."""

    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    top_boundary: int

    def __post_init__(self):
        h, w, c = self.input_shape
        if min(h, w, c) < 1:
            raise ValueError(f"input shape must be positive, got {self.input_shape}")
        object.__setattr__(self, "input_shape", (int(h), int(w), int(c)))
        object.__setattr__(self, "layers", tuple(self.layers))
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate layer names: {dupes}")
        if not 0 <= self.top_boundary <= len(self.layers):
            raise ValueError(
                f"top_boundary {self.top_boundary} outside [0, {len(self.layers)}]"
            )
        infer_shapes(self)  # fail construction if the chain cannot be evaluated

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise UnknownLayerError(f"no layer named {name!r}")

    def index_of(self, name: str) -> int:
        for idx, layer in enumerate(self.layers):
            if layer.name == name:
                return idx
        raise UnknownLayerError(f"no layer named {name!r}")

    @property
    def backbone_layers(self) -> tuple[LayerSpec, ...]:
        return self.layers[:self.top_boundary]

    @property
    def top_layers(self) -> tuple[LayerSpec, ...]:
        return self.layers[self.top_boundary:]


def infer_shapes(spec: ModelSpec) -> list[tuple[int, int, int]]:
    """Per-boundary (h, w, c) shapes: entry 0 is the input, entry j+1 follows
    layer j. Raises naming the offending layer when a chain is impossible."""
    shapes = [tuple(spec.input_shape)]
    h, w, c = spec.input_shape
    for layer in spec.layers:
        try:
            if layer.kind == "conv":
                g = ConvGeometry(layer.kernel, layer.stride, layer.padding)
                h, w = conv_output_size(h, g), conv_output_size(w, g)
                c = layer.filters
            elif layer.kind == "pool":
                for dim in (h, w):
                    if layer.window > dim:
                        raise GeometryError(f"pool window {layer.window} exceeds side {dim}")
                    if (dim - layer.window) % layer.stride != 0:
                        raise GeometryError(
                            f"pool window {layer.window}/stride {layer.stride} "
                            f"does not tile side {dim}"
                        )
                h = (h - layer.window) // layer.stride + 1
                w = (w - layer.window) // layer.stride + 1
            elif layer.kind == "flatten":
                h, w, c = 1, 1, h * w * c
            elif layer.kind == "dense":
                if h != 1 or w != 1:
                    raise ShapeError(f"dense needs flattened input, have ({h}, {w}, {c})")
                c = layer.units
        except GeometryError as e:
            raise GeometryError(f"layer {layer.name!r}: {e}") from None
        except ShapeError as e:
            raise ShapeError(f"layer {layer.name!r}: {e}") from None
        shapes.append((h, w, c))
    return shapes


class ParamStore:
    """Ordered mapping of parameter name to ndarray.

    Holds trainable tensors and batch-norm running statistics alike; what the
    optimizer may touch is decided by `trainable_param_names`, not here.
    """

    def __init__(self, arrays: dict[str, np.ndarray] | None = None):
        self._arrays: dict[str, np.ndarray] = {}
        if arrays:
            for name, arr in arrays.items():
                self[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._arrays[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __setitem__(self, name: str, arr: np.ndarray):
        if not isinstance(arr, np.ndarray):
            raise TypeError(f"parameter {name!r} must be an ndarray, got {type(arr).__name__}")
        self._arrays[name] = arr

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def keys(self):
        return self._arrays.keys()

    def values(self):
        return self._arrays.values()

    def items(self):
        return self._arrays.items()

    def copy(self) -> "ParamStore":
        return ParamStore({name: arr.copy() for name, arr in self._arrays.items()})

    def astype(self, dtype) -> "ParamStore":
        dt = np.dtype(dtype)
        return ParamStore({name: arr.astype(dt) for name, arr in self._arrays.items()})

    def total_values(self) -> int:
        return sum(arr.size for arr in self._arrays.values())

    def __eq__(self, other):
        if not isinstance(other, ParamStore):
            return NotImplemented
        if list(self.keys()) != list(other.keys()):
            return False
        return all(np.array_equal(self[k], other[k]) for k in self.keys())

    def __repr__(self):
        return f"ParamStore({len(self)} tensors, {self.total_values()} values)"


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Expected name -> shape for every parameter of the spec, in layer order."""
    shapes = infer_shapes(spec)
    out: dict[str, tuple[int, ...]] = {}
    for layer, (h, w, c_in) in zip(spec.layers, shapes):
        if layer.kind == "conv":
            out[f"{layer.name}.filters"] = (layer.filters, layer.kernel, layer.kernel, c_in)
            out[f"{layer.name}.bias"] = (layer.filters,)
        elif layer.kind == "dense":
            out[f"{layer.name}.weights"] = (c_in, layer.units)
            out[f"{layer.name}.bias"] = (layer.units,)
        elif layer.kind == "batchnorm":
            for field in ("gamma", "beta", "running_mean", "running_var"):
                out[f"{layer.name}.{field}"] = (c_in,)
    return out


def trainable_param_names(spec: ModelSpec) -> list[str]:
    """Parameters the optimizer may update: weights and biases of trainable
    layers plus batch-norm gamma/beta. Running statistics are never included."""
    names = []
    for layer in spec.layers:
        if not layer.trainable:
            continue
        if layer.kind == "conv":
            names += [f"{layer.name}.filters", f"{layer.name}.bias"]
        elif layer.kind == "dense":
            names += [f"{layer.name}.weights", f"{layer.name}.bias"]
        elif layer.kind == "batchnorm":
            names += [f"{layer.name}.gamma", f"{layer.name}.beta"]
    return names


def penalized_weight_names(spec: ModelSpec) -> list[str]:
    """Weight tensors subject to L1/L2 penalties: conv filters and dense
    weight matrices. Biases and batch-norm parameters are exempt."""
    names = []
    for layer in spec.layers:
        if layer.kind == "conv":
            names.append(f"{layer.name}.filters")
        elif layer.kind == "dense":
            names.append(f"{layer.name}.weights")
    return names


def init_params(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> ParamStore:
    """Fresh parameters: Glorot-uniform weights, zero biases, identity norms.

    Each layer draws from its own seeded stream, so adding or removing one
    layer leaves the others' initial values untouched.
    """
    from .training import glorot_init  # deferred: training imports this module

    dt = np.dtype(dtype)
    params = ParamStore()
    for name, shape in param_shapes(spec).items():
        layer_name, field = name.rsplit(".", 1)
        if field in ("filters", "weights"):
            rng = make_rng(seed, "init", layer_name)
            params[name] = glorot_init(shape, rng).astype(dt)
        elif field in ("bias", "beta", "running_mean"):
            params[name] = np.zeros(shape, dtype=dt)
        else:  # gamma, running_var
            params[name] = np.ones(shape, dtype=dt)
    return params


def _materialize(layer: LayerSpec, params: ParamStore):
    n = layer.name
    if layer.kind == "conv":
        return L.ConvLayer(params[f"{n}.filters"], params[f"{n}.bias"],
                           ConvGeometry(layer.kernel, layer.stride, layer.padding),
                           layer.activation)
    if layer.kind == "pool":
        return L.PoolLayer(layer.window, layer.stride, layer.mode)
    if layer.kind == "dense":
        return L.DenseLayer(params[f"{n}.weights"], params[f"{n}.bias"], layer.activation)
    if layer.kind == "dropout":
        return L.DropoutLayer(layer.rate)
    if layer.kind == "batchnorm":
        return L.BatchNormLayer(params[f"{n}.gamma"], params[f"{n}.beta"],
                                params[f"{n}.running_mean"], params[f"{n}.running_var"])
    return None  # flatten carries no state


def _apply_cached(layer: LayerSpec, obj, x: Tensor4, training: bool,
                  rng: np.random.Generator | None, update_stats: bool = True):
    if layer.kind == "conv":
        return L.conv2d_cached(x, obj, training)
    if layer.kind == "pool":
        return L.pool_cached(x, obj)
    if layer.kind == "flatten":
        return L.flatten_cached(x)
    if layer.kind == "dense":
        return L.dense_cached(x, obj)
    if layer.kind == "dropout":
        return L.dropout_cached(x, obj, training, rng)
    # Frozen batch norm runs on its running statistics even during training,
    # so freezing keeps its bytes exactly stable.
    return L.batchnorm_cached(x, obj, training and layer.trainable, update_stats)


def forward_with_caches(spec: ModelSpec, params: ParamStore, x: Tensor4,
                        training: bool = False,
                        rng: np.random.Generator | None = None,
                        update_stats: bool = True,
                        ) -> tuple[Tensor4, list[tuple[LayerSpec, object]]]:
    caches = []
    for layer in spec.layers:
        obj = _materialize(layer, params)
        x, cache = _apply_cached(layer, obj, x, training, rng, update_stats)
        caches.append((layer, cache))
    return x, caches


def forward(spec: ModelSpec, params: ParamStore, x: Tensor4,
            training: bool = False, rng: np.random.Generator | None = None) -> Tensor4:
    """Run the whole model; returns the final layer's output."""
    out, _ = forward_with_caches(spec, params, x, training, rng)
    return out


def forward_slice(spec: ModelSpec, params: ParamStore, x: Tensor4,
                  start: int = 0, stop: int | None = None) -> Tensor4:
    """Inference pass over layers[start:stop] starting from activation x."""
    for layer in spec.layers[start:stop]:
        obj = _materialize(layer, params)
        x, _ = _apply_cached(layer, obj, x, False, None)
    return x


def capture_activations(spec: ModelSpec, params: ParamStore, x: Tensor4,
                        layer_names) -> dict[str, Tensor4]:
    """Inference-mode outputs at the named layers, keyed by name."""
    wanted = set(layer_names)
    known = {layer.name for layer in spec.layers}
    missing = sorted(wanted - known)
    if missing:
        raise UnknownLayerError(f"no layer named {missing[0]!r}")
    captured: dict[str, Tensor4] = {}
    for layer in spec.layers:
        obj = _materialize(layer, params)
        x, _ = _apply_cached(layer, obj, x, False, None)
        if layer.name in wanted:
            captured[layer.name] = x
    return captured


@dataclass(frozen=True)
class LayerLiveness:
    """Dead-filter scan result for one conv layer."""

    layer: str
    filter_count: int
    dead: tuple[int, ...]

    @property
    def dead_fraction(self) -> float:
        return len(self.dead) / self.filter_count


def dead_filter_report(spec: ModelSpec, params: ParamStore, probes: Tensor4,
                       threshold: float = 1e-6) -> list[LayerLiveness]:
    """Flag conv filters whose activation never rises above threshold.

    A filter is dead when every value of its output map stays <= threshold
    across every probe image, the signature of a unit that no input can turn
    on.
    """
    if probes.i < 1:
        raise ValueError("probe batch must be non-empty")
    conv_names = [layer.name for layer in spec.layers if layer.kind == "conv"]
    maps = capture_activations(spec, params, probes, conv_names)
    report = []
    for name in conv_names:
        act = maps[name].data  # (i, h, w, f)
        peak = act.max(axis=(0, 1, 2))
        dead = tuple(int(f) for f in np.flatnonzero(peak <= threshold))
        report.append(LayerLiveness(name, act.shape[3], dead))
    return report


def build_purefoodnet(num_classes: int, width_scale: float = 1.0,
                      input_side: int = 224, in_channels: int = 3,
                      dropout_rate: float = 0.5) -> ModelSpec:
    """The reference architecture: three conv blocks of (2, 3, 3) layers with
    (128, 256, 512) base filter counts scaled by width_scale, every conv
    3x3/stride-1/same-padding with fused ReLU and a batch norm after it, a
    2x2/stride-2 max pool closing each block, then
    flatten -> dense(512 * width_scale, ReLU) -> dropout -> softmax predictor.

    `width_scale` shrinks every width by the same factor so small builds keep
    the exact block structure. top_boundary sits at the flatten layer.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if width_scale <= 0:
        raise ValueError(f"width_scale must be positive, got {width_scale}")
    if input_side < 8 or input_side % 8 != 0:
        raise ValueError(
            f"input_side must be a positive multiple of 8 (three 2x pools), got {input_side}"
        )
    specs = []
    for block, (depth, base) in enumerate(zip(PUREFOODNET_BLOCKS, PUREFOODNET_WIDTHS), start=1):
        filters = round(base * width_scale)
        if filters < 1:
            raise ValueError(f"width_scale {width_scale} collapses block {block} to 0 filters")
        for j in range(1, depth + 1):
            specs.append(conv_spec(f"block{block}_conv{j}", filters))
            specs.append(batchnorm_spec(f"block{block}_bn{j}"))
        specs.append(pool_spec(f"block{block}_pool"))
    top_boundary = len(specs)
    dense_width = round(PUREFOODNET_DENSE_WIDTH * width_scale)
    if dense_width < 1:
        raise ValueError(f"width_scale {width_scale} collapses the dense layer to 0 units")
    specs.append(flatten_spec("flatten"))
    specs.append(dense_spec("fc1", dense_width, activation="relu"))
    specs.append(dropout_spec("fc1_drop", dropout_rate))
    specs.append(dense_spec("predictor", num_classes, activation="softmax"))
    return ModelSpec(input_shape=(input_side, input_side, in_channels),
                     layers=tuple(specs), top_boundary=top_boundary)


def strip_top_layers(spec: ModelSpec, params: ParamStore) -> tuple[ModelSpec, ParamStore]:
    """Drop the classification top; keep backbone layers and their weights
    bit-identical."""
    backbone = ModelSpec(input_shape=spec.input_shape,
                         layers=spec.layers[:spec.top_boundary],
                         top_boundary=spec.top_boundary)
    keep = set(param_shapes(backbone))
    backbone_params = ParamStore({name: arr.copy() for name, arr in params.items()
                                  if name in keep})
    return backbone, backbone_params


def attach_head(spec: ModelSpec, params: ParamStore, new_num_classes: int,
                units: int = 512, dropout_rate: float = 0.5,
                seed: int = 0) -> tuple[ModelSpec, ParamStore]:
    """Put a fresh classification top on a backbone.

    The new stack is flatten -> dense(units, ReLU) -> dropout -> softmax
    predictor sized to new_num_classes, Glorot-initialized from `seed`.
    Backbone parameters are carried over bit-identically.
    """
    if new_num_classes < 2:
        raise ValueError(f"new_num_classes must be >= 2, got {new_num_classes}")
    backbone, backbone_params = strip_top_layers(spec, params)
    head = (flatten_spec("flatten"),
            dense_spec("fc1", units, activation="relu"),
            dropout_spec("fc1_drop", dropout_rate),
            dense_spec("predictor", new_num_classes, activation="softmax"))
    new_spec = ModelSpec(input_shape=backbone.input_shape,
                         layers=backbone.layers + head,
                         top_boundary=len(backbone.layers))
    dtype = next(iter(backbone_params.values())).dtype if len(backbone_params) else np.float32
    fresh = init_params(new_spec, seed=seed, dtype=dtype)
    merged = ParamStore()
    for name in param_shapes(new_spec):
        merged[name] = backbone_params[name] if name in backbone_params else fresh[name]
    return new_spec, merged


def set_trainable(spec: ModelSpec, layer_names, flag: bool) -> ModelSpec:
    """New spec with the named layers' trainable flag set to `flag`."""
    wanted = set(layer_names)
    known = {layer.name for layer in spec.layers}
    missing = sorted(wanted - known)
    if missing:
        raise UnknownLayerError(f"no layer named {missing[0]!r}")
    new_layers = tuple(
        dataclasses.replace(layer, trainable=flag) if layer.name in wanted else layer
        for layer in spec.layers
    )
    return ModelSpec(spec.input_shape, new_layers, spec.top_boundary)


# ---------------------------------------------------------------------------
# Text form: `input h w c`, `top n`, then one `name kind key=value ...` line
# per layer. The digest hashes the architecture only (trainable flags are
# training metadata and excluded), so freezing layers does not orphan weights.
# ---------------------------------------------------------------------------

_KIND_KEYS = {
    "conv": ("filters", "kernel", "stride", "padding", "activation"),
    "pool": ("mode", "window", "stride"),
    "flatten": (),
    "dense": ("units", "activation"),
    "dropout": ("rate",),
    "batchnorm": (),
}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _layer_line(layer: LayerSpec, include_trainable: bool) -> str:
    parts = [layer.name, layer.kind]
    parts += [f"{key}={_format_value(getattr(layer, key))}" for key in _KIND_KEYS[layer.kind]]
    if include_trainable and not layer.trainable:
        parts.append("trainable=false")
    return " ".join(parts)


def model_spec_text(spec: ModelSpec) -> str:
    h, w, c = spec.input_shape
    lines = [f"input {h} {w} {c}", f"top {spec.top_boundary}"]
    lines += [_layer_line(layer, include_trainable=True) for layer in spec.layers]
    return "\n".join(lines) + "\n"


def spec_digest(spec: ModelSpec) -> bytes:
    h, w, c = spec.input_shape
    lines = [f"input {h} {w} {c}", f"top {spec.top_boundary}"]
    lines += [_layer_line(layer, include_trainable=False) for layer in spec.layers]
    return hashlib.sha256(("\n".join(lines) + "\n").encode("utf-8")).digest()


_INT_KEYS = {"filters", "kernel", "stride", "padding", "window", "units"}
_FLOAT_KEYS = {"rate"}


def parse_model_spec(text: str) -> ModelSpec:
    lines = [ln for ln in (raw.strip() for raw in text.splitlines()) if ln]
    if len(lines) < 2 or not lines[0].startswith("input ") or not lines[1].startswith("top "):
        raise DataFormatError("model spec must start with 'input h w c' and 'top n' lines")
    try:
        h, w, c = (int(tok) for tok in lines[0].split()[1:])
        top_boundary = int(lines[1].split()[1])
    except (ValueError, IndexError):
        raise DataFormatError(f"bad model spec header: {lines[0]!r} / {lines[1]!r}") from None
    layer_specs = []
    for lineno, line in enumerate(lines[2:], start=3):
        tokens = line.split()
        if len(tokens) < 2:
            raise DataFormatError(f"line {lineno}: expected 'name kind ...', got {line!r}")
        name, kind = tokens[0], tokens[1]
        fields: dict = {"name": name, "kind": kind}
        for token in tokens[2:]:
            key, sep, raw = token.partition("=")
            if not sep:
                raise DataFormatError(f"line {lineno}: expected key=value, got {token!r}")
            try:
                if key == "trainable":
                    if raw not in ("true", "false"):
                        raise ValueError(raw)
                    fields[key] = raw == "true"
                elif key in _INT_KEYS:
                    fields[key] = int(raw)
                elif key in _FLOAT_KEYS:
                    fields[key] = float(raw)
                elif key in ("activation", "mode"):
                    fields[key] = raw
                else:
                    raise DataFormatError(f"line {lineno}: unknown key {key!r}")
            except ValueError:
                raise DataFormatError(f"line {lineno}: bad value for {key}: {raw!r}") from None
        try:
            layer_specs.append(LayerSpec(**fields))
        except (ValueError, TypeError, UnknownLayerError) as e:
            raise DataFormatError(f"line {lineno}: {e}") from None
    try:
        return ModelSpec((h, w, c), tuple(layer_specs), top_boundary)
    except (ValueError, GeometryError, ShapeError) as e:
        raise DataFormatError(f"invalid model spec: {e}") from None


def save_model_spec(path, spec: ModelSpec) -> None:
    atomic_write_bytes(path, model_spec_text(spec).encode("utf-8"))


def load_model_spec(path) -> ModelSpec:
    with open(path, "rb") as fh:
        return parse_model_spec(fh.read().decode("utf-8"))


# ---------------------------------------------------------------------------
# PFW1 weight container: magic, 32-byte spec digest, u64 tensor count, then
# per tensor a u32 name length, the UTF-8 name, and a PFT1 payload. Rank-1
# and rank-2 parameters ride as degenerate 4-D shapes and are restored from
# the spec's expected shapes on load.
# ---------------------------------------------------------------------------

def _as_tensor4(arr: np.ndarray) -> Tensor4:
    if arr.ndim == 4:
        return Tensor4(arr)
    if arr.ndim == 1:
        return Tensor4(arr.reshape(1, 1, 1, -1))
    if arr.ndim == 2:
        return Tensor4(arr.reshape(1, 1, *arr.shape))
    raise ShapeError(f"cannot serialize rank-{arr.ndim} parameter")


def weights_to_bytes(spec: ModelSpec, params: ParamStore) -> bytes:
    expected = param_shapes(spec)
    if list(params.keys()) != list(expected.keys()):
        raise ShapeError(
            f"parameter names do not match the spec: have {sorted(params.keys())[:3]}..., "
            f"expected {sorted(expected.keys())[:3]}..."
        )
    chunks = [PFW1_MAGIC, spec_digest(spec), struct.pack("<Q", len(params))]
    for name, arr in params.items():
        if arr.shape != expected[name]:
            raise ShapeError(f"parameter {name!r} has shape {arr.shape}, expected {expected[name]}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(tensor_to_bytes(_as_tensor4(arr)))
    return b"".join(chunks)


def weights_from_bytes(buf: bytes, spec: ModelSpec) -> ParamStore:
    if len(buf) < 44 or buf[:4] != PFW1_MAGIC:
        raise DataFormatError("not a PFW1 weight payload")
    digest = buf[4:36]
    want = spec_digest(spec)
    if digest != want:
        raise WeightDigestError(
            f"weight file was saved for a different architecture "
            f"(digest {digest.hex()[:12]}..., spec {want.hex()[:12]}...)"
        )
    (count,) = struct.unpack("<Q", buf[36:44])
    expected = param_shapes(spec)
    if count != len(expected):
        raise DataFormatError(f"weight file holds {count} tensors, spec needs {len(expected)}")
    offset = 44
    loaded: dict[str, np.ndarray] = {}
    for _ in range(count):
        if offset + 4 > len(buf):
            raise DataFormatError("truncated weight file (name length)")
        (name_len,) = struct.unpack("<I", buf[offset:offset + 4])
        offset += 4
        name = buf[offset:offset + name_len].decode("utf-8")
        offset += name_len
        if name not in expected:
            raise DataFormatError(f"weight file names unknown parameter {name!r}")
        if offset + 37 > len(buf):
            raise DataFormatError(f"truncated weight file (tensor header for {name!r})")
        dims = struct.unpack("<4Q", buf[offset + 5:offset + 37])
        item = 4 if buf[offset + 4] == 0 else 8
        size = 37 + item * int(np.prod(dims))
        tensor = tensor_from_bytes(buf[offset:offset + size])
        offset += size
        shape = expected[name]
        if tensor.data.size != int(np.prod(shape)):
            raise ShapeError(
                f"parameter {name!r} holds {tensor.data.size} values, expected shape {shape}"
            )
        loaded[name] = tensor.data.reshape(shape).copy()
    if offset != len(buf):
        raise DataFormatError(f"{len(buf) - offset} trailing bytes in weight file")
    if set(loaded) != set(expected):
        raise DataFormatError("weight file does not cover every parameter exactly once")
    return ParamStore({name: loaded[name] for name in expected})


def save_weights(path, spec: ModelSpec, params: ParamStore) -> None:
    atomic_write_bytes(path, weights_to_bytes(spec, params))


def load_weights(path, spec: ModelSpec) -> ParamStore:
    with open(path, "rb") as fh:
        return weights_from_bytes(fh.read(), spec)
