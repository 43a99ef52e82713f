"""Declarative model graphs: layer specs, shape checking, and prediction.

A model is an ordered list of LayerSpecs. Each layer consumes the previous
layer's output by default; any layer may instead name an earlier layer as
its input, and ``concat`` names several. That is enough to express the side
taps (global average pooling after each max pool) that feed the concat head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor

LAYER_KINDS = ("conv", "maxpool", "gap", "dense", "relu", "softmax", "concat", "flatten")

_INPUT = "@input"


class GraphError(ValueError):
    """A layer configuration failed validation or shape propagation."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer: a kind, a unique name, and kind-specific hyperparameters.

    ``input`` names the layer whose output feeds this one (default: the
    previous layer in the list, or the model input for the first layer).
    ``inputs`` is the concat-only list of source layers.
    """

    kind: str
    name: str
    input: str | None = None
    inputs: tuple[str, ...] | None = None
    filters: int | None = None
    kernel: int | None = None
    stride: int | None = None
    padding: str | None = None
    units: int | None = None
    window: int | None = None

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "name": self.name}
        for key in ("input", "inputs", "filters", "kernel", "stride", "padding", "units", "window"):
            value = getattr(self, key)
            if value is not None:
                out[key] = list(value) if key == "inputs" else value
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        known = {"kind", "name", "input", "inputs", "filters", "kernel", "stride", "padding", "units", "window"}
        unknown = set(d) - known
        if unknown:
            raise GraphError(f"unknown layer keys {sorted(unknown)} in layer {d.get('name', '?')!r}")
        d = dict(d)
        if "inputs" in d and d["inputs"] is not None:
            d["inputs"] = tuple(d["inputs"])
        return cls(**d)


@dataclass
class ModelGraph:
    """Ordered layers plus their learned parameters and bookkeeping."""

    layers: list[LayerSpec]
    params: dict[str, dict[str, Tensor]]
    input_shape: tuple[int, ...]
    class_names: list[str]
    output_shapes: dict[str, tuple[int, ...]] = field(default_factory=dict)

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    @property
    def dtype(self):
        for store in self.params.values():
            for t in store.values():
                return t.dtype
        return np.dtype(T.DEFAULT_DTYPE)

    def parameters(self) -> list[Tensor]:
        """All parameter tensors in layer-spec order (kernel/weights, then bias)."""
        out = []
        for spec in self.layers:
            store = self.params.get(spec.name)
            if store:
                out.extend(store.values())
        return out

    def forward(self, batch: Tensor, tape: Tape | None = None) -> Tensor:
        """Run the graph on an (N, *input_shape) batch; returns the final output."""
        if tuple(batch.shape[1:]) != tuple(self.input_shape):
            raise T.ShapeError(
                f"batch shape {tuple(batch.shape)} does not match model input {self.input_shape}"
            )
        values: dict[str, Tensor] = {_INPUT: batch}
        prev = _INPUT
        out = batch
        for spec in self.layers:
            if spec.kind == "concat":
                srcs = [values[name] for name in spec.inputs]
                out = T.concat(srcs, tape)
            else:
                src = values[spec.input if spec.input is not None else prev]
                out = self._apply(spec, src, tape)
            values[spec.name] = out
            prev = spec.name
        return out

    def _apply(self, spec: LayerSpec, x: Tensor, tape: Tape | None) -> Tensor:
        if spec.kind == "conv":
            store = self.params[spec.name]
            return T.conv2d(x, store["kernel"], store["bias"], spec.stride, spec.padding, tape)
        if spec.kind == "maxpool":
            return T.maxpool2d(x, spec.window, spec.stride, tape)
        if spec.kind == "gap":
            return T.global_avg_pool2d(x, tape)
        if spec.kind == "dense":
            store = self.params[spec.name]
            return T.dense(x, store["weights"], store["bias"], tape)
        if spec.kind == "relu":
            return T.relu(x, tape)
        if spec.kind == "softmax":
            return T.softmax(x, tape)
        if spec.kind == "flatten":
            return T.flatten(x, tape)
        raise GraphError(f"layer {spec.name!r}: unsupported kind {spec.kind!r}")


def _check_spec(spec: LayerSpec) -> None:
    if spec.kind not in LAYER_KINDS:
        raise GraphError(f"layer {spec.name!r}: unknown kind {spec.kind!r}")
    need = {
        "conv": ("filters", "kernel", "stride", "padding"),
        "maxpool": ("window", "stride"),
        "dense": ("units",),
    }.get(spec.kind, ())
    for attr in need:
        if getattr(spec, attr) is None:
            raise GraphError(f"layer {spec.name!r}: {spec.kind} requires {attr!r}")
    if spec.kind == "concat" and not spec.inputs:
        raise GraphError(f"layer {spec.name!r}: concat requires a non-empty 'inputs' list")
    if spec.kind != "concat" and spec.inputs is not None:
        raise GraphError(f"layer {spec.name!r}: only concat layers take 'inputs'")
    if spec.kind == "conv" and spec.padding not in ("valid", "same"):
        raise GraphError(f"layer {spec.name!r}: padding must be 'valid' or 'same'")


def propagate_shapes(
    layers: list[LayerSpec], input_shape: tuple[int, ...]
) -> dict[str, tuple[int, ...]]:
    """Shape-check the graph; per-layer output shapes, sans batch axis.

    Raises GraphError naming the first offending layer.
    """
    shapes: dict[str, tuple[int, ...]] = {_INPUT: tuple(input_shape)}
    prev = _INPUT
    seen: set[str] = set()
    for spec in layers:
        _check_spec(spec)
        if spec.name in seen or spec.name == _INPUT:
            raise GraphError(f"duplicate layer name {spec.name!r}")
        seen.add(spec.name)
        sources = spec.inputs if spec.kind == "concat" else (spec.input or prev,)
        for src in sources:
            if src not in shapes:
                raise GraphError(f"layer {spec.name!r}: input {src!r} is not an earlier layer")
        try:
            shapes[spec.name] = _layer_output_shape(spec, [shapes[s] for s in sources])
        except (T.ShapeError, ValueError) as exc:
            raise GraphError(f"layer {spec.name!r}: {exc}") from exc
        prev = spec.name
    return shapes


def _layer_output_shape(spec: LayerSpec, in_shapes: list[tuple[int, ...]]) -> tuple[int, ...]:
    shape = in_shapes[0]
    if spec.kind == "conv":
        if len(shape) != 3:
            raise T.ShapeError(f"conv expects a (C,H,W) input, got {shape}")
        c, h, w = shape
        oh, ow = T.conv_output_hw(h, w, spec.kernel, spec.stride, spec.padding)
        return (spec.filters, oh, ow)
    if spec.kind == "maxpool":
        if len(shape) != 3:
            raise T.ShapeError(f"maxpool expects a (C,H,W) input, got {shape}")
        c, h, w = shape
        if h < spec.window or w < spec.window:
            raise T.ShapeError(f"pool window {spec.window} exceeds input extent {h}x{w}")
        return (c, (h - spec.window) // spec.stride + 1, (w - spec.window) // spec.stride + 1)
    if spec.kind == "gap":
        if len(shape) != 3:
            raise T.ShapeError(f"gap expects a (C,H,W) input, got {shape}")
        return (shape[0],)
    if spec.kind == "dense":
        if len(shape) != 1:
            raise T.ShapeError(f"dense expects a flat (D,) input, got {shape}")
        return (spec.units,)
    if spec.kind in ("relu",):
        return shape
    if spec.kind == "softmax":
        if len(shape) != 1:
            raise T.ShapeError(f"softmax expects a flat (K,) input, got {shape}")
        return shape
    if spec.kind == "flatten":
        return (int(np.prod(shape)),)
    if spec.kind == "concat":
        for s in in_shapes:
            if len(s) != 1:
                raise T.ShapeError(f"concat expects flat inputs, got {in_shapes}")
        return (sum(s[0] for s in in_shapes),)
    raise GraphError(f"unsupported kind {spec.kind!r}")


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> Tensor:
    limit = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype))


def build_model(
    config: list[LayerSpec],
    input_shape: tuple[int, ...] = (3, 80, 80),
    class_count: int = 3,
    seed: int = 0,
    class_names: list[str] | None = None,
    dtype=T.DEFAULT_DTYPE,
) -> ModelGraph:
    """Validate the config end to end and initialize parameters from ``seed``.

    Weights are He-uniform over the fan-in, biases zero; two builds with the
    same seed are bit-identical. The final layer must be a softmax whose
    width equals ``class_count``.
    """
    if class_names is None:
        class_names = [f"class{i}" for i in range(class_count)]
    if len(class_names) != class_count:
        raise GraphError(f"{len(class_names)} class names for class_count={class_count}")
    if not config:
        raise GraphError("empty layer config: a model needs at least a softmax head")
    shapes = propagate_shapes(config, tuple(input_shape))
    last = config[-1]
    if last.kind != "softmax":
        raise GraphError(f"final layer must be softmax, got {last.kind!r} ({last.name!r})")
    if shapes[last.name] != (class_count,):
        raise GraphError(
            f"softmax head emits {shapes[last.name]}, expected ({class_count},) classes"
        )

    rng = np.random.default_rng(seed)
    params: dict[str, dict[str, Tensor]] = {}
    prev = _INPUT
    for spec in config:
        in_shape = shapes[spec.input or prev] if spec.kind != "concat" else None
        if spec.kind == "conv":
            c = in_shape[0]
            k = spec.kernel
            params[spec.name] = {
                "kernel": _he_uniform(rng, (spec.filters, c, k, k), c * k * k, dtype),
                "bias": Tensor(np.zeros(spec.filters, dtype=dtype)),
            }
        elif spec.kind == "dense":
            d = in_shape[0]
            params[spec.name] = {
                "weights": _he_uniform(rng, (d, spec.units), d, dtype),
                "bias": Tensor(np.zeros(spec.units, dtype=dtype)),
            }
        prev = spec.name
    return ModelGraph(
        layers=list(config),
        params=params,
        input_shape=tuple(input_shape),
        class_names=list(class_names),
        output_shapes=shapes,
    )


def count_parameters(model: ModelGraph) -> int:
    """Total learned scalars: conv k*k*C_in*F + F, dense D*M + M."""
    return sum(t.size for t in model.parameters())


def predict(model: ModelGraph, batch: Tensor) -> Tensor:
    """Forward pass without recording; rows are probability distributions."""
    if batch.dtype != model.dtype:
        batch = batch.astype(model.dtype)
    return model.forward(batch, tape=None)


def paper_default_config(class_count: int = 3) -> list[LayerSpec]:
    """Four conv-conv-pool blocks with a GAP tap after each pool, a concat
    head over flatten(final pool) + the four taps, then dense 512 -> classes.

    Spatial trace on 80x80 input: 80 -> 40 -> 20 -> 10 -> 5.
    """
    layers: list[LayerSpec] = []
    filters = (32, 64, 128, 256)
    for b, f in enumerate(filters, start=1):
        layers += [
            LayerSpec("conv", f"conv{b}a", filters=f, kernel=3, stride=1, padding="same"),
            LayerSpec("relu", f"relu{b}a"),
            LayerSpec("conv", f"conv{b}b", filters=f, kernel=3, stride=1, padding="same"),
            LayerSpec("relu", f"relu{b}b"),
            LayerSpec("maxpool", f"pool{b}", window=2, stride=2),
        ]
    for b in range(1, 5):
        layers.append(LayerSpec("gap", f"gap{b}", input=f"pool{b}"))
    layers += [
        LayerSpec("flatten", "flat", input="pool4"),
        LayerSpec("concat", "merge", inputs=("flat", "gap1", "gap2", "gap3", "gap4")),
        LayerSpec("dense", "head1", units=512),
        LayerSpec("relu", "head1_relu"),
        LayerSpec("dense", "head2", units=class_count),
        LayerSpec("softmax", "probs"),
    ]
    return layers


MODEL_PRESETS = {
    "paper-default": paper_default_config,
}
