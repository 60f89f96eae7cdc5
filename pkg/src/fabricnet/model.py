"""Network assembly: spec parsing, flow builders and the graph container.

The classifier is a shared convolutional head (a truncated Xception:
entry flow plus a configurable number of middle flows) feeding one
shallow per-class submodel per label. Each submodel ends in a single
sigmoid unit, so the assembled network maps an image to a vector of
independent class scores in (0, 1).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError, SpecParseError, ValidationError
from .layers import (
    Activation,
    BatchNorm,
    Conv2D,
    Dense,
    Flatten,
    GlobalAvgPool,
    MaxPool2D,
    Parallel,
    Residual,
    SeparableConv2D,
    walk,
)

DEFAULT_SPEC_TEXT = "{S4,3,2},{S16,3,2}"

_GROUP = re.compile(r"\{S(\d+),(\d+),(\d+)\}")


@dataclass(frozen=True)
class LayerSpec:
    """One separable-conv stage: filter count, kernel size, stride."""

    filters: int
    kernel: int
    stride: int


@dataclass(frozen=True)
class EnsembleSpec:
    """Parsed submodel description, one LayerSpec per conv stage."""

    layers: tuple

    @property
    def canonical(self):
        return ",".join(f"{{S{s.filters},{s.kernel},{s.stride}}}" for s in self.layers)


def parse_ensemble_spec(text):
    """Parse a spec string like ``{S4,3,2},{S16,3,2}`` into an EnsembleSpec.

    Raises SpecParseError with the failing character position for
    malformed input, ValidationError for out-of-range numbers.
    """
    if not isinstance(text, str):
        raise SpecParseError("spec must be a string", 0)
    layers = []
    pos = 0
    n = len(text)
    while True:
        while pos < n and text[pos].isspace():
            pos += 1
        if layers:
            if pos >= n or text[pos] != ",":
                raise SpecParseError("expected ',' between groups", pos)
            pos += 1
            while pos < n and text[pos].isspace():
                pos += 1
        if pos >= n:
            raise SpecParseError("expected a '{S...}' group", pos)
        m = _GROUP.match(text, pos)
        if m is None:
            raise SpecParseError("malformed group, expected '{S<filters>,<kernel>,<stride>}'", pos)
        filters, kernel, stride = (int(g) for g in m.groups())
        if filters < 1:
            raise ValidationError(f"spec filters must be >= 1, got {filters}")
        if kernel < 1 or kernel % 2 == 0:
            raise ValidationError(f"spec kernel must be a positive odd integer, got {kernel}")
        if stride not in (1, 2):
            raise ValidationError(f"spec stride must be 1 or 2, got {stride}")
        layers.append(LayerSpec(filters, kernel, stride))
        pos = m.end()
        while pos < n and text[pos].isspace():
            pos += 1
        if pos >= n:
            break
    return EnsembleSpec(tuple(layers))


def default_spec():
    return parse_ensemble_spec(DEFAULT_SPEC_TEXT)


# ---------------------------------------------------------------------------
# graph container


class ModelGraph:
    """An ordered list of layers with shape-validated wiring.

    Construction walks the declared input shape through every node, so
    mismatched residual edges or channel counts fail before any data is
    seen. Parameters and buffers are exposed as flat name-keyed dicts.
    """

    def __init__(self, nodes, input_shape, name="model", dtype=np.float32):
        self.nodes = list(nodes)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.name = name
        self.dtype = np.dtype(dtype)
        if any(d < 1 for d in self.input_shape):
            raise ValidationError(f"input shape must be positive, got {self.input_shape}")

        shape = self.input_shape
        for layer in self.nodes:
            shape = layer.out_shape(shape)
        self.output_shape = shape

        self.params = {}
        self.buffers = {}
        for layer in walk(self.nodes):
            for local, t in layer.params():
                key = f"{layer.name}.{local}"
                if key in self.params:
                    raise ValidationError(f"duplicate parameter name: {key}")
                self.params[key] = t
            for local, b in layer.buffers():
                key = f"{layer.name}.{local}"
                if key in self.buffers:
                    raise ValidationError(f"duplicate buffer name: {key}")
                self.buffers[key] = b

    # -- running ------------------------------------------------------------

    def _coerce(self, x):
        if isinstance(x, T.Tensor):
            x = x.data
        x = np.asarray(x)
        rank = len(self.input_shape)
        if x.ndim == rank:
            if x.shape != self.input_shape:
                raise ShapeError(f"{self.name}: expected input {self.input_shape}, got {x.shape}")
        elif x.ndim == rank + 1:
            if x.shape[1:] != self.input_shape:
                raise ShapeError(
                    f"{self.name}: expected batched input (N, {', '.join(map(str, self.input_shape))}),"
                    f" got {x.shape}"
                )
        else:
            raise ShapeError(f"{self.name}: expected input {self.input_shape}, got {x.shape}")
        return x.astype(self.dtype, copy=False)

    def forward(self, x, train=False):
        """Run the graph; accepts one sample or a batch, returns a Tensor."""
        out = T.Tensor(self._coerce(x))
        for layer in self.nodes:
            out = layer.forward(out, train)
        return out

    __call__ = forward

    def predict(self, x):
        """Inference scores as a plain ndarray, no graph retained."""
        with T.no_grad():
            return self.forward(x, train=False).data

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    # -- state --------------------------------------------------------------

    def state_dict(self):
        """Copies of every parameter and buffer, keyed by name."""
        out = {k: t.data.copy() for k, t in self.params.items()}
        out.update({k: b.copy() for k, b in self.buffers.items()})
        return out

    def load_state(self, state, strict=True):
        """Load arrays into parameters and buffers by name.

        Buffers are written in place so layer-held references stay
        valid. Unknown or missing names are an error when strict.
        """
        known = set(self.params) | set(self.buffers)
        if strict:
            missing = sorted(known - set(state))
            extra = sorted(set(state) - known)
            if missing or extra:
                raise ValidationError(f"state mismatch, missing={missing[:4]}, unexpected={extra[:4]}")
        for key, value in state.items():
            if key in self.params:
                t = self.params[key]
                arr = np.asarray(value, dtype=t.data.dtype)
                if arr.shape != t.data.shape:
                    raise ShapeError(f"{key}: expected shape {t.data.shape}, got {arr.shape}")
                t.data = arr.copy()
            elif key in self.buffers:
                buf = self.buffers[key]
                arr = np.asarray(value, dtype=buf.dtype)
                if arr.shape != buf.shape:
                    raise ShapeError(f"{key}: expected shape {buf.shape}, got {arr.shape}")
                buf[...] = arr

    def signature(self):
        """Stable structural identity: (name, dtype, shape) per entry."""
        rows = [(k, str(t.data.dtype), t.data.shape) for k, t in self.params.items()]
        rows += [(k, str(b.dtype), b.shape) for k, b in self.buffers.items()]
        return tuple(rows)


class FabricNet(ModelGraph):
    """Shared head plus one sigmoid submodel per class, joined in parallel."""

    def __init__(self, nodes, input_shape, n_classes, middle_count, spec, head_len, dtype):
        super().__init__(nodes, input_shape, name="fabricnet", dtype=dtype)
        self.n_classes = n_classes
        self.middle_count = middle_count
        self.spec = spec
        self.head_len = head_len

    def head_predictor(self):
        """The shared head as an inference callable: images in, feature map out."""
        head_nodes = self.nodes[: self.head_len]

        def predict(x):
            with T.no_grad():
                out = T.Tensor(self._coerce(x))
                for layer in head_nodes:
                    out = layer.forward(out, False)
            return out.data

        return predict

    def sub_predictors(self):
        """One inference callable per class, each mapping the shared
        feature map to that class's sigmoid score."""
        parallel = self.nodes[self.head_len]
        predictors = []
        for branch in parallel.branches:

            def predict(features, _branch=branch):
                with T.no_grad():
                    out = T.Tensor(np.asarray(features, dtype=self.dtype))
                    for layer in _branch:
                        out = layer.forward(out, False)
                return out.data

            predictors.append(predict)
        return predictors


# ---------------------------------------------------------------------------
# flow builders


def build_entry_flow(cin=3, name="entry", dtype=np.float32):
    """Xception entry flow: two plain convs then three downsampling
    residual blocks, 32x reduction in each spatial axis overall."""
    nodes = [
        Conv2D(cin, 32, f"{name}.conv1", kernel=3, stride=2, dtype=dtype),
        BatchNorm(32, f"{name}.bn1", dtype=dtype),
        Activation("relu", f"{name}.relu1"),
        Conv2D(32, 64, f"{name}.conv2", kernel=3, stride=1, dtype=dtype),
        BatchNorm(64, f"{name}.bn2", dtype=dtype),
        Activation("relu", f"{name}.relu2"),
    ]
    blocks = [(64, 128, False), (128, 256, True), (256, 728, True)]
    for i, (bc_in, bc_out, leading_relu) in enumerate(blocks, start=1):
        bname = f"{name}.block{i}"
        body = []
        if leading_relu:
            body.append(Activation("relu", f"{bname}.relu1"))
        body += [
            SeparableConv2D(bc_in, bc_out, f"{bname}.sep1", dtype=dtype),
            BatchNorm(bc_out, f"{bname}.bn1", dtype=dtype),
            Activation("relu", f"{bname}.relu2"),
            SeparableConv2D(bc_out, bc_out, f"{bname}.sep2", dtype=dtype),
            BatchNorm(bc_out, f"{bname}.bn2", dtype=dtype),
            MaxPool2D(f"{bname}.pool", window=3, stride=2),
        ]
        projection = [
            Conv2D(bc_in, bc_out, f"{bname}.proj", kernel=1, stride=2, dtype=dtype),
            BatchNorm(bc_out, f"{bname}.proj_bn", dtype=dtype),
        ]
        nodes.append(Residual(body, bname, projection=projection))
    return nodes


def build_middle_flow(name, channels=728, dtype=np.float32):
    """One Xception middle flow: three separable convs under an identity skip."""
    body = []
    for j in range(1, 4):
        body += [
            Activation("relu", f"{name}.relu{j}"),
            SeparableConv2D(channels, channels, f"{name}.sep{j}", dtype=dtype),
            BatchNorm(channels, f"{name}.bn{j}", dtype=dtype),
        ]
    return [Residual(body, name)]


def build_exit_flow(name="exit", cin=728, dtype=np.float32):
    """Xception exit flow: one downsampling residual block then two
    widening separable convs."""
    bname = f"{name}.block"
    body = [
        Activation("relu", f"{bname}.relu1"),
        SeparableConv2D(cin, cin, f"{bname}.sep1", dtype=dtype),
        BatchNorm(cin, f"{bname}.bn1", dtype=dtype),
        Activation("relu", f"{bname}.relu2"),
        SeparableConv2D(cin, 1024, f"{bname}.sep2", dtype=dtype),
        BatchNorm(1024, f"{bname}.bn2", dtype=dtype),
        MaxPool2D(f"{bname}.pool", window=3, stride=2),
    ]
    projection = [
        Conv2D(cin, 1024, f"{bname}.proj", kernel=1, stride=2, dtype=dtype),
        BatchNorm(1024, f"{bname}.proj_bn", dtype=dtype),
    ]
    return [
        Residual(body, bname, projection=projection),
        SeparableConv2D(1024, 1536, f"{name}.sep3", dtype=dtype),
        BatchNorm(1536, f"{name}.bn3", dtype=dtype),
        Activation("relu", f"{name}.relu3"),
        SeparableConv2D(1536, 2048, f"{name}.sep4", dtype=dtype),
        BatchNorm(2048, f"{name}.bn4", dtype=dtype),
        Activation("relu", f"{name}.relu4"),
    ]


def build_head(middle_count=2, cin=3, dtype=np.float32):
    """Shared feature extractor: entry flow plus ``middle_count`` middle flows."""
    if middle_count < 0:
        raise ValidationError(f"middle_count must be >= 0, got {middle_count}")
    nodes = build_entry_flow(cin=cin, dtype=dtype)
    for i in range(1, middle_count + 1):
        nodes += build_middle_flow(f"middle{i}", dtype=dtype)
    return nodes


def build_ensemble_submodel(spec, in_shape, name, dtype=np.float32):
    """One per-class scorer: the spec's separable-conv stages, then
    flatten, a single dense unit and a sigmoid."""
    if len(in_shape) != 3 or any(d < 1 for d in in_shape):
        raise ValidationError(f"submodel input shape must be (H, W, C) positive, got {in_shape}")
    nodes = []
    shape = tuple(in_shape)
    for idx, ls in enumerate(spec.layers, start=1):
        nodes += [
            SeparableConv2D(
                shape[-1], ls.filters, f"{name}.sep{idx}", kernel=ls.kernel, stride=ls.stride, dtype=dtype
            ),
            BatchNorm(ls.filters, f"{name}.bn{idx}", dtype=dtype),
            Activation("relu", f"{name}.relu{idx}"),
        ]
        shape = nodes[-3].out_shape(shape)
        if shape[0] < 1 or shape[1] < 1:
            raise ValidationError(f"{name}: spatial extent collapsed below 1x1 at stage {idx}")
    nodes += [
        Flatten(f"{name}.flatten"),
        Dense(int(np.prod(shape)), 1, f"{name}.dense", bias=True, dtype=dtype),
        Activation("sigmoid", f"{name}.out"),
    ]
    return nodes


# ---------------------------------------------------------------------------
# full models


def _check_image_shape(input_shape):
    if len(input_shape) != 3:
        raise ValidationError(f"input shape must be (H, W, C), got {input_shape}")
    h, w, _ = input_shape
    if h < 32 or w < 32:
        raise ValidationError(f"input must be at least 32x32 for the entry flow, got {h}x{w}")


def assemble_fabricnet(
    n_classes,
    middle_count=2,
    spec=None,
    input_shape=(120, 120, 3),
    dtype=np.float32,
):
    """Build the class-based ensemble network.

    ``spec`` may be an EnsembleSpec, a spec string, or None for the
    default two-stage submodel. The head runs once per input; the
    per-class branches share its output feature map.
    """
    if n_classes < 1:
        raise ValidationError(f"n_classes must be >= 1, got {n_classes}")
    _check_image_shape(input_shape)
    if spec is None:
        spec = default_spec()
    elif isinstance(spec, str):
        spec = parse_ensemble_spec(spec)

    head = build_head(middle_count=middle_count, cin=input_shape[-1], dtype=dtype)
    shape = tuple(input_shape)
    for layer in head:
        shape = layer.out_shape(shape)
    branches = [build_ensemble_submodel(spec, shape, f"sub{i}", dtype=dtype) for i in range(n_classes)]
    nodes = head + [Parallel(branches, "classes")]
    return FabricNet(nodes, input_shape, n_classes, middle_count, spec, len(head), dtype)


def assemble_monolithic(
    n_classes,
    middle_count=2,
    input_shape=(120, 120, 3),
    dtype=np.float32,
):
    """Baseline with the same head but one flat multi-label output stage."""
    if n_classes < 1:
        raise ValidationError(f"n_classes must be >= 1, got {n_classes}")
    _check_image_shape(input_shape)
    head = build_head(middle_count=middle_count, cin=input_shape[-1], dtype=dtype)
    shape = tuple(input_shape)
    for layer in head:
        shape = layer.out_shape(shape)
    nodes = head + [
        Flatten("flatten"),
        Dense(int(np.prod(shape)), n_classes, "dense", bias=True, dtype=dtype),
        Activation("sigmoid", "out"),
    ]
    return ModelGraph(nodes, input_shape, name="monolithic", dtype=dtype)


def assemble_xception_reference(n_classes, input_shape=(120, 120, 3), middle_count=8, dtype=np.float32):
    """Full Xception-style classifier used for size comparisons."""
    if n_classes < 1:
        raise ValidationError(f"n_classes must be >= 1, got {n_classes}")
    _check_image_shape(input_shape)
    nodes = build_head(middle_count=middle_count, cin=input_shape[-1], dtype=dtype)
    nodes += build_exit_flow(dtype=dtype)
    nodes += [
        GlobalAvgPool("gap"),
        Dense(2048, n_classes, "dense", bias=True, dtype=dtype),
        Activation("sigmoid", "out"),
    ]
    return ModelGraph(nodes, input_shape, name="xception", dtype=dtype)


# ---------------------------------------------------------------------------
# accounting and init


def count_params(graph):
    """Parameter totals: trainable tensors and running buffers."""
    trainable = sum(t.data.size for t in graph.params.values())
    non_trainable = sum(b.size for b in graph.buffers.values())
    return {"trainable": int(trainable), "total": int(trainable + non_trainable)}


def count_flops(graph):
    """Forward FLOPs for one sample, one multiply-accumulate = one FLOP."""
    total = 0
    shape = graph.input_shape
    for layer in graph.nodes:
        total += layer.flops(shape)
        shape = layer.out_shape(shape)
    return int(total)


def fabricnet_accounting(net):
    """Parameter and FLOP split between shared head and class branches.

    Returns a flat dict: trainable/total parameter counts, the head and
    combined-ensemble shares, the per-submodel share (all branches are
    identical), and the matching FLOP split.
    """
    if not isinstance(net, FabricNet):
        raise ValidationError("fabricnet_accounting expects an assembled FabricNet")
    totals = count_params(net)
    sub_prefixes = tuple(f"sub{i}." for i in range(net.n_classes))
    sub_train = sum(t.data.size for k, t in net.params.items() if k.startswith(sub_prefixes))
    sub0_train = sum(t.data.size for k, t in net.params.items() if k.startswith("sub0."))

    shape = net.input_shape
    head_flops = 0
    for layer in net.nodes[: net.head_len]:
        head_flops += layer.flops(shape)
        shape = layer.out_shape(shape)
    ens_flops = sum(layer.flops(shape) for layer in net.nodes[net.head_len :])
    return {
        "trainable": totals["trainable"],
        "total": totals["total"],
        "head_trainable": int(totals["trainable"] - sub_train),
        "ensemble_trainable": int(sub_train),
        "submodel_trainable": int(sub0_train),
        "flops": int(head_flops + ens_flops),
        "flops_head": int(head_flops),
        "flops_ensembles": int(ens_flops),
        "flops_submodel": int(ens_flops // net.n_classes),
    }


def init_params(graph, seed):
    """He-normal kernels, zero biases and betas, unit gammas, reset
    running statistics. A single generator walks the layers in build
    order, so a given seed always yields the same weights."""
    rng = np.random.default_rng(seed)
    for layer in walk(graph.nodes):
        layer.init(rng)
    graph.zero_grad()
    return graph
