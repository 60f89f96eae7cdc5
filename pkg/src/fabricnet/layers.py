"""Layer objects: parameter containers with forward, shape, cost and init.

A layer owns its parameter tensors and running buffers and carries a
full hierarchical name assigned by whoever builds the network. Shapes
passed around are unbatched, (H, W, C) for images or (D,) for vectors.

FLOP counts treat one multiply-accumulate as a single FLOP and charge
elementwise work one FLOP per element.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError, ValidationError


def _ceil_div(a, b):
    return -(-a // b)


def _spatial_out(shape, stride):
    h, w, _ = shape
    return _ceil_div(h, stride), _ceil_div(w, stride)


class Layer:
    """Common interface; concrete layers override what applies to them."""

    def __init__(self, name):
        self.name = name

    def forward(self, x, train=False):
        raise NotImplementedError

    def out_shape(self, shape):
        return shape

    def params(self):
        return []

    def buffers(self):
        return []

    def flops(self, shape):
        return 0

    def init(self, rng):
        pass

    @property
    def kind(self):
        return type(self).__name__

    def __repr__(self):
        return f"{self.kind}({self.name})"


def _he_draw(rng, shape, fan_in, dtype):
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Conv2D(Layer):
    def __init__(self, cin, cout, name, kernel=3, stride=1, bias=False, dtype=np.float32):
        super().__init__(name)
        self.cin, self.cout, self.kernel, self.stride = cin, cout, kernel, stride
        self.dtype = np.dtype(dtype)
        self.weight = T.Tensor(
            np.zeros((kernel, kernel, cin, cout), dtype), requires_grad=True, name=f"{name}.kernel"
        )
        self.bias = (
            T.Tensor(np.zeros(cout, dtype), requires_grad=True, name=f"{name}.bias") if bias else None
        )

    def forward(self, x, train=False):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride)

    def out_shape(self, shape):
        if shape[-1] != self.cin:
            raise ShapeError(f"{self.name}: expected {self.cin} input channels, got {shape[-1]}")
        ho, wo = _spatial_out(shape, self.stride)
        return (ho, wo, self.cout)

    def params(self):
        named = [("kernel", self.weight)]
        if self.bias is not None:
            named.append(("bias", self.bias))
        return named

    def flops(self, shape):
        ho, wo = _spatial_out(shape, self.stride)
        cost = ho * wo * self.kernel * self.kernel * self.cin * self.cout
        if self.bias is not None:
            cost += ho * wo * self.cout
        return cost

    def init(self, rng):
        fan_in = self.kernel * self.kernel * self.cin
        self.weight.data = _he_draw(rng, self.weight.data.shape, fan_in, self.dtype)
        if self.bias is not None:
            self.bias.data = np.zeros(self.cout, self.dtype)


class SeparableConv2D(Layer):
    """Depthwise spatial filter followed by a pointwise channel mix."""

    def __init__(self, cin, cout, name, kernel=3, stride=1, dtype=np.float32):
        super().__init__(name)
        self.cin, self.cout, self.kernel, self.stride = cin, cout, kernel, stride
        self.dtype = np.dtype(dtype)
        self.depthwise = T.Tensor(
            np.zeros((kernel, kernel, cin), dtype), requires_grad=True, name=f"{name}.dw_kernel"
        )
        self.pointwise = T.Tensor(
            np.zeros((cin, cout), dtype), requires_grad=True, name=f"{name}.pw_kernel"
        )

    def forward(self, x, train=False):
        mid = T.depthwise_conv2d(x, self.depthwise, stride=self.stride)
        return T.pointwise_conv2d(mid, self.pointwise)

    def out_shape(self, shape):
        if shape[-1] != self.cin:
            raise ShapeError(f"{self.name}: expected {self.cin} input channels, got {shape[-1]}")
        ho, wo = _spatial_out(shape, self.stride)
        return (ho, wo, self.cout)

    def params(self):
        return [("dw_kernel", self.depthwise), ("pw_kernel", self.pointwise)]

    def flops(self, shape):
        ho, wo = _spatial_out(shape, self.stride)
        return ho * wo * self.kernel * self.kernel * self.cin + ho * wo * self.cin * self.cout

    def init(self, rng):
        self.depthwise.data = _he_draw(rng, self.depthwise.data.shape, self.kernel * self.kernel, self.dtype)
        self.pointwise.data = _he_draw(rng, self.pointwise.data.shape, self.cin, self.dtype)


class BatchNorm(Layer):
    def __init__(self, channels, name, momentum=0.99, eps=1e-3, dtype=np.float32):
        super().__init__(name)
        self.channels = channels
        self.momentum, self.eps = momentum, eps
        self.dtype = np.dtype(dtype)
        self.gamma = T.Tensor(np.ones(channels, dtype), requires_grad=True, name=f"{name}.gamma")
        self.beta = T.Tensor(np.zeros(channels, dtype), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)
        # finite-difference checks freeze this so repeated forwards are pure
        self.update_stats = True

    def forward(self, x, train=False):
        return T.batchnorm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            train=train,
            momentum=self.momentum,
            eps=self.eps,
            update_stats=self.update_stats,
        )

    def out_shape(self, shape):
        if shape[-1] != self.channels:
            raise ShapeError(f"{self.name}: expected {self.channels} channels, got {shape[-1]}")
        return shape

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def flops(self, shape):
        return int(np.prod(shape))

    def init(self, rng):
        self.gamma.data = np.ones(self.channels, self.dtype)
        self.beta.data = np.zeros(self.channels, self.dtype)
        self.running_mean[:] = 0.0
        self.running_var[:] = 1.0


class Activation(Layer):
    def __init__(self, kind, name):
        super().__init__(name)
        if kind not in ("relu", "sigmoid"):
            raise ValidationError(f"unknown activation kind: {kind!r}")
        self.fn_kind = kind

    def forward(self, x, train=False):
        return T.activation(x, self.fn_kind)

    def flops(self, shape):
        return int(np.prod(shape))


class MaxPool2D(Layer):
    def __init__(self, name, window=3, stride=2):
        super().__init__(name)
        self.window, self.stride = window, stride

    def forward(self, x, train=False):
        return T.maxpool2d(x, window=self.window, stride=self.stride)

    def out_shape(self, shape):
        ho, wo = _spatial_out(shape, self.stride)
        return (ho, wo, shape[-1])

    def flops(self, shape):
        ho, wo = _spatial_out(shape, self.stride)
        return ho * wo * shape[-1]


class GlobalAvgPool(Layer):
    def forward(self, x, train=False):
        return T.global_avg_pool(x)

    def out_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"{self.name}: expected an image shape, got {shape}")
        return (shape[-1],)

    def flops(self, shape):
        return shape[-1]


class Flatten(Layer):
    def forward(self, x, train=False):
        return T.flatten(x)

    def out_shape(self, shape):
        return (int(np.prod(shape)),)


class Dense(Layer):
    def __init__(self, din, units, name, bias=True, dtype=np.float32):
        super().__init__(name)
        self.din, self.units = din, units
        self.dtype = np.dtype(dtype)
        self.weight = T.Tensor(np.zeros((din, units), dtype), requires_grad=True, name=f"{name}.weight")
        self.bias = (
            T.Tensor(np.zeros(units, dtype), requires_grad=True, name=f"{name}.bias") if bias else None
        )

    def forward(self, x, train=False):
        return T.dense(x, self.weight, self.bias)

    def out_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.din:
            raise ShapeError(f"{self.name}: expected a ({self.din},) input, got {shape}")
        return (self.units,)

    def params(self):
        named = [("weight", self.weight)]
        if self.bias is not None:
            named.append(("bias", self.bias))
        return named

    def flops(self, shape):
        cost = self.din * self.units
        if self.bias is not None:
            cost += self.units
        return cost

    def init(self, rng):
        self.weight.data = _he_draw(rng, self.weight.data.shape, self.din, self.dtype)
        if self.bias is not None:
            self.bias.data = np.zeros(self.units, self.dtype)


class Residual(Layer):
    """Skip connection: output = body(x) + projection(x), identity if None.

    Both edges must land on the same shape; that is checked whenever the
    shape is walked, so a bad wiring fails at build time.
    """

    def __init__(self, body, name, projection=None):
        super().__init__(name)
        self.body = list(body)
        self.projection = list(projection) if projection else None

    def _branch_shapes(self, shape):
        body_shape = shape
        for layer in self.body:
            body_shape = layer.out_shape(body_shape)
        skip_shape = shape
        if self.projection is not None:
            for layer in self.projection:
                skip_shape = layer.out_shape(skip_shape)
        return body_shape, skip_shape

    def forward(self, x, train=False):
        out = x
        for layer in self.body:
            out = layer.forward(out, train)
        skip = x
        if self.projection is not None:
            for layer in self.projection:
                skip = layer.forward(skip, train)
        return T.add(out, skip)

    def out_shape(self, shape):
        body_shape, skip_shape = self._branch_shapes(shape)
        if body_shape != skip_shape:
            raise ShapeError(
                f"{self.name}: residual branches disagree, body {body_shape} vs skip {skip_shape}"
            )
        return body_shape

    def children(self):
        out = list(self.body)
        if self.projection is not None:
            out.extend(self.projection)
        return out

    def flops(self, shape):
        cost = 0
        s = shape
        for layer in self.body:
            cost += layer.flops(s)
            s = layer.out_shape(s)
        if self.projection is not None:
            p = shape
            for layer in self.projection:
                cost += layer.flops(p)
                p = layer.out_shape(p)
        return cost + int(np.prod(s))


class Parallel(Layer):
    """Run branches on the same input and join their outputs on the last axis."""

    def __init__(self, branches, name):
        super().__init__(name)
        self.branches = [list(b) for b in branches]
        if not self.branches:
            raise ValidationError(f"{self.name}: needs at least one branch")

    def forward(self, x, train=False):
        outs = []
        for branch in self.branches:
            out = x
            for layer in branch:
                out = layer.forward(out, train)
            outs.append(out)
        return T.concat(outs, axis=-1)

    def out_shape(self, shape):
        shapes = []
        for branch in self.branches:
            s = shape
            for layer in branch:
                s = layer.out_shape(s)
            shapes.append(s)
        lead = shapes[0][:-1]
        for s in shapes[1:]:
            if s[:-1] != lead:
                raise ShapeError(f"{self.name}: branch shapes do not join, {shapes[0]} vs {s}")
        return lead + (sum(s[-1] for s in shapes),)

    def children(self):
        return [layer for branch in self.branches for layer in branch]

    def flops(self, shape):
        cost = 0
        for branch in self.branches:
            s = shape
            for layer in branch:
                cost += layer.flops(s)
                s = layer.out_shape(s)
        return cost


def walk(layers):
    """Yield every layer, descending into composite layers depth first."""
    for layer in layers:
        yield layer
        if isinstance(layer, (Residual, Parallel)):
            yield from walk(layer.children())
