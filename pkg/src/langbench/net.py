"""Minimal reverse-mode convolutional network over a flat parameter vector.

Parameters live in a single float64 vector so the samplers, the diagonal
preconditioner and the chain diagnostics can treat the model as one long
coordinate list; layers view their slices without copying. The forward
pass records, per parameterized layer, the input activations and (after
backward) the pre-activation gradients that the Kronecker factor
estimation consumes.
"""

import numpy as np

from . import _kernels as K


class Conv2d:
    """2-D convolution, lowered to a matrix product via patch expansion."""

    has_params = True

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding="same"):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kh = self.kw = int(kernel_size)
        self.stride = stride
        if padding == "same":
            if stride != 1 or self.kh % 2 == 0:
                raise ValueError("'same' padding requires stride 1 and odd kernel size")
            self.pad = (self.kh - 1) // 2
        else:
            self.pad = int(padding)
        self.fan_in = in_channels * self.kh * self.kw
        self.fan_out = out_channels

    def param_shapes(self):
        return [("W", (self.out_channels, self.in_channels, self.kh, self.kw)),
                ("b", (self.out_channels,))]

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ValueError(f"conv expects ({self.in_channels}, H, W) input, got {in_shape}")
        oh, ow = K.conv_output_hw(in_shape[1], in_shape[2], self.kh, self.kw, self.stride, self.pad)
        if oh < 1 or ow < 1:
            raise ValueError(f"conv output collapsed to {oh}x{ow}")
        return (self.out_channels, oh, ow)

    def forward(self, x, params, cache):
        W, b = params
        n = x.shape[0]
        oh, ow = K.conv_output_hw(x.shape[2], x.shape[3], self.kh, self.kw, self.stride, self.pad)
        cols = K.im2col(x, self.kh, self.kw, self.stride, self.pad)
        out = cols @ W.reshape(self.out_channels, -1).T + b
        cache["x"] = x
        return out.reshape(n, oh, ow, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, dout, params, cache):
        W, _ = params
        x = cache["x"]
        cache["g"] = dout
        gmat = dout.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        cols = K.im2col(x, self.kh, self.kw, self.stride, self.pad)
        dW = (gmat.T @ cols).reshape(W.shape)
        db = gmat.sum(axis=0)
        dcols = gmat @ W.reshape(self.out_channels, -1)
        dx = K.col2im(dcols, x.shape, self.kh, self.kw, self.stride, self.pad)
        return dx, [dW, db]


class MaxPool2d:
    has_params = False

    def __init__(self, size=2, stride=2):
        self.kh = self.kw = size
        self.stride = stride

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ValueError(f"maxpool expects (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        oh = (h - self.kh) // self.stride + 1
        ow = (w - self.kw) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ValueError(f"pool output collapsed to {oh}x{ow}")
        return (c, oh, ow)

    def forward(self, x, params, cache):
        out, argmax = K.maxpool_forward(x, self.kh, self.kw, self.stride)
        cache["argmax"] = argmax
        cache["in_hw"] = x.shape[2:]
        return out

    def backward(self, dout, params, cache):
        h, w = cache["in_hw"]
        return K.maxpool_backward(dout, cache["argmax"], h, w), []


class Dense:
    """Fully connected layer; flattens any higher-rank input."""

    has_params = True

    def __init__(self, in_features, out_features):
        self.fan_in = in_features
        self.fan_out = out_features

    def param_shapes(self):
        return [("W", (self.fan_out, self.fan_in)), ("b", (self.fan_out,))]

    def out_shape(self, in_shape):
        flat = int(np.prod(in_shape))
        if flat != self.fan_in:
            raise ValueError(f"dense expects {self.fan_in} inputs, got {in_shape} = {flat}")
        return (self.fan_out,)

    def forward(self, x, params, cache):
        W, b = params
        a = x.reshape(x.shape[0], -1)
        cache["a"] = a
        cache["in_shape"] = x.shape
        return a @ W.T + b

    def backward(self, dout, params, cache):
        W, _ = params
        a = cache["a"]
        cache["g"] = dout
        dW = dout.T @ a
        db = dout.sum(axis=0)
        return (dout @ W).reshape(cache["in_shape"]), [dW, db]


class ReLU:
    has_params = False

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, params, cache):
        cache["mask"] = x > 0
        return np.maximum(x, 0.0)

    def backward(self, dout, params, cache):
        dx = dout * cache["mask"]
        if dx.shape != cache["mask"].shape:
            raise ValueError("relu gradient shape mismatch")
        return dx, []


class ActivationCache:
    """Per-layer records from one forward pass, extended by backward."""

    def __init__(self, network, batch_size):
        self.network_id = id(network)
        self.batch_size = batch_size
        self.layers = [{} for _ in network.layers]


class Network:
    """A fixed stack of layers with parameters in one flat float64 vector."""

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                self.shapes.append(layer.out_shape(self.shapes[-1]))
            except ValueError as exc:
                raise ValueError(f"layer {i}: {exc}") from exc
        self._layout = []          # (layer_index, name, offset, shape)
        offset = 0
        for i, layer in enumerate(self.layers):
            if layer.has_params:
                for name, shape in layer.param_shapes():
                    size = int(np.prod(shape))
                    self._layout.append((i, name, offset, shape))
                    offset += size
        self.num_params = offset

    @property
    def param_layers(self):
        return [i for i, l in enumerate(self.layers) if l.has_params]

    def layout(self):
        """Stable (layer_index, name, offset, shape) table for the flat vector."""
        return list(self._layout)

    def layer_params(self, theta, i):
        """Views of layer i's parameter tensors inside the flat vector."""
        out = []
        for li, _, offset, shape in self._layout:
            if li == i:
                size = int(np.prod(shape))
                out.append(theta[offset:offset + size].reshape(shape))
        return out

    def layer_slice(self, i):
        """(start, stop) of layer i's parameters in the flat vector."""
        spans = [(off, off + int(np.prod(shp))) for li, _, off, shp in self._layout if li == i]
        return spans[0][0], spans[-1][1]

    def init_params(self, rng):
        """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
        theta = np.zeros(self.num_params)
        for i, layer in enumerate(self.layers):
            if not layer.has_params:
                continue
            W, b = self.layer_params(theta, i)
            fan_out = layer.fan_out if isinstance(layer, Dense) else layer.fan_out * layer.kh * layer.kw
            bound = np.sqrt(6.0 / (layer.fan_in + fan_out))
            W[...] = rng.uniform(-bound, bound, size=W.shape)
            b[...] = 0.0
        return theta

    def _check_theta(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.num_params,):
            raise ValueError(f"expected {self.num_params} parameters, got shape {theta.shape}")
        return theta

    def forward(self, theta, x):
        """Run the stack; returns (logits, cache) with per-layer activations."""
        theta = self._check_theta(theta)
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"layer 0: input shape {x.shape[1:]} != expected {self.input_shape}")
        cache = ActivationCache(self, x.shape[0])
        for i, layer in enumerate(self.layers):
            params = self.layer_params(theta, i) if layer.has_params else None
            x = layer.forward(x, params, cache.layers[i])
        return x, cache

    def backward(self, theta, cache, dlogits):
        """Backpropagate dlogits; returns (flat gradient, input gradient).

        Also stores each parameterized layer's pre-activation gradient in
        the cache for the curvature factor updates.
        """
        theta = self._check_theta(theta)
        if not isinstance(cache, ActivationCache) or cache.network_id != id(self):
            raise ValueError("cache does not come from a forward pass of this network")
        if any(not c and l.has_params for l, c in zip(self.layers, cache.layers)):
            raise ValueError("stale cache: missing layer activations")
        grads = np.zeros(self.num_params)
        dx = np.asarray(dlogits, dtype=np.float64)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            params = self.layer_params(theta, i) if layer.has_params else None
            dx, dparams = layer.backward(dx, params, cache.layers[i])
            if layer.has_params:
                for view, d in zip(self.layer_params(grads, i), dparams):
                    view[...] = d
        return grads, dx


def softmax(logits):
    """Row-wise softmax with max subtraction for overflow safety."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood and its logits gradient.

    Returns (loss, dlogits) with dlogits = (softmax - onehot) / batch_size,
    so downstream gradients are of the mean loss.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected one label per row, got {labels.shape} for {n} rows")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsumexp - z[np.arange(n), labels]))
    dlogits = softmax(logits)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def loss_and_grad(net, theta, x, labels):
    """Mean cross-entropy loss and its flat parameter gradient."""
    logits, cache = net.forward(theta, x)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    grads, _ = net.backward(theta, cache, dlogits)
    return loss, grads, cache


def finite_difference(f, theta, h):
    """Central-difference gradient of a scalar function of a flat vector."""
    if h <= 0:
        raise ValueError("h must be positive")
    theta = np.array(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + h
        fp = f(theta)
        theta[i] = orig - h
        fm = f(theta)
        theta[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def finite_diff_gradient(net, theta, x, labels, h=1e-5):
    """Finite-difference estimate of the mean-loss gradient, for checks."""

    def f(t):
        logits, _ = net.forward(t, x)
        return softmax_cross_entropy(logits, labels)[0]

    return finite_difference(f, theta, h)


def reference_network(input_shape=(1, 28, 28), conv_channels=(32, 64),
                      dense_units=1024, classes=10, filter_size=5, pool=2):
    """conv+pool blocks followed by one hidden dense layer and a classifier."""
    layers = []
    in_c = input_shape[0]
    for c in conv_channels:
        layers += [Conv2d(in_c, c, filter_size), ReLU(), MaxPool2d(pool, pool)]
        in_c = c
    net_probe = Network(layers, input_shape)
    flat = int(np.prod(net_probe.shapes[-1]))
    layers += [Dense(flat, dense_units), ReLU(), Dense(dense_units, classes)]
    return Network(layers, input_shape)
