"""A small numpy network with hand-written reverse mode and Adam.

Image tensors are channels-last, ``(batch, height, width, channels)``;
dense layers act on the last axis.  A forward pass run with a tape records
what each layer needs for its backward pass, so several evaluation contexts
can share one (read-only) network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container
from .errors import ConfigError, ShapeError, StateError

_CONV_CHUNK = 2  # samples per im2col block; keeps the column buffer in cache


class Layer:
    kind = "Layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def spec(self) -> dict:
        return {"type": self.kind}

    def forward(self, x, t, tape):
        raise NotImplementedError

    def backward(self, cache, dy, param_grads=True, input_grad=True):
        raise NotImplementedError

    def astype(self, dtype):
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
            self.grads[k] = np.zeros_like(self.params[k])


class PixelBias(Layer):
    """Independent trainable offset for every pixel (and channel)."""

    kind = "PixelBias"

    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(int(s) for s in shape)
        self.params["b"] = np.zeros(self.shape)
        self.grads["b"] = np.zeros(self.shape)

    def spec(self):
        return {"type": self.kind, "shape": list(self.shape)}

    def forward(self, x, t, tape):
        if x.shape[1:] != self.shape:
            raise ShapeError(f"PixelBias expects {self.shape}, got {x.shape[1:]}")
        return x + self.params["b"], None

    def backward(self, cache, dy, param_grads=True, input_grad=True):
        if param_grads:
            self.grads["b"] += dy.sum(axis=0)
        return dy


class Conv2D(Layer):
    """Same-padded ``k x k`` (optionally dilated) convolution via chunked im2col."""

    kind = "Conv2D"

    def __init__(self, in_ch, out_ch, k=3, dilation=1):
        super().__init__()
        if k % 2 != 1:
            raise ConfigError("only odd kernel sizes keep 'same' padding symmetric")
        if dilation < 1:
            raise ConfigError("dilation must be >= 1")
        self.in_ch, self.out_ch, self.k, self.dilation = int(in_ch), int(out_ch), int(k), int(dilation)
        self.params["W"] = np.zeros((k * k * in_ch, out_ch))
        self.params["b"] = np.zeros(out_ch)
        self.grads["W"] = np.zeros_like(self.params["W"])
        self.grads["b"] = np.zeros_like(self.params["b"])

    def spec(self):
        return {"type": self.kind, "in_ch": self.in_ch, "out_ch": self.out_ch, "k": self.k,
                "dilation": self.dilation}

    @property
    def pad(self):
        return self.dilation * (self.k // 2)

    @property
    def fan_in(self):
        return self.k * self.k * self.in_ch

    def _cols(self, xp, H, W):
        k, d = self.k, self.dilation
        b, C = xp.shape[0], xp.shape[3]
        cols = np.empty((b, H, W, k, k, C), dtype=xp.dtype)
        for ky in range(k):
            for kx in range(k):
                cols[:, :, :, ky, kx, :] = xp[:, ky * d:ky * d + H, kx * d:kx * d + W, :]
        return cols.reshape(b * H * W, k * k * C)

    def forward(self, x, t, tape):
        if x.ndim != 4 or x.shape[3] != self.in_ch:
            raise ShapeError(f"Conv2D expects (B,H,W,{self.in_ch}), got {x.shape}")
        B, H, W, _ = x.shape
        p = self.pad
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        Wm, bias = self.params["W"], self.params["b"]
        out = np.empty((B * H * W, self.out_ch), dtype=x.dtype)
        step = _CONV_CHUNK * H * W
        for s in range(0, B, _CONV_CHUNK):
            out[s * H * W:s * H * W + step] = self._cols(xp[s:s + _CONV_CHUNK], H, W) @ Wm
        out += bias
        return out.reshape(B, H, W, self.out_ch), (xp if tape else None)

    def backward(self, xp, dy, param_grads=True, input_grad=True):
        B, H, W, _ = dy.shape
        k, p, d = self.k, self.pad, self.dilation
        Wm = self.params["W"]
        dflat = dy.reshape(B * H * W, self.out_ch)
        dxp = np.zeros_like(xp) if input_grad else None
        dW = np.zeros_like(Wm) if param_grads else None
        for s in range(0, B, _CONV_CHUNK):
            rows = slice(s * H * W, min(B, s + _CONV_CHUNK) * H * W)
            dchunk = dflat[rows]
            if param_grads:
                dW += self._cols(xp[s:s + _CONV_CHUNK], H, W).T @ dchunk
            if input_grad:
                dcols = (dchunk @ Wm.T).reshape(-1, H, W, k, k, self.in_ch)
                block = dxp[s:s + _CONV_CHUNK]
                for ky in range(k):
                    for kx in range(k):
                        block[:, ky * d:ky * d + H, kx * d:kx * d + W, :] += dcols[:, :, :, ky, kx, :]
        if param_grads:
            self.grads["W"] += dW
            self.grads["b"] += dflat.sum(axis=0)
        if not input_grad:
            return None
        return dxp[:, p:p + H, p:p + W, :]


class Dense(Layer):
    kind = "Dense"

    def __init__(self, n_in, n_out):
        super().__init__()
        self.n_in, self.n_out = int(n_in), int(n_out)
        self.params["W"] = np.zeros((n_in, n_out))
        self.params["b"] = np.zeros(n_out)
        self.grads["W"] = np.zeros_like(self.params["W"])
        self.grads["b"] = np.zeros_like(self.params["b"])

    def spec(self):
        return {"type": self.kind, "n_in": self.n_in, "n_out": self.n_out}

    @property
    def fan_in(self):
        return self.n_in

    def forward(self, x, t, tape):
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"Dense expects last axis {self.n_in}, got {x.shape}")
        return x @ self.params["W"] + self.params["b"], (x if tape else None)

    def backward(self, x, dy, param_grads=True, input_grad=True):
        if param_grads:
            self.grads["W"] += x.reshape(-1, self.n_in).T @ dy.reshape(-1, self.n_out)
            self.grads["b"] += dy.reshape(-1, self.n_out).sum(axis=0)
        return dy @ self.params["W"].T if input_grad else None


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Activation(Layer):
    kind = "Activation"
    KINDS = ("silu", "relu", "softplus")

    def __init__(self, fn="silu"):
        super().__init__()
        fn = fn.lower()
        if fn not in self.KINDS:
            raise ConfigError(f"unknown activation {fn!r}")
        self.fn = fn

    def spec(self):
        return {"type": self.kind, "fn": self.fn}

    def forward(self, x, t, tape):
        if self.fn == "silu":
            y = x * _sigmoid(x)
        elif self.fn == "relu":
            y = np.maximum(x, 0)
        else:
            y = np.logaddexp(0, x)
        return y, (x if tape else None)

    def backward(self, x, dy, param_grads=True, input_grad=True):
        if self.fn == "silu":
            s = _sigmoid(x)
            return dy * (s * (1 + x * (1 - s)))
        if self.fn == "relu":
            return dy * (x > 0)
        return dy * _sigmoid(x)


def time_features(t, n_freq):
    """Sinusoidal features ``[sin(w t), cos(w t)]`` on log-spaced ``w``."""
    t = np.asarray(t, dtype=float).reshape(-1, 1)
    w = np.exp(np.linspace(0.0, math.log(100.0), n_freq))
    return np.concatenate([np.sin(w * t), np.cos(w * t)], axis=1)


class TimeEmbedAdd(Layer):
    """Adds ``Dense(time_features(t))`` to every position, per channel."""

    kind = "TimeEmbedAdd"

    def __init__(self, channels, n_freq=16):
        super().__init__()
        self.channels, self.n_freq = int(channels), int(n_freq)
        self.params["W"] = np.zeros((2 * n_freq, channels))
        self.params["b"] = np.zeros(channels)
        self.grads["W"] = np.zeros_like(self.params["W"])
        self.grads["b"] = np.zeros_like(self.params["b"])

    def spec(self):
        return {"type": self.kind, "channels": self.channels, "n_freq": self.n_freq}

    @property
    def fan_in(self):
        return 2 * self.n_freq

    def forward(self, x, t, tape):
        if t is None:
            raise ShapeError("TimeEmbedAdd needs a time input")
        if x.shape[-1] != self.channels:
            raise ShapeError(f"TimeEmbedAdd expects {self.channels} channels, got {x.shape}")
        B = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1), (B,))
        feats = time_features(t, self.n_freq).astype(x.dtype)
        add = feats @ self.params["W"] + self.params["b"]
        add = add.reshape((B,) + (1,) * (x.ndim - 2) + (self.channels,))
        return x + add, (feats if tape else None)

    def backward(self, feats, dy, param_grads=True, input_grad=True):
        if param_grads:
            dsum = dy.reshape(dy.shape[0], -1, self.channels).sum(axis=1)
            self.grads["W"] += feats.T @ dsum
            self.grads["b"] += dsum.sum(axis=0)
        return dy


_LAYER_TYPES = {cls.kind: cls for cls in (PixelBias, Conv2D, Dense, Activation, TimeEmbedAdd)}


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    cls = _LAYER_TYPES.get(spec.pop("type", None))
    if cls is None:
        raise ConfigError(f"unknown layer spec {spec}")
    return cls(**spec)


class Network:
    def __init__(self, layers, dtype=np.float64):
        self.layers = list(layers)
        self.dtype = np.dtype(dtype)
        self.last_tape = None
        for layer in self.layers:
            layer.astype(self.dtype)

    def specs(self):
        return [layer.spec() for layer in self.layers]

    def parameters(self):
        """Yield ``(key, param, grad)`` in declaration order."""
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                yield f"{i}.{name}", layer.params[name], layer.grads[name]

    @property
    def n_params(self):
        return sum(p.size for _, p, _ in self.parameters())

    def zero_grad(self):
        for _, _, g in self.parameters():
            g[...] = 0.0

    def astype(self, dtype):
        self.dtype = np.dtype(dtype)
        for layer in self.layers:
            layer.astype(self.dtype)
        return self

    def forward(self, x, t=None, tape=None):
        h = np.asarray(x, dtype=self.dtype)
        for layer in self.layers:
            h, cache = layer.forward(h, t, tape is not None)
            if tape is not None:
                tape.append(cache)
        return h

    def backward(self, tape, cotangent, param_grads=True, input_grad=True):
        if tape is None or len(tape) != len(self.layers):
            raise StateError("backward called without a recorded forward pass")
        dy = np.asarray(cotangent, dtype=self.dtype)
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            need_in = input_grad or i > 0
            dy = self.layers[i].backward(tape[i], dy, param_grads=param_grads, input_grad=need_in)
        return dy


def net_forward(net: Network, x, t=None):
    """Forward pass that caches activations on ``net`` for :func:`net_backward`."""
    tape = []
    out = net.forward(x, t, tape=tape)
    net.last_tape = tape
    return out


def net_backward(net: Network, output_cotangent, param_grads=True):
    """Accumulate weight gradients and return the input cotangent."""
    if net.last_tape is None:
        raise StateError("net_backward called before net_forward")
    return net.backward(net.last_tape, output_cotangent, param_grads=param_grads)


def init_he_uniform(net: Network, rng):
    """He-uniform weights for Conv2D/Dense/TimeEmbedAdd, zero biases."""
    for layer in net.layers:
        if "W" in layer.params:
            bound = math.sqrt(6.0 / layer.fan_in)
            W = layer.params["W"]
            W[...] = rng.uniform(-bound, bound, W.shape)
        for name, p in layer.params.items():
            if name != "W":
                p[...] = 0.0
    return net


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_network(cls, net: Network, lr=2e-4, **kw):
        params = [p for _, p, _ in net.parameters()]
        return cls(lr=lr, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **kw)


def adam_step(net: Network, state: AdamState, lr=None):
    """Bias-corrected Adam update of every parameter; gradients are zeroed."""
    lr = state.lr if lr is None else lr
    if not state.m:
        fresh = AdamState.for_network(net, lr=state.lr)
        state.m, state.v = fresh.m, fresh.v
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for (_, p, g), m, v in zip(net.parameters(), state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
        g[...] = 0.0


# -- standard backbones -------------------------------------------------------


def score_backbone(grid_shape, channels=32, n_freq=16, rng=None, dtype=np.float64):
    """Four 3x3 convolutions (1 -> C -> C -> C -> 1) with SiLU.

    Time features enter after the first convolution; a per-pixel bias
    there gives the otherwise translation-invariant stack a sense of
    absolute position.
    """
    H, W = grid_shape
    C = channels
    layers = [
        Conv2D(1, C), TimeEmbedAdd(C, n_freq), PixelBias((H, W, C)), Activation("silu"),
        Conv2D(C, C), Activation("silu"),
        Conv2D(C, C), Activation("silu"),
        Conv2D(C, 1),
    ]
    net = Network(layers, dtype=dtype)
    if rng is not None:
        init_he_uniform(net, rng)
    return net


def mlp_score_backbone(dim, hidden=64, n_freq=16, rng=None, dtype=np.float64):
    """Two hidden dense layers with a time embedding, for low-dimensional data."""
    layers = [
        Dense(dim, hidden), TimeEmbedAdd(hidden, n_freq), Activation("silu"),
        Dense(hidden, hidden), Activation("silu"),
        Dense(hidden, dim),
    ]
    net = Network(layers, dtype=dtype)
    if rng is not None:
        init_he_uniform(net, rng)
    return net


def surrogate_backbone(grid_shape, channels=32, n_conv=5, out_ch=1, dilations=(1, 2, 4, 8, 1),
                       rng=None, dtype=np.float64):
    """Per-pixel bias, then ``n_conv`` constant-resolution 3x3 convolutions.

    The default dilations give a 33x33 receptive field, enough for every
    output node to see the whole 16x16 parameter field.
    """
    H, W = grid_shape
    dil = list(dilations) if dilations else [1] * n_conv
    if len(dil) != n_conv:
        raise ConfigError("need one dilation per convolution")
    layers = [PixelBias((H, W, 1))]
    c_in = 1
    for i in range(n_conv):
        last = i == n_conv - 1
        layers.append(Conv2D(c_in, out_ch if last else channels, dilation=dil[i]))
        if not last:
            layers.append(Activation("silu"))
        c_in = channels
    net = Network(layers, dtype=dtype)
    if rng is not None:
        init_he_uniform(net, rng)
    return net


# -- checkpoints --------------------------------------------------------------


def save_network(path, net: Network, meta=None, adam: AdamState | None = None):
    header = {"kind": "network", "layers": net.specs(), "meta": meta or {}}
    arrays = [(key, p) for key, p, _ in net.parameters()]
    if adam is not None and adam.m:
        header["adam"] = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
                          "eps": adam.eps, "step": adam.step}
        arrays += [(f"adam.m.{i}", m) for i, m in enumerate(adam.m)]
        arrays += [(f"adam.v.{i}", v) for i, v in enumerate(adam.v)]
    return write_container(path, header, arrays)


def load_network(path, dtype=np.float64):
    """Return ``(net, meta, adam_state_or_None)``."""
    header, arrays = read_container(path)
    if header.get("kind") != "network":
        raise ConfigError(f"{path} is not a network checkpoint")
    net = Network([layer_from_spec(s) for s in header["layers"]], dtype=np.float64)
    for key, p, _ in net.parameters():
        p[...] = arrays[key]
    net.astype(dtype)
    adam = None
    if "adam" in header:
        a = header["adam"]
        n = sum(1 for _ in net.parameters())
        adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"],
                         m=[arrays[f"adam.m.{i}"].astype(dtype) for i in range(n)],
                         v=[arrays[f"adam.v.{i}"].astype(dtype) for i in range(n)])
    return net, header.get("meta", {}), adam
