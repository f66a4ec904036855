"""Network layers built on the tensor engine: regular and deformable
convolutions, batch norm, activations, pooling, dense heads, the weighted
cross-entropy loss, Adam, and early stopping.

Deformable convolution follows the offsets-per-tap construction: a regular
convolution predicts a (dy, dx) displacement for each kernel tap at each
output location, and the main kernel contracts features sampled at those
fractional positions via bilinear interpolation. With the offset kernel at
zero the layer reduces exactly to a regular convolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import _kernels, gridio
from .tensor import Tensor, as_tensor, matmul, reshape, slice_, exp, log, reduce_sum, reduce_mean, maximum, sqrt, mul, add, sub, div

CLASS_NAMES = ("NAO+", "NAO-", "SB", "AR")


# ---------------------------------------------------------------------------
# convolution primitives
# ---------------------------------------------------------------------------

def _conv_out_size(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def _im2col(xp, k, stride):
    # xp: padded input [B, C, Hp, Wp] -> [B, C*k*k, Ho*Wo]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [B, C, Ho, Wo, k, k]
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * k * k, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Regular 2-D convolution. x: [B,C,H,W], weight: [F,C,K,K], bias: [F]."""
    x, weight = as_tensor(x), as_tensor(weight)
    b, c, h, w = x.shape
    f, cw, k, k2 = weight.shape
    if cw != c or k != k2:
        raise ValueError(f"conv2d: weight {weight.shape} incompatible with input {x.shape}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(f"conv2d: spatial dims {h}x{w} (pad {padding}) smaller than kernel {k}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols, ho, wo = _im2col(xp, k, stride)
    wmat = weight.data.reshape(f, c * k * k)
    out = np.matmul(wmat, cols)  # [B, F, Ho*Wo]
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = out.reshape(b, f, ho, wo)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gf = g.reshape(b, f, ho * wo)
        grad_w = np.tensordot(gf, cols, axes=((0, 2), (0, 2))).reshape(weight.shape)
        gcols = np.matmul(wmat.T, gf)  # [B, C*k*k, Ho*Wo]
        gxp = np.zeros_like(xp)
        gcols = gcols.reshape(b, c, k, k, ho, wo)
        for ki in range(k):
            for kj in range(k):
                gxp[:, :, ki:ki + ho * stride:stride, kj:kj + wo * stride:stride] += gcols[:, :, ki, kj]
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return (gx, grad_w)
        return (gx, grad_w, g.sum(axis=(0, 2, 3)))

    return Tensor.from_op(out, parents, backward)


def gather_bilinear(feat, ys, xs):
    """Sample feat [B,C,H,W] at fractional rows `ys`/cols `xs` [B,S,Ho,Wo].

    Returns [B,C,S,Ho,Wo]. Out-of-bounds corners contribute zero, so a fully
    out-of-bounds sample is zero (consistent with zero padding). Differentiable
    in the feature values and in both coordinate fields.
    """
    feat, ys, xs = as_tensor(feat), as_tensor(ys), as_tensor(xs)
    b, c, h, w = feat.shape
    if ys.shape != xs.shape or ys.shape[0] != b:
        raise ValueError(f"coordinate shapes {ys.shape}/{xs.shape} incompatible with batch {b}")
    s, ho, wo = ys.shape[1:]
    n = s * ho * wo
    y = np.ascontiguousarray(ys.data.reshape(b, n))
    x = np.ascontiguousarray(xs.data.reshape(b, n))
    fdata = np.ascontiguousarray(feat.data)
    out = _kernels.gather_forward(fdata, y, x).reshape(b, c, s, ho, wo)

    def backward(g):
        gf = np.ascontiguousarray(g.reshape(b, c, n), dtype=fdata.dtype)
        grad_feat, gy, gx = _kernels.gather_backward(gf, fdata, y, x)
        return (
            grad_feat if feat.requires_grad else None,
            gy.reshape(ys.shape) if ys.requires_grad else None,
            gx.reshape(xs.shape) if xs.requires_grad else None,
        )

    return Tensor.from_op(out, (feat, ys, xs), backward)


def bilinear_sample(feature, y, x):
    """Sample a [C,H,W] feature map at one fractional (y, x); returns [C]."""
    feature = as_tensor(feature)
    ys = as_tensor(np.full((1, 1, 1, 1), y, dtype=np.float64))
    xs = as_tensor(np.full((1, 1, 1, 1), x, dtype=np.float64))
    c = feature.shape[0]
    out = gather_bilinear(reshape(feature, (1,) + tuple(feature.shape)), ys, xs)
    return reshape(out, (c,))


def maxpool2d(x, kernel=2, stride=2):
    """Max over kernel x kernel windows. Backward routes to the argmax."""
    x = as_tensor(x)
    b, c, h, w = x.shape
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(b, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=4)
    out = np.take_along_axis(flat, arg[..., None], axis=4)[..., 0]

    def backward(g):
        rows = (np.arange(ho) * stride)[None, None, :, None] + arg // kernel
        cols = (np.arange(wo) * stride)[None, None, None, :] + arg % kernel
        bidx = np.arange(b)[:, None, None, None]
        cidx = np.arange(c)[None, :, None, None]
        gx = np.zeros_like(x.data)
        np.add.at(gx, (bidx, cidx, rows, cols), g)
        return (gx,)

    return Tensor.from_op(np.ascontiguousarray(out), (x,), backward)


def leaky_relu(x, slope=0.01):
    if not 0 <= slope < 1:
        raise ValueError(f"leaky_relu slope must be in [0, 1), got {slope}")
    x = as_tensor(x)
    return maximum(x, mul(x, slope))


def dropout(x, rate, rng, train=True):
    """Inverted dropout: retained units scaled by 1/(1-rate) in train mode."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not train or rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, mask)


def dense(x, weight, bias):
    return add(matmul(x, weight), bias)


def select_classes(t, labels):
    """Pick t[i, labels[i]] for each row; gradient scatters back."""
    t = as_tensor(t)
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(t.shape[0])
    out = t.data[rows, labels]

    def backward(g):
        full = np.zeros_like(t.data)
        full[rows, labels] = g
        return (full,)

    return Tensor.from_op(out, (t,), backward)


def log_softmax(logits):
    logits = as_tensor(logits)
    shift = sub(logits, logits.data.max(axis=-1, keepdims=True))
    lse = log(reduce_sum(exp(shift), axis=-1, keepdims=True))
    return sub(shift, lse)


def softmax(logits):
    return exp(log_softmax(logits))


def class_weights(counts, mode="inverse"):
    """Per-class loss weights from sample counts.

    `inverse` (default): min(counts)/counts, so the rarest class gets 1 and
    the majority is down-weighted. `literal`: counts/max(counts), which puts
    weight 1 on the majority class instead.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts <= 0):
        raise ValueError(f"all class counts must be positive, got {counts}")
    if mode == "inverse":
        return counts.min() / counts
    if mode == "literal":
        return counts / counts.max()
    raise ValueError(f"unknown class_weights mode {mode!r}")


def weighted_cross_entropy(logits, labels, weights):
    """-sum_b w[y_b] log p_b[y_b] / sum_b w[y_b], log-sum-exp stabilized."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)[labels].astype(logits.dtype)
    logp = select_classes(log_softmax(logits), labels)
    return div(-reduce_sum(mul(logp, w)), float(w.sum()))


# ---------------------------------------------------------------------------
# Adam and early stopping
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on the param arrays.

    `params` and `grads` are dicts name -> ndarray with matching shapes.
    """
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
    return state


def should_stop(history, patience, min_delta=0.0):
    """True once the metric (higher is better) has gone `patience` epochs
    without improving on the best seen by more than `min_delta`."""
    if len(history) == 0:
        return False
    best = history[0]
    stale = 0
    for value in history[1:]:
        if value > best + min_delta:
            best = value
            stale = 0
        else:
            stale += 1
    return stale >= patience


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _he_init(rng, shape, fan_in, slope=0.0):
    std = np.sqrt(2.0 / ((1.0 + slope * slope) * fan_in))
    return (rng.standard_normal(shape) * std).astype(np.float32)


class Conv2d:
    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=1, rng=None, slope=0.01):
        rng = rng or np.random.default_rng(0)
        self.stride, self.padding, self.kernel = stride, padding, kernel
        self.weight = Tensor(_he_init(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel, slope), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=np.float32), requires_grad=True)

    def __call__(self, x, **_):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}


class DeformableConv2d:
    """Convolution on learned per-tap fractional offsets.

    The offset kernel is a regular convolution emitting 2*K*K channels,
    ordered (dy_0, dx_0, dy_1, dx_1, ...) tap-major. Offset weights and bias
    start at zero so training begins from regular-conv behavior.
    """

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=1, rng=None, slope=0.01):
        rng = rng or np.random.default_rng(0)
        self.stride, self.padding, self.kernel = stride, padding, kernel
        self.weight = Tensor(_he_init(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel, slope), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=np.float32), requires_grad=True)
        self.offset_weight = Tensor(np.zeros((2 * kernel * kernel, in_ch, kernel, kernel), dtype=np.float32), requires_grad=True)
        self.offset_bias = Tensor(np.zeros(2 * kernel * kernel, dtype=np.float32), requires_grad=True)

    def __call__(self, x, **_):
        return deform_conv2d(x, self)

    def parameters(self):
        return {
            "weight": self.weight,
            "bias": self.bias,
            "offset_weight": self.offset_weight,
            "offset_bias": self.offset_bias,
        }


def deform_conv2d(x, layer):
    """Apply a DeformableConv2d layer: offsets, bilinear taps, contraction."""
    x = as_tensor(x)
    b, c, h, w = x.shape
    k, stride, pad = layer.kernel, layer.stride, layer.padding
    f = layer.weight.shape[0]
    if layer.weight.shape[1] != c:
        raise ValueError(f"deform_conv2d: input has {c} channels, kernel expects {layer.weight.shape[1]}")
    s = k * k
    offsets = conv2d(x, layer.offset_weight, layer.offset_bias, stride, pad)  # [B, 2S, Ho, Wo]
    ho, wo = offsets.shape[2], offsets.shape[3]
    dys = slice_(offsets, (slice(None), slice(0, 2 * s, 2)))
    dxs = slice_(offsets, (slice(None), slice(1, 2 * s, 2)))

    taps = np.arange(s)
    base_y = (np.arange(ho) * stride - pad)[None, :, None] + (taps // k)[:, None, None]
    base_x = (np.arange(wo) * stride - pad)[None, None, :] + (taps % k)[:, None, None]
    ys = add(dys, base_y[None].astype(np.float32))
    xs = add(dxs, base_x[None].astype(np.float32))

    sampled = gather_bilinear(x, ys, xs)  # [B, C, S, Ho, Wo]
    cols = reshape(sampled, (b, c * s, ho * wo))
    wmat = reshape(layer.weight, (f, c * s))
    out = add(matmul(wmat, cols), reshape(layer.bias, (1, f, 1)))
    return reshape(out, (b, f, ho, wo))


class BatchNorm2d:
    """Per-channel batch normalization over (batch, H, W).

    Training normalizes with mini-batch statistics and updates running
    estimates; eval mode uses the running estimates only.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x, train=False, **_):
        x = as_tensor(x)
        shape = (1, -1, 1, 1)
        if train:
            mean = reduce_mean(x, axis=(0, 2, 3), keepdims=True)
            centered = sub(x, mean)
            var = reduce_mean(mul(centered, centered), axis=(0, 2, 3), keepdims=True)
            xhat = div(centered, sqrt(add(var, self.eps)))
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mean.data.reshape(-1)).astype(np.float32)
            self.running_var = ((1 - m) * self.running_var + m * var.data.reshape(-1)).astype(np.float32)
        else:
            xhat = mul(
                sub(x, self.running_mean.reshape(shape)),
                1.0 / np.sqrt(self.running_var.reshape(shape) + self.eps),
            )
        return add(mul(xhat, reshape(self.gamma, shape)), reshape(self.beta, shape))

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}


class Dense:
    def __init__(self, in_features, out_features, rng=None, slope=0.01):
        rng = rng or np.random.default_rng(0)
        self.weight = Tensor(_he_init(rng, (in_features, out_features), in_features, slope), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=np.float32), requires_grad=True)

    def __call__(self, x, **_):
        return dense(x, self.weight, self.bias)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class ModelSpec:
    """Architecture knobs: conv blocks, then two dense layers onto 4 classes."""

    in_channels: int = 6
    input_hw: tuple = (32, 64)
    filters: tuple = (8, 16, 16)
    deformable: tuple = None  # per-block flag; default all True
    kernel: int = 3
    strides: tuple = None  # per-block conv stride; default all 1
    pool_stride: int = 2
    dropout: float = 0.3
    fc_width: int = 64
    classes: int = 4
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.classes != 4:
            raise ValueError("output classes are fixed at 4")
        if any(f < 1 for f in self.filters):
            raise ValueError("every block needs at least one filter")
        if self.deformable is None:
            self.deformable = tuple(True for _ in self.filters)
        if self.strides is None:
            self.strides = tuple(1 for _ in self.filters)
        self.filters = tuple(self.filters)
        self.deformable = tuple(self.deformable)
        self.strides = tuple(self.strides)
        self.input_hw = tuple(self.input_hw)

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        return ModelSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


class RegimeNet:
    """Conv blocks (conv -> batch norm -> leaky ReLU -> dropout -> maxpool),
    then flatten -> dense -> leaky ReLU -> dropout -> dense(4)."""

    def __init__(self, spec, seed=0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.blocks = []
        in_ch = spec.in_channels
        h, w = spec.input_hw
        for filters, deform, stride in zip(spec.filters, spec.deformable, spec.strides):
            cls = DeformableConv2d if deform else Conv2d
            conv = cls(in_ch, filters, spec.kernel, stride, padding=spec.kernel // 2, rng=rng, slope=spec.leaky_slope)
            bn = BatchNorm2d(filters)
            self.blocks.append((conv, bn))
            h = _conv_out_size(h, spec.kernel, stride, spec.kernel // 2)
            w = _conv_out_size(w, spec.kernel, stride, spec.kernel // 2)
            h = (h - 2) // spec.pool_stride + 1
            w = (w - 2) // spec.pool_stride + 1
            in_ch = filters
        self.flat_features = in_ch * h * w
        self.fc1 = Dense(self.flat_features, spec.fc_width, rng=rng, slope=spec.leaky_slope)
        self.fc2 = Dense(spec.fc_width, spec.classes, rng=rng, slope=spec.leaky_slope)
        self._rng = np.random.default_rng(seed + 1)

    def forward(self, x, train=False, rng=None):
        rng = rng if rng is not None else self._rng
        t = as_tensor(np.asarray(x, dtype=np.float32))
        for conv, bn in self.blocks:
            t = conv(t)
            t = bn(t, train=train)
            t = leaky_relu(t, self.spec.leaky_slope)
            t = dropout(t, self.spec.dropout, rng, train=train)
            t = maxpool2d(t, 2, self.spec.pool_stride)
        t = reshape(t, (t.shape[0], self.flat_features))
        t = self.fc1(t)
        t = leaky_relu(t, self.spec.leaky_slope)
        t = dropout(t, self.spec.dropout, rng, train=train)
        return self.fc2(t)

    def predict_proba(self, x):
        logits = self.forward(x, train=False)
        return softmax(logits).data

    def parameters(self):
        out = {}
        for i, (conv, bn) in enumerate(self.blocks):
            for name, p in conv.parameters().items():
                out[f"block{i}.conv.{name}"] = p
            for name, p in bn.parameters().items():
                out[f"block{i}.bn.{name}"] = p
        for name, p in self.fc1.parameters().items():
            out[f"fc1.{name}"] = p
        for name, p in self.fc2.parameters().items():
            out[f"fc2.{name}"] = p
        return out

    def running_stats(self):
        out = {}
        for i, (_, bn) in enumerate(self.blocks):
            out[f"block{i}.bn.running_mean"] = bn.running_mean
            out[f"block{i}.bn.running_var"] = bn.running_var
        return out

    def set_running_stats(self, stats):
        for i, (_, bn) in enumerate(self.blocks):
            bn.running_mean = stats[f"block{i}.bn.running_mean"].astype(np.float32).copy()
            bn.running_var = stats[f"block{i}.bn.running_var"].astype(np.float32).copy()

    def state_arrays(self):
        arrays = {name: p.data.copy() for name, p in self.parameters().items()}
        arrays.update({name: a.copy() for name, a in self.running_stats().items()})
        return arrays

    def load_state_arrays(self, arrays):
        params = self.parameters()
        for name, p in params.items():
            if arrays[name].shape != p.data.shape:
                raise ValueError(f"parameter {name}: stored shape {arrays[name].shape} != model {p.data.shape}")
            p.data = arrays[name].astype(np.float32).copy()
            p.grad = np.zeros_like(p.data)
        self.set_running_stats(arrays)


@dataclass
class ModelCheckpoint:
    """Serialized model: spec, parameters, batch-norm stats, input
    normalization constants, and a provenance tag (pretrained/finetuned)."""

    spec: ModelSpec
    arrays: dict  # parameter + running-stat arrays
    norm_mean: np.ndarray  # per input channel
    norm_std: np.ndarray
    provenance: str = "pretrained"

    def save(self, path):
        blocks = dict(self.arrays)
        blocks["input.norm_mean"] = self.norm_mean.astype(np.float32)
        blocks["input.norm_std"] = self.norm_std.astype(np.float32)
        meta = {
            "kind": "model_checkpoint",
            "spec": self.spec.to_dict(),
            "provenance": self.provenance,
        }
        gridio.write_arrays(path, blocks, meta)

    @staticmethod
    def load(path):
        blocks, meta = gridio.read_arrays(path)
        if not meta or meta.get("kind") != "model_checkpoint":
            raise gridio.FormatError("not a model checkpoint container")
        norm_mean = blocks.pop("input.norm_mean")
        norm_std = blocks.pop("input.norm_std")
        spec = ModelSpec.from_dict(meta["spec"])
        return ModelCheckpoint(spec, blocks, norm_mean, norm_std, meta["provenance"])

    def build_model(self, seed=0):
        model = RegimeNet(self.spec, seed=seed)
        model.load_state_arrays(self.arrays)
        return model

    def normalize(self, x):
        shape = (1, -1, 1, 1)
        return (np.asarray(x, dtype=np.float32) - self.norm_mean.reshape(shape)) / self.norm_std.reshape(shape)
