"""Small convolutional encoder with optional classifier head and decoder.

Everything operates on a flat parameter vector (:class:`ModelParameters`) so that
federated aggregation, weight deltas and persistence reduce to vector arithmetic.
Images are NHWC arrays with values in [0, 1].

The three head modes:

* ``CLF`` - encoder + softmax classifier, loss = cross-entropy
* ``AE``  - encoder + decoder, loss = mean squared reconstruction error
* ``SAE`` - encoder + classifier + decoder, loss = CE + recon_weight * MSE
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ConfigurationError, InputError, InternalError
from .persist import load_array, save_array

HEAD_MODES = ("CLF", "AE", "SAE")
PROB_FLOOR = 1e-12
# reductions longer than this are accumulated in float64
_ACC64_THRESHOLD = 10_000

Layout = tuple[tuple[str, tuple[int, ...]], ...]


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, int, int] = (28, 28, 1)
    embedding_dim: int = 32
    class_count: int = 10
    head_mode: str = "SAE"
    recon_weight: float = 1.0
    channels: tuple[int, int] = (16, 32)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        h, w, c = self.input_shape if len(self.input_shape) == 3 else (0, 0, 0)
        if len(self.input_shape) != 3 or min(h, w, c) < 1:
            raise ConfigurationError(f"input_shape must be (H, W, C) with positive sizes, got {self.input_shape}")
        if h % 4 or w % 4:
            raise ConfigurationError(f"input height and width must be divisible by 4, got {h}x{w}")
        if self.embedding_dim < 1:
            raise ConfigurationError("embedding_dim must be a positive integer")
        if self.class_count < 2:
            raise ConfigurationError("class_count must be at least 2")
        if self.head_mode not in HEAD_MODES:
            raise ConfigurationError(f"head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")
        if not self.recon_weight >= 0:
            raise ConfigurationError("recon_weight must be >= 0")
        if len(self.channels) != 2 or min(self.channels) < 1:
            raise ConfigurationError("channels must be two positive integers")

    @property
    def has_classifier(self) -> bool:
        return self.head_mode in ("CLF", "SAE")

    @property
    def has_decoder(self) -> bool:
        return self.head_mode in ("AE", "SAE")

    @property
    def bottleneck_shape(self) -> tuple[int, int, int]:
        h, w, _ = self.input_shape
        return (h // 4, w // 4, self.channels[1])

    def with_head(self, head_mode: str) -> "NetworkSpec":
        return replace(self, head_mode=head_mode)

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "embedding_dim": self.embedding_dim,
            "class_count": self.class_count,
            "head_mode": self.head_mode,
            "recon_weight": self.recon_weight,
            "channels": list(self.channels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            input_shape=tuple(d["input_shape"]),
            embedding_dim=int(d["embedding_dim"]),
            class_count=int(d["class_count"]),
            head_mode=d["head_mode"],
            recon_weight=float(d["recon_weight"]),
            channels=tuple(d["channels"]),
        )


def param_layout(spec: NetworkSpec) -> Layout:
    _, _, cin = spec.input_shape
    c1, c2 = spec.channels
    flat = int(np.prod(spec.bottleneck_shape))
    e, k = spec.embedding_dim, spec.class_count
    layout = [
        ("enc.conv1.w", (3, 3, cin, c1)),
        ("enc.conv1.b", (c1,)),
        ("enc.conv2.w", (3, 3, c1, c2)),
        ("enc.conv2.b", (c2,)),
        ("enc.fc.w", (flat, e)),
        ("enc.fc.b", (e,)),
    ]
    if spec.has_classifier:
        layout += [("clf.w", (e, k)), ("clf.b", (k,))]
    if spec.has_decoder:
        layout += [
            ("dec.fc.w", (e, flat)),
            ("dec.fc.b", (flat,)),
            ("dec.conv1.w", (3, 3, c2, c1)),
            ("dec.conv1.b", (c1,)),
            ("dec.conv2.w", (3, 3, c1, cin)),
            ("dec.conv2.b", (cin,)),
        ]
    return tuple(layout)


@dataclass(frozen=True, eq=False)
class ModelParameters:
    """Flat weight vector plus the ``(name, shape)`` layout that slices it."""

    values: np.ndarray
    layout: Layout = field(default=())

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 1:
            raise InternalError("parameter values must be a flat vector")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", tuple((n, tuple(s)) for n, s in self.layout))
        total = sum(int(np.prod(s, dtype=np.int64)) for _, s in self.layout)
        if total != values.size:
            raise InternalError(f"layout describes {total} values, vector has {values.size}")

    @property
    def size(self) -> int:
        return self.values.size

    def arrays(self) -> dict[str, np.ndarray]:
        out, offset = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape, dtype=np.int64))
            out[name] = self.values[offset : offset + n].reshape(shape)
            offset += n
        return out

    def with_values(self, values: np.ndarray) -> "ModelParameters":
        return ModelParameters(np.asarray(values), self.layout)

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.values.copy(), self.layout)

    def astype(self, dtype) -> "ModelParameters":
        return ModelParameters(self.values.astype(dtype), self.layout)

    def same_layout(self, other: "ModelParameters") -> bool:
        return self.layout == other.layout


Gradients = ModelParameters


def init_params(spec: NetworkSpec, seed: int) -> ModelParameters:
    """Glorot-uniform weights, zero biases; deterministic in ``(spec, seed)``."""
    if not isinstance(spec, NetworkSpec):
        raise ConfigurationError("init_params needs a NetworkSpec")
    rng = np.random.default_rng(seed)
    layout = param_layout(spec)
    chunks = []
    for name, shape in layout:
        if name.endswith(".b"):
            chunks.append(np.zeros(shape, dtype=np.float32).ravel())
            continue
        if len(shape) == 4:
            fan_in, fan_out = shape[0] * shape[1] * shape[2], shape[0] * shape[1] * shape[3]
        else:
            fan_in, fan_out = shape
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-bound, bound, size=shape).astype(np.float32).ravel())
    return ModelParameters(np.concatenate(chunks), layout)


def save_params(path: str | Path, params: ModelParameters, spec: NetworkSpec, **provenance) -> Path:
    meta = {
        "kind": "model_parameters",
        "layout": [[name, list(shape)] for name, shape in params.layout],
        "spec": spec.to_dict(),
        "provenance": provenance,
    }
    return save_array(path, params.values, meta)


def load_params(path: str | Path) -> tuple[ModelParameters, NetworkSpec, dict]:
    values, meta = load_array(path)
    params = ModelParameters(values.ravel(), [(n, tuple(s)) for n, s in meta["layout"]])
    return params, NetworkSpec.from_dict(meta["spec"]), meta.get("provenance", {})


# ---------------------------------------------------------------- primitives


def _matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` with float64 accumulation when the contracted axis is long."""
    if a.shape[-1] > _ACC64_THRESHOLD and a.dtype == np.float32:
        return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)
    return a @ b


def _im2col(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (n, h, w, c, 3, 3)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, 9 * c)


def _conv_forward(x, w, b):
    n, h, wd, _ = x.shape
    cols = _im2col(x)
    out = cols @ w.reshape(-1, w.shape[-1]) + b
    return out.reshape(n, h, wd, w.shape[-1]), cols


def _conv_backward(dout, cols, x_shape, w):
    n, h, wd, c = x_shape
    d2 = dout.reshape(-1, dout.shape[-1])
    dw = _matmul(cols.T, d2).reshape(w.shape)
    db = d2.sum(axis=0, dtype=np.float64 if d2.shape[0] > _ACC64_THRESHOLD else None).astype(dout.dtype)
    dcols = (d2 @ w.reshape(-1, w.shape[-1]).T).reshape(n, h, wd, 3, 3, c)
    dxp = np.zeros((n, h + 2, wd + 2, c), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i : i + h, j : j + wd, :] += dcols[:, :, :, i, j, :]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def _pool_forward(x):
    n, h, w, c = x.shape
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=-1)
    return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0], idx


def _pool_backward(dout, idx, x_shape):
    n, h, w, c = x_shape
    d = np.zeros(dout.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(d, idx[..., None], dout[..., None], axis=-1)
    return d.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(x_shape)


def _upsample(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _upsample_backward(d):
    n, h, w, c = d.shape
    return d.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------- network


class ForwardOutput(NamedTuple):
    embeddings: np.ndarray
    class_probs: np.ndarray | None
    reconstruction: np.ndarray | None


def _check_batch(spec: NetworkSpec, batch: np.ndarray, dtype) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != spec.input_shape:
        raise InputError(f"batch shape {batch.shape} does not match (N, *{spec.input_shape})")
    if batch.shape[0] < 1:
        raise InputError("empty batch")
    return batch.astype(dtype, copy=False)


def _check_params(params: ModelParameters, spec: NetworkSpec) -> dict[str, np.ndarray]:
    if params.layout != param_layout(spec):
        raise InputError("parameter layout does not match network spec")
    return params.arrays()


def _encode(p, x, cache):
    z1, cols1 = _conv_forward(x, p["enc.conv1.w"], p["enc.conv1.b"])
    a1 = np.maximum(z1, 0)
    p1, idx1 = _pool_forward(a1)
    z2, cols2 = _conv_forward(p1, p["enc.conv2.w"], p["enc.conv2.b"])
    a2 = np.maximum(z2, 0)
    p2, idx2 = _pool_forward(a2)
    flat = p2.reshape(len(x), -1)
    emb = flat @ p["enc.fc.w"] + p["enc.fc.b"]
    if cache is not None:
        cache.update(x=x, z1=z1, cols1=cols1, a1=a1, idx1=idx1, p1=p1, z2=z2, cols2=cols2,
                     a2=a2, idx2=idx2, p2=p2, flat=flat)
    return emb


def _decode(p, spec, emb, cache):
    n = len(emb)
    hz = emb @ p["dec.fc.w"] + p["dec.fc.b"]
    h = np.maximum(hz, 0).reshape((n,) + spec.bottleneck_shape)
    u1 = _upsample(h)
    z3, cols3 = _conv_forward(u1, p["dec.conv1.w"], p["dec.conv1.b"])
    a3 = np.maximum(z3, 0)
    u2 = _upsample(a3)
    z4, cols4 = _conv_forward(u2, p["dec.conv2.w"], p["dec.conv2.b"])
    recon = expit(z4)
    if cache is not None:
        cache.update(hz=hz, u1=u1, cols3=cols3, z3=z3, u2=u2, cols4=cols4)
    return recon


def _forward(p, spec, x, cache=None) -> ForwardOutput:
    emb = _encode(p, x, cache)
    probs = recon = None
    if spec.has_classifier:
        probs = _softmax(emb @ p["clf.w"] + p["clf.b"])
    if spec.has_decoder:
        recon = _decode(p, spec, emb, cache)
    return ForwardOutput(emb, probs, recon)


def forward(params: ModelParameters, spec: NetworkSpec, batch: np.ndarray) -> ForwardOutput:
    p = _check_params(params, spec)
    x = _check_batch(spec, batch, params.values.dtype)
    return _forward(p, spec, x)


def encode(params: ModelParameters, spec: NetworkSpec, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Encoder outputs for ``images``, computed in chunks of ``batch_size``."""
    p = _check_params(params, spec)
    x = _check_batch(spec, images, params.values.dtype)
    parts = [_encode(p, x[i : i + batch_size], None) for i in range(0, len(x), batch_size)]
    return np.concatenate(parts, axis=0)


def predict_proba(params: ModelParameters, spec: NetworkSpec, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    if not spec.has_classifier:
        raise InputError(f"head mode {spec.head_mode} has no classifier")
    p = _check_params(params, spec)
    x = _check_batch(spec, images, params.values.dtype)
    parts = []
    for i in range(0, len(x), batch_size):
        emb = _encode(p, x[i : i + batch_size], None)
        parts.append(_softmax(emb @ p["clf.w"] + p["clf.b"]))
    return np.concatenate(parts, axis=0)


def _cross_entropy(probs, labels):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (len(probs),):
        raise InputError("labels must be a vector with one entry per image")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise InputError("label outside [0, class_count)")
    p_true = probs[np.arange(len(probs)), labels]
    return float(-np.mean(np.log(np.maximum(p_true, PROB_FLOOR), dtype=np.float64)))


def _mse(recon, inputs):
    diff = recon.astype(np.float64) - inputs
    return float(np.mean(diff * diff))


def loss(spec: NetworkSpec, outputs: ForwardOutput, labels: np.ndarray | None, inputs: np.ndarray) -> float:
    if spec.has_classifier and labels is None:
        raise InputError(f"head mode {spec.head_mode} needs labels")
    total = 0.0
    if spec.has_classifier:
        total += _cross_entropy(outputs.class_probs, labels)
    if spec.has_decoder:
        mse = _mse(outputs.reconstruction, np.asarray(inputs))
        total += mse if spec.head_mode == "AE" else spec.recon_weight * mse
    return total


def backward(
    params: ModelParameters, spec: NetworkSpec, batch: np.ndarray, labels: np.ndarray | None = None
) -> tuple[float, Gradients]:
    """Mean loss over ``batch`` and its gradient with respect to every parameter."""
    if spec.has_classifier and labels is None:
        raise InputError(f"head mode {spec.head_mode} needs labels")
    p = _check_params(params, spec)
    dtype = params.values.dtype
    x = _check_batch(spec, batch, dtype)
    n = len(x)
    cache: dict = {}
    out = _forward(p, spec, x, cache)
    value = loss(spec, out, labels, x)
    g: dict[str, np.ndarray] = {}
    demb = np.zeros_like(out.embeddings)

    if spec.has_classifier:
        labels = np.asarray(labels, dtype=np.int64)
        rows = np.arange(n)
        dlogits = out.class_probs.copy()
        dlogits[rows, labels] -= 1
        # the floored log is flat below PROB_FLOOR
        dlogits *= (out.class_probs[rows, labels] >= PROB_FLOOR)[:, None]
        dlogits /= n
        g["clf.w"] = out.embeddings.T @ dlogits
        g["clf.b"] = dlogits.sum(axis=0)
        demb += dlogits @ p["clf.w"].T

    if spec.has_decoder:
        recon = out.reconstruction
        scale = 1.0 if spec.head_mode == "AE" else spec.recon_weight
        drecon = (2.0 * scale / recon.size) * (recon - x)
        dz4 = (drecon * recon * (1 - recon)).astype(dtype)
        du2, g["dec.conv2.w"], g["dec.conv2.b"] = _conv_backward(dz4, cache["cols4"], cache["u2"].shape, p["dec.conv2.w"])
        da3 = _upsample_backward(du2)
        dz3 = da3 * (cache["z3"] > 0)
        du1, g["dec.conv1.w"], g["dec.conv1.b"] = _conv_backward(dz3, cache["cols3"], cache["u1"].shape, p["dec.conv1.w"])
        dh = _upsample_backward(du1).reshape(n, -1)
        dhz = dh * (cache["hz"] > 0)
        g["dec.fc.w"] = out.embeddings.T @ dhz
        g["dec.fc.b"] = dhz.sum(axis=0)
        demb += dhz @ p["dec.fc.w"].T

    g["enc.fc.w"] = cache["flat"].T @ demb
    g["enc.fc.b"] = demb.sum(axis=0)
    dp2 = (demb @ p["enc.fc.w"].T).reshape(cache["p2"].shape)
    da2 = _pool_backward(dp2, cache["idx2"], cache["a2"].shape)
    dz2 = da2 * (cache["z2"] > 0)
    dp1, g["enc.conv2.w"], g["enc.conv2.b"] = _conv_backward(dz2, cache["cols2"], cache["p1"].shape, p["enc.conv2.w"])
    da1 = _pool_backward(dp1, cache["idx1"], cache["a1"].shape)
    dz1 = da1 * (cache["z1"] > 0)
    _, g["enc.conv1.w"], g["enc.conv1.b"] = _conv_backward(dz1, cache["cols1"], x.shape, p["enc.conv1.w"])

    flat = np.concatenate([g[name].astype(dtype, copy=False).ravel() for name, _ in params.layout])
    return value, ModelParameters(flat, params.layout)


def sgd_step(params: ModelParameters, grads: Gradients, lr: float) -> ModelParameters:
    if not params.same_layout(grads):
        raise InternalError("parameter and gradient layouts differ")
    dtype = params.values.dtype
    return params.with_values(params.values - dtype.type(lr) * grads.values.astype(dtype, copy=False))


def train_local(
    params: ModelParameters,
    spec: NetworkSpec,
    dataset,
    epochs: int,
    lr: float,
    batch_size: int,
    prox: tuple[float, ModelParameters] | None = None,
    seed: int = 0,
    return_losses: bool = False,
):
    """Seeded minibatch SGD over ``dataset`` (anything with ``images``/``labels``).

    With ``prox = (mu, anchor)`` every step adds ``mu * (params - anchor)`` to the
    gradient. If ``return_losses`` is set, also returns the size-weighted mean
    batch loss of every epoch.
    """
    if epochs < 1:
        raise ConfigurationError("epochs must be >= 1")
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    if not lr >= 0:
        raise ConfigurationError("lr must be non-negative")
    labels = dataset.labels
    if spec.has_classifier and labels is None:
        raise InputError(f"head mode {spec.head_mode} needs a labeled dataset")
    images = dataset.images
    n = len(images)
    if n < 1:
        raise InputError("cannot train on an empty dataset")
    if prox is not None:
        mu, anchor = prox
        if mu < 0:
            raise ConfigurationError("prox mu must be >= 0")
        if not anchor.same_layout(params):
            raise InternalError("prox anchor layout differs from parameters")
        mu = params.values.dtype.type(mu)
    rng = np.random.default_rng(seed)
    current = params
    epoch_losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            value, grads = backward(current, spec, images[idx], None if labels is None else labels[idx])
            if prox is not None:
                grads = grads.with_values(grads.values + mu * (current.values - anchor.values))
            current = sgd_step(current, grads, lr)
            total += value * len(idx)
        epoch_losses.append(total / n)
    if return_losses:
        return current, epoch_losses
    return current
