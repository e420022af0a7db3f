"""Desk-scale tensor engine: forward, backward, and SGD over layer graphs.

Everything runs on dense numpy arrays in NCHW layout with hand-written
gradients, so pruned candidates can be trained and scored without an
external ML framework. Batch norm always normalizes with the statistics of
the current batch; there are no running averages. Use 64-bit arrays for
verification work, 32-bit for throughput.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .arch import ArchSpec, INPUT_ID, load_arch, propagate_shapes, save_arch

BN_EPS = 1e-5
_PARAM_ORDER = ("w", "b", "gamma", "beta")


class EngineError(RuntimeError):
    """Numerical or structural failure inside the engine."""


@dataclass
class TrainConfig:
    epochs: int
    learning_rate: float
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class ModelInstance:
    """An architecture plus its per-layer weight tensors."""

    arch: ArchSpec
    weights: dict  # layer id -> {"w", "b"?, "gamma"?, "beta"?}

    @property
    def dtype(self):
        first = next(iter(self.weights.values()))
        return first["w"].dtype


def copy_model(model: ModelInstance) -> ModelInstance:
    return ModelInstance(model.arch, copy.deepcopy(model.weights))


def init_model(arch: ArchSpec, seed: int = 0, dtype=np.float64) -> ModelInstance:
    """Fan-in scaled uniform init: w ~ U(-sqrt(6/fan_in), sqrt(6/fan_in))."""
    shapes = dict(propagate_shapes(arch))
    shapes[INPUT_ID] = arch.input_shape
    rng = np.random.default_rng(seed)
    weights = {}
    for layer in arch.layers:
        if layer.kind == "conv":
            cin = shapes[layer.inputs[0]][0]
            kh, kw = layer.kernel
            fan_in = cin * kh * kw
            limit = np.sqrt(6.0 / fan_in)
            params = {"w": rng.uniform(-limit, limit,
                                       (layer.filters, cin, kh, kw)).astype(dtype)}
            if layer.bias:
                params["b"] = np.zeros(layer.filters, dtype=dtype)
            if layer.batch_norm:
                params["gamma"] = np.ones(layer.filters, dtype=dtype)
                params["beta"] = np.zeros(layer.filters, dtype=dtype)
        elif layer.kind == "fully_connected":
            c, h, w = shapes[layer.inputs[0]]
            fan_in = c * h * w
            limit = np.sqrt(6.0 / fan_in)
            params = {"w": rng.uniform(-limit, limit, (layer.filters, fan_in)).astype(dtype)}
            if layer.bias:
                params["b"] = np.zeros(layer.filters, dtype=dtype)
        else:
            continue
        weights[layer.id] = params
    return ModelInstance(arch, weights)


# ---------------------------------------------------------------------------
# Layer primitives
# ---------------------------------------------------------------------------

def _im2col(x, kh, kw, stride, padding):
    b, c, _, _ = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kh * kw)
    return cols, oh, ow


def _col2im(dcols, x_shape, kh, kw, stride, padding, oh, ow):
    b, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    dxp = np.zeros((b, c, hp, wp), dtype=dcols.dtype)
    d = dcols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += d[:, :, i, j]
    if padding:
        return dxp[:, :, padding:padding + h, padding:padding + w]
    return dxp


def _conv_forward(x, w, stride, padding):
    f = w.shape[0]
    cols, oh, ow = _im2col(x, w.shape[2], w.shape[3], stride, padding)
    out = cols @ w.reshape(f, -1).T
    y = out.reshape(x.shape[0], oh, ow, f).transpose(0, 3, 1, 2)
    return y, (cols, x.shape, oh, ow)


def _conv_backward(dy, w, cache, stride, padding):
    cols, x_shape, oh, ow = cache
    f = w.shape[0]
    dym = dy.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (dym.T @ cols).reshape(w.shape)
    dcols = dym @ w.reshape(f, -1)
    dx = _col2im(dcols, x_shape, w.shape[2], w.shape[3], stride, padding, oh, ow)
    return dx, dw


def _bn_forward(x, gamma, beta):
    axes = (0, 2, 3)
    centered = x - x.mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=axes, keepdims=True) + BN_EPS)
    xhat = centered * inv
    y = gamma.reshape(1, -1, 1, 1) * xhat + beta.reshape(1, -1, 1, 1)
    return y, (xhat, inv)


def _bn_backward(dy, gamma, cache):
    xhat, inv = cache
    axes = (0, 2, 3)
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma.reshape(1, -1, 1, 1)
    dx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
    return dx, dgamma, dbeta


def _pool_forward(x, kh, kw, stride, mode):
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    if mode == "max":
        flat = win.reshape(*win.shape[:4], kh * kw)
        idx = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx, oh, ow)
    y = win.mean(axis=(-2, -1))
    return y, (x.shape, None, oh, ow)


def _pool_backward(dy, cache, kh, kw, stride, mode):
    x_shape, idx, oh, ow = cache
    b, c, h, w = x_shape
    dx = np.zeros(x_shape, dtype=dy.dtype)
    if mode == "max":
        # route each window's gradient to its argmax slot, then scatter the
        # slots back per kernel offset (disjoint strided grids, no atomics)
        slots = np.zeros((b, c, oh, ow, kh * kw), dtype=dy.dtype)
        np.put_along_axis(slots, idx[..., None], dy[..., None], axis=-1)
        d = slots.reshape(b, c, oh, ow, kh, kw)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += d[..., i, j]
        return dx
    share = dy / (kh * kw)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += share
    return dx


def _align_indices(align):
    dst = np.flatnonzero(np.asarray(align) >= 0)
    src = np.asarray([align[j] for j in dst], dtype=int)
    return dst, src


# ---------------------------------------------------------------------------
# Graph execution
# ---------------------------------------------------------------------------

def _forward_graph(model: ModelInstance, x, channel_masks=None):
    arch = model.arch
    acts = {INPUT_ID: x}
    caches = {}
    for layer in arch.layers:
        params = model.weights.get(layer.id, {})
        cache = {}
        if layer.kind == "conv":
            z, cache["conv"] = _conv_forward(acts[layer.inputs[0]], params["w"],
                                             layer.stride, layer.padding)
            if "b" in params:
                z = z + params["b"].reshape(1, -1, 1, 1)
            if layer.batch_norm:
                z, cache["bn"] = _bn_forward(z, params["gamma"], params["beta"])
            if layer.activation == "relu":
                z = np.maximum(z, 0)
                cache["relu"] = z > 0
        elif layer.kind == "fully_connected":
            xin = acts[layer.inputs[0]]
            x2 = xin.reshape(xin.shape[0], -1)
            cache["fc"] = (x2, xin.shape)
            z = x2 @ params["w"].T
            if "b" in params:
                z = z + params["b"]
            if layer.activation == "relu":
                z = np.maximum(z, 0)
                cache["relu"] = z > 0
        elif layer.kind == "pool":
            z, cache["pool"] = _pool_forward(acts[layer.inputs[0]], *layer.kernel,
                                             layer.stride, layer.pool_mode)
        elif layer.kind == "global_pool":
            xin = acts[layer.inputs[0]]
            cache["gp"] = xin.shape
            z = xin.mean(axis=(2, 3), keepdims=True)
        elif layer.kind == "residual_add":
            main = acts[layer.inputs[0]]
            short = acts[layer.inputs[1]]
            z = main.copy()
            if layer.shortcut_align is None:
                z[:, :short.shape[1]] += short
                cache["add"] = None
            else:
                dst, src = _align_indices(layer.shortcut_align)
                z[:, dst] += short[:, src]
                cache["add"] = (dst, src, short.shape)
            if layer.activation == "relu":
                z = np.maximum(z, 0)
                cache["relu"] = z > 0
        elif layer.kind == "concat":
            parts = [acts[i] for i in layer.inputs]
            cache["concat"] = [p.shape[1] for p in parts]
            z = np.concatenate(parts, axis=1)
        else:
            raise EngineError(f"unhandled layer kind {layer.kind!r}")
        if channel_masks is not None and layer.id in channel_masks:
            mask = channel_masks[layer.id]
            z = z * mask.reshape((1, -1) + (1,) * (z.ndim - 2))
        acts[layer.id] = z
        caches[layer.id] = cache
    return acts, caches


def forward(model: ModelInstance, batch, channel_masks=None):
    """Class scores, shape (batch, num_classes).

    ``channel_masks`` optionally zeroes the named layers' output channels
    after their activation, emulating pruned filters on the full network.
    """
    batch = np.asarray(batch, dtype=model.dtype)
    expect = model.arch.input_shape
    if batch.ndim != 4 or batch.shape[1:] != expect:
        raise EngineError(f"batch shape {batch.shape} does not match input {expect}")
    acts, _ = _forward_graph(model, batch, channel_masks)
    return acts[model.arch.layers[-1].id]


def loss_and_grads(model: ModelInstance, batch, labels):
    """Softmax cross-entropy loss and gradients for every weight tensor."""
    batch = np.asarray(batch, dtype=model.dtype)
    labels = np.asarray(labels)
    acts, caches = _forward_graph(model, batch)
    scores = acts[model.arch.layers[-1].id]
    loss, dscores = softmax_cross_entropy(scores, labels)
    grads = _backward_graph(model, acts, caches, dscores)
    return loss, grads


def softmax_cross_entropy(scores, labels):
    """Mean cross-entropy over the batch plus its gradient w.r.t. the scores."""
    n = scores.shape[0]
    z = scores - scores.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(n), labels].mean())
    dscores = np.exp(logp)
    dscores[np.arange(n), labels] -= 1.0
    return loss, dscores / n


def _backward_graph(model, acts, caches, dscores):
    arch = model.arch
    grads = {}
    dacts = {arch.layers[-1].id: dscores}

    def acc(key, val):
        if key in dacts:
            dacts[key] = dacts[key] + val
        else:
            dacts[key] = val

    for layer in reversed(arch.layers):
        dy = dacts.pop(layer.id, None)
        if dy is None:
            continue
        params = model.weights.get(layer.id, {})
        cache = caches[layer.id]
        if "relu" in cache:
            dy = dy * cache["relu"]
        if layer.kind == "conv":
            g = {}
            if layer.batch_norm:
                dy, g["gamma"], g["beta"] = _bn_backward(dy, params["gamma"], cache["bn"])
            if "b" in params:
                g["b"] = dy.sum(axis=(0, 2, 3))
            dx, g["w"] = _conv_backward(dy, params["w"], cache["conv"],
                                        layer.stride, layer.padding)
            grads[layer.id] = g
            acc(layer.inputs[0], dx)
        elif layer.kind == "fully_connected":
            x2, in_shape = cache["fc"]
            g = {"w": dy.T @ x2}
            if "b" in params:
                g["b"] = dy.sum(axis=0)
            grads[layer.id] = g
            acc(layer.inputs[0], (dy @ params["w"]).reshape(in_shape))
        elif layer.kind == "pool":
            acc(layer.inputs[0], _pool_backward(dy, cache["pool"], *layer.kernel,
                                                layer.stride, layer.pool_mode))
        elif layer.kind == "global_pool":
            in_shape = cache["gp"]
            acc(layer.inputs[0],
                np.broadcast_to(dy / (in_shape[2] * in_shape[3]), in_shape).copy())
        elif layer.kind == "residual_add":
            acc(layer.inputs[0], dy)
            if cache["add"] is None:
                short_c = acts[layer.inputs[1]].shape[1]
                acc(layer.inputs[1], dy[:, :short_c])
            else:
                dst, src, short_shape = cache["add"]
                dshort = np.zeros(short_shape, dtype=dy.dtype)
                dshort[:, src] = dy[:, dst]
                acc(layer.inputs[1], dshort)
        elif layer.kind == "concat":
            offsets = np.cumsum([0] + cache["concat"])
            for src, lo, hi in zip(layer.inputs, offsets[:-1], offsets[1:]):
                acc(src, dy[:, lo:hi])
    return grads


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------

def sgd_step(model: ModelInstance, grads, learning_rate: float) -> None:
    for lid, g in grads.items():
        params = model.weights[lid]
        for name, dv in g.items():
            params[name] -= learning_rate * dv


def train(model: ModelInstance, data, cfg: TrainConfig) -> ModelInstance:
    """Plain SGD on softmax cross-entropy; deterministic for a given seed."""
    model = copy_model(model)
    if cfg.epochs == 0 or len(data.labels) == 0:
        return model
    rng = np.random.default_rng(cfg.seed)
    n = len(data.labels)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x = data.images[idx].astype(model.dtype, copy=False)
            y = data.labels[idx]
            loss, grads = loss_and_grads(model, x, y)
            if not np.isfinite(loss):
                where = _first_non_finite(model, x)
                raise EngineError(
                    f"non-finite loss at epoch {epoch}, step {step}"
                    + (f" (first non-finite output at layer {where!r})" if where else "")
                )
            sgd_step(model, grads, cfg.learning_rate)
    return model


def _first_non_finite(model, x):
    acts, _ = _forward_graph(model, x)
    for layer in model.arch.layers:
        if not np.isfinite(acts[layer.id]).all():
            return layer.id
    return None


def predict_scores(model: ModelInstance, images, batch_size: int = 256):
    parts = [forward(model, images[i:i + batch_size])
             for i in range(0, len(images), batch_size)]
    return np.concatenate(parts, axis=0)


def error_rate(model: ModelInstance, data, batch_size: int = 256) -> float:
    """Misclassification fraction; argmax ties go to the lowest class index."""
    if len(data.labels) == 0:
        raise EngineError("cannot score an empty dataset")
    scores = predict_scores(model, data.images, batch_size)
    preds = scores.argmax(axis=1)
    return float((preds != data.labels).mean())


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_model(model: ModelInstance, out_dir: str | Path) -> None:
    """Write arch.json, a little-endian weight blob, and its manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_arch(model.arch, out_dir / "arch.json")
    dtype = model.dtype
    le = np.dtype(dtype).newbyteorder("<")
    tensors, chunks, offset = [], [], 0
    for layer in model.arch.layers:
        params = model.weights.get(layer.id)
        if not params:
            continue
        for name in _PARAM_ORDER:
            if name not in params:
                continue
            raw = np.ascontiguousarray(params[name], dtype=le).tobytes()
            tensors.append({"layer": layer.id, "param": name,
                            "shape": list(params[name].shape), "offset": offset,
                            "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    blob = b"".join(chunks)
    (out_dir / "weights.bin").write_bytes(blob)
    manifest = {"dtype": np.dtype(dtype).name, "tensors": tensors,
                "sha256": hashlib.sha256(blob).hexdigest()}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_model(model_dir: str | Path) -> ModelInstance:
    model_dir = Path(model_dir)
    arch = load_arch(model_dir / "arch.json")
    try:
        manifest = json.loads((model_dir / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise EngineError(f"{model_dir}: unreadable model manifest ({e})") from None
    blob = (model_dir / "weights.bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise EngineError(f"{model_dir}: weight blob does not match manifest checksum")
    le = np.dtype(manifest["dtype"]).newbyteorder("<")
    weights: dict[str, dict[str, np.ndarray]] = {}
    for t in manifest["tensors"]:
        arr = np.frombuffer(blob, dtype=le, count=int(np.prod(t["shape"], dtype=int)),
                            offset=t["offset"])
        if arr.nbytes != t["nbytes"]:
            raise EngineError(f"{model_dir}: tensor {t['layer']}/{t['param']} size mismatch")
        shaped = arr.reshape(t["shape"]).astype(manifest["dtype"])
        weights.setdefault(t["layer"], {})[t["param"]] = shaped
    model = ModelInstance(arch, weights)
    _check_weights_match(model)
    return model


def _check_weights_match(model: ModelInstance) -> None:
    shapes = dict(propagate_shapes(model.arch))
    shapes[INPUT_ID] = model.arch.input_shape
    for layer in model.arch.layers:
        if layer.kind == "conv":
            cin = shapes[layer.inputs[0]][0]
            w = model.weights[layer.id]["w"]
            if w.shape != (layer.filters, cin, *layer.kernel):
                raise EngineError(
                    f"layer {layer.id!r}: weight shape {w.shape} does not match arch "
                    f"{(layer.filters, cin, *layer.kernel)}"
                )
        elif layer.kind == "fully_connected":
            c, h, wd = shapes[layer.inputs[0]]
            w = model.weights[layer.id]["w"]
            if w.shape != (layer.filters, c * h * wd):
                raise EngineError(
                    f"layer {layer.id!r}: weight shape {w.shape} does not match arch "
                    f"{(layer.filters, c * h * wd)}"
                )
