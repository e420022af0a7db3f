"""Independent reference implementations used only to check the package.

Everything here is written the slow, obvious way (explicit loops, literal
selection rules) and shares no code with the package internals.
"""

import numpy as np

BN_EPS = 1e-5


def naive_conv2d(x, w, stride=1, padding=0, bias=None):
    b, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    if padding:
        xp = np.zeros((b, c, h + 2 * padding, wd + 2 * padding), dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + wd] = x
    else:
        xp = x
    oh = (xp.shape[2] - kh) // stride + 1
    ow = (xp.shape[3] - kw) // stride + 1
    y = np.zeros((b, f, oh, ow), dtype=x.dtype)
    for n in range(b):
        for o in range(f):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    y[n, o, i, j] = np.sum(patch * w[o])
            if bias is not None:
                y[n, o] += bias[o]
    return y


def naive_bn(x, gamma, beta):
    y = np.empty_like(x)
    for c in range(x.shape[1]):
        vals = x[:, c]
        m = vals.mean()
        v = vals.var()
        y[:, c] = gamma[c] * (vals - m) / np.sqrt(v + BN_EPS) + beta[c]
    return y


def naive_pool(x, kh, kw, stride, mode):
    b, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    y = np.zeros((b, c, oh, ow), dtype=x.dtype)
    for n in range(b):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    win = x[n, ch, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    y[n, ch, i, j] = win.max() if mode == "max" else win.mean()
    return y


def naive_forward(arch, weights, x):
    """Loop-based forward pass over a layer graph; returns the final scores."""
    acts = {"input": np.asarray(x, dtype=np.float64)}
    for layer in arch.layers:
        src = acts[layer.inputs[0]]
        if layer.kind == "conv":
            p = weights[layer.id]
            z = naive_conv2d(src, p["w"], layer.stride, layer.padding, p.get("b"))
            if layer.batch_norm:
                z = naive_bn(z, p["gamma"], p["beta"])
            if layer.activation == "relu":
                z = np.maximum(z, 0)
        elif layer.kind == "pool":
            z = naive_pool(src, layer.kernel[0], layer.kernel[1], layer.stride,
                           layer.pool_mode)
        elif layer.kind == "global_pool":
            z = src.mean(axis=(2, 3), keepdims=True)
        elif layer.kind == "fully_connected":
            p = weights[layer.id]
            z = src.reshape(len(src), -1) @ p["w"].T
            if "b" in p:
                z = z + p["b"]
            if layer.activation == "relu":
                z = np.maximum(z, 0)
        elif layer.kind == "residual_add":
            short = acts[layer.inputs[1]]
            z = src.copy()
            if layer.shortcut_align is None:
                z[:, :short.shape[1]] += short
            else:
                for out_c, src_c in enumerate(layer.shortcut_align):
                    if src_c >= 0:
                        z[:, out_c] += short[:, src_c]
            if layer.activation == "relu":
                z = np.maximum(z, 0)
        elif layer.kind == "concat":
            z = np.concatenate([acts[i] for i in layer.inputs], axis=1)
        else:
            raise AssertionError(layer.kind)
        acts[layer.id] = z
    return acts[arch.layers[-1].id]


def brute_force_select(f1s, f2s):
    """Literal knee-and-boundary rule; returns (knee, heavy, light) indices."""
    n = len(f1s)
    min1, max1 = min(f1s), max(f1s)
    min2, max2 = min(f2s), max(f2s)
    heavy = 0
    for i in range(n):
        if f1s[i] < f1s[heavy]:
            heavy = i
    light = 0
    for i in range(n):
        if f2s[i] < f2s[light]:
            light = i
    dists = []
    for k in range(n):
        d = 0.0
        if max1 > min1:
            d += (f1s[k] - min1) / (max1 - min1)
        if max2 > min2:
            d += (f2s[k] - min2) / (max2 - min2)
        dists.append(d)
    knee = 0
    for k in range(n):
        if dists[k] < dists[knee]:
            knee = k
    return knee, heavy, light
