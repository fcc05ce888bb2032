"""Same-size 2D correlation kernels, activations and softmax.

All maps are float64. Convolution here is cross-correlation with zero
padding and a centred kernel::

    out[y, x] = sum_{u, v} inp[y + u - ch, x + v - cw] * ker[u, v]

with ``ch = kh // 2`` and ``cw = kw // 2``. Kernels are learned, so the
orientation is only a convention, but it is fixed because serialized
kernel banks depend on it.

The batched kernels below fuse the broadcast step of the edge-aware layer:
edge ``e`` reads the map of node ``start[e]``. Loop order is fixed so that
results are bit-reproducible; the innermost loop runs over image columns
and carries no reduction, which lets it vectorize without reassociation.
"""

import numpy as np
from numba import njit

from .errors import ConfigError, ShapeError

ACTIVATIONS = ("relu", "identity")


@njit(cache=True)
def _correlate_edges(xpad, kernels, start, out):
    n_batch, n_edges, h, w = out.shape
    kh, kw = kernels.shape[1], kernels.shape[2]
    for n in range(n_batch):
        for e in range(n_edges):
            j = start[e]
            for y in range(h):
                for u in range(kh):
                    for v in range(kw):
                        f = kernels[e, u, v]
                        for x in range(w):
                            out[n, e, y, x] += xpad[n, j, y + u, x + v] * f
    return out


@njit(cache=True)
def _correlate_edges_grad_kernels(xpad, grad, start, dk):
    n_batch, n_edges, h, w = grad.shape
    kh, kw = dk.shape[1], dk.shape[2]
    acc = np.empty(w)
    for e in range(n_edges):
        j = start[e]
        for u in range(kh):
            for v in range(kw):
                acc[:] = 0.0
                for n in range(n_batch):
                    for y in range(h):
                        for x in range(w):
                            acc[x] += xpad[n, j, y + u, x + v] * grad[n, e, y, x]
                s = 0.0
                for x in range(w):
                    s += acc[x]
                dk[e, u, v] += s
    return dk


@njit(cache=True)
def _correlate_edges_grad_input(grad, kernels, start, dxpad):
    n_batch, n_edges, h, w = grad.shape
    kh, kw = kernels.shape[1], kernels.shape[2]
    for n in range(n_batch):
        for e in range(n_edges):
            j = start[e]
            for y in range(h):
                for u in range(kh):
                    for v in range(kw):
                        f = kernels[e, u, v]
                        for x in range(w):
                            dxpad[n, j, y + u, x + v] += grad[n, e, y, x] * f
    return dxpad


def check_kernel_shape(shape):
    kh, kw = shape[-2], shape[-1]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}")
    return kh // 2, kw // 2


def pad_maps(x, kernel_shape):
    """Zero-pad the two trailing axes by the kernel half-extents."""
    ch, cw = check_kernel_shape(kernel_shape)
    pad = [(0, 0)] * (x.ndim - 2) + [(ch, ch), (cw, cw)]
    return np.pad(x, pad)


def correlate_edges(x, kernels, start):
    """Per-edge correlation of gathered node maps.

    Parameters
    ----------
    x : ndarray, shape (N, K, h, w)
    kernels : ndarray, shape (E, kh, kw)
    start : ndarray of int, shape (E,)
        Source node of each edge.

    Returns
    -------
    out : ndarray, shape (N, E, h, w)
    xpad : ndarray
        The padded input, kept for the backward pass.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    kernels = np.ascontiguousarray(kernels, dtype=np.float64)
    start = np.ascontiguousarray(start, dtype=np.int64)
    if x.ndim != 4 or kernels.ndim != 3:
        raise ShapeError(f"expected (N,K,h,w) maps and (E,kh,kw) kernels, got {x.shape} and {kernels.shape}")
    if start.shape != (kernels.shape[0],):
        raise ShapeError(f"start index has shape {start.shape}, expected ({kernels.shape[0]},)")
    if start.size and (start.min() < 0 or start.max() >= x.shape[1]):
        raise ShapeError("start index out of range for the node axis")
    xpad = pad_maps(x, kernels.shape)
    out = np.zeros((x.shape[0], kernels.shape[0]) + x.shape[2:])
    _correlate_edges(xpad, kernels, start, out)
    return out, xpad


def correlate_edges_grads(xpad, kernels, start, grad, need_input=True):
    """Gradients of ``sum(grad * correlate_edges(x, kernels, start))``.

    Returns ``(dx, dkernels)``; ``dx`` is None when ``need_input`` is false.
    """
    grad = np.ascontiguousarray(grad, dtype=np.float64)
    kernels = np.ascontiguousarray(kernels, dtype=np.float64)
    start = np.ascontiguousarray(start, dtype=np.int64)
    n, k = xpad.shape[:2]
    ch, cw = check_kernel_shape(kernels.shape)
    h, w = xpad.shape[2] - 2 * ch, xpad.shape[3] - 2 * cw
    if grad.shape != (n, kernels.shape[0], h, w):
        raise ShapeError(f"gradient shape {grad.shape} does not match forward output {(n, kernels.shape[0], h, w)}")
    dk = np.zeros_like(kernels)
    _correlate_edges_grad_kernels(xpad, grad, start, dk)
    if not need_input:
        return None, dk
    dxpad = np.zeros_like(xpad)
    _correlate_edges_grad_input(grad, kernels, start, dxpad)
    return dxpad[:, :, ch:ch + h, cw:cw + w].copy(), dk


def conv2d_same(inp, kernel):
    """Same-size zero-padded correlation of one map with one kernel."""
    inp = np.asarray(inp, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if inp.ndim != 2 or kernel.ndim != 2:
        raise ShapeError(f"conv2d_same needs 2D input and kernel, got ranks {inp.ndim} and {kernel.ndim}")
    if min(inp.shape) < 1:
        raise ShapeError("input map is empty")
    return conv2d_channelwise(inp[None], kernel[None])[0]


def conv2d_channelwise(X, F):
    """Correlate channel ``c`` of ``X`` with kernel ``F[c]``; channels never mix."""
    X = np.asarray(X, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    _check_channelwise(X, F)
    out, _ = correlate_edges(X[None], F, np.arange(X.shape[0]))
    return out[0]


def conv2d_channelwise_grads(X, F, dOut):
    """Input and kernel gradients of ``sum(dOut * conv2d_channelwise(X, F))``."""
    X = np.asarray(X, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    dOut = np.asarray(dOut, dtype=np.float64)
    _check_channelwise(X, F)
    if dOut.shape != X.shape:
        raise ShapeError(f"dOut shape {dOut.shape} does not match input shape {X.shape}")
    xpad = pad_maps(X[None], F.shape)
    dX, dF = correlate_edges_grads(xpad, F, np.arange(X.shape[0]), dOut[None])
    return dX[0], dF


def _check_channelwise(X, F):
    if X.ndim != 3 or F.ndim != 3:
        raise ShapeError(f"expected (C,h,w) maps and (C,kh,kw) kernels, got {X.shape} and {F.shape}")
    if X.shape[0] != F.shape[0]:
        raise ShapeError(f"channel mismatch: {X.shape[0]} maps vs {F.shape[0]} kernels")
    check_kernel_shape(F.shape)


def _check_activation(kind):
    if kind not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation(x, kind):
    _check_activation(kind)
    x = np.asarray(x, dtype=np.float64)
    if kind == "relu":
        return np.maximum(x, 0.0)
    return x.copy()


def activation_grad(x, dOut, kind):
    """Backward of :func:`activation`; the ReLU subgradient at 0 is 0."""
    _check_activation(kind)
    dOut = np.asarray(dOut, dtype=np.float64)
    if kind == "relu":
        return np.where(np.asarray(x) > 0.0, dOut, 0.0)
    return dOut.copy()


def softmax(v, axis=-1):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0 or v.shape[axis] == 0:
        raise ShapeError("softmax of an empty vector")
    z = np.exp(v - v.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)
