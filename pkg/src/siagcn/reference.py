"""Slow, literal forward pass used as the finite-difference oracle.

Nothing here touches the numba kernels or the broadcast/aggregation
matrices: each edge's message is computed with an explicit shift-and-add
correlation and averaged into its end node by counting in-edges. The dtype
of the parameter arrays is kept throughout, so passing ``np.longdouble``
parameters gives extended-precision losses on platforms that have them.
"""

import numpy as np

from .numerics import check_kernel_shape


def correlate_same(x, k):
    ch, cw = check_kernel_shape(k.shape)
    h, w = x.shape
    xp = np.zeros((h + 2 * ch, w + 2 * cw), dtype=np.result_type(x, k))
    xp[ch:ch + h, cw:cw + w] = x
    out = np.zeros((h, w), dtype=xp.dtype)
    for u in range(k.shape[0]):
        for v in range(k.shape[1]):
            out += k[u, v] * xp[u:u + h, v:v + w]
    return out


def _act(x, kind):
    return np.maximum(x, 0) if kind == "relu" else x


def reference_fused_maps(X0, graph, config, params):
    """Fused output maps for one ``(K, h, w)`` input from raw parameter arrays.

    ``params`` follows the canonical order of ``SiaPoseModel.parameters()``.
    """
    dtype = params[0].dtype
    X0 = np.asarray(X0).astype(dtype)
    edges = graph.edge_order
    K = graph.node_count
    indeg = np.zeros(K, dtype=dtype)
    for _, t in edges:
        indeg[t] += 1

    heads = []
    it = iter(params)
    for _ in range(config.n_heads):
        x = X0
        for layer in range(config.n_layers):
            F = next(it)
            z = np.zeros_like(x)
            for e, (s, t) in enumerate(edges):
                z[t] += correlate_same(x[s], F[0] if config.tied else F[e])
            z /= indeg[:, None, None]
            x = _act(z, config.activation(layer))
        heads.append(x)
    W, b = next(it), next(it)

    flat = X0.reshape(K, -1)
    feats = np.concatenate([flat.mean(axis=1), flat.max(axis=1)])
    logits = W @ feats + b
    if config.pointer_mode == "softmax":
        e = np.exp(logits - logits.max())
        weights = e / e.sum()
    else:
        weights = logits
    out = np.zeros_like(X0)
    for m, y in enumerate(heads):
        out += weights[m] * y
    return out


def reference_loss(X0, Y_star, S, alpha, graph, config, params):
    """Total loss of one sample computed by :func:`reference_fused_maps`."""
    dtype = params[0].dtype
    Y_bar = reference_fused_maps(X0, graph, config, params)
    Y_star = np.asarray(Y_star).astype(dtype)
    loss = ((Y_bar - Y_star) ** 2).sum()
    if S is not None:
        loss += dtype.type(alpha) * ((np.asarray(S).astype(dtype) - Y_star[None]) ** 2).sum()
    return loss
