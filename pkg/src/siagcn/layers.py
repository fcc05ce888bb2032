"""Edge-aware graph convolution over heatmap stacks.

One layer maps node maps ``X`` of shape ``(K, h, w)`` to::

    X_next = act(A_hat @ ((B @ X) (*) F))

where ``B @ X`` copies each node map onto its outgoing edges, ``(*)``
correlates every edge map with that edge's own kernel and ``A_hat``
averages incoming edge messages per node. All functions also accept a
leading batch axis ``(N, K, h, w)``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .numerics import activation, activation_grad, check_kernel_shape, correlate_edges, correlate_edges_grads


@dataclass
class EdgeKernelBank:
    """One kernel per directed edge, in the graph's canonical edge order.

    When ``tied`` is set a single kernel is stored and shared by every edge;
    ``weights`` then has a leading extent of 1 while :attr:`F` still exposes
    the full ``(E, kh, kw)`` view.
    """

    weights: np.ndarray
    n_edges: int
    tied: bool = False

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 3:
            raise ShapeError(f"kernel bank must be rank 3, got shape {self.weights.shape}")
        check_kernel_shape(self.weights.shape)
        expected = 1 if self.tied else self.n_edges
        if self.weights.shape[0] != expected:
            raise ShapeError(f"kernel bank holds {self.weights.shape[0]} kernels, expected {expected}")

    @property
    def kernel_shape(self):
        return self.weights.shape[1:]

    @property
    def F(self):
        if self.tied:
            return np.broadcast_to(self.weights, (self.n_edges,) + self.kernel_shape)
        return self.weights

    @classmethod
    def identity(cls, mats, kernel_size, tied=False):
        """Bank that makes :func:`layer_forward` the identity map.

        Self-loop kernels are deltas scaled by the end node's in-degree so the
        mean over incoming edges returns the node's own map; all other edges
        start at zero. A tied bank cannot separate self loops from bones, so it
        gets a plain delta.
        """
        c = kernel_size // 2
        if tied:
            w = np.zeros((1, kernel_size, kernel_size))
            w[0, c, c] = 1.0
            return cls(w, mats.n_edges, tied=True)
        w = np.zeros((mats.n_edges, kernel_size, kernel_size))
        for e, (s, t) in enumerate(mats.edge_order):
            if s == t:
                w[e, c, c] = mats.in_degree[t]
        return cls(w, mats.n_edges)

    @classmethod
    def initial(cls, mats, kernel_size, rng, noise=0.01, tied=False):
        bank = cls.identity(mats, kernel_size, tied=tied)
        bank.weights += noise * rng.standard_normal(bank.weights.shape)
        return bank


@dataclass
class LayerCache:
    xpad: np.ndarray
    z: np.ndarray
    kernels: np.ndarray
    start: np.ndarray
    A_hat: np.ndarray
    act: str
    tied: bool
    batched: bool


def _as_batch(X, n_nodes):
    X = np.asarray(X, dtype=np.float64)
    batched = X.ndim == 4
    if not batched:
        if X.ndim != 3:
            raise ShapeError(f"node maps must be (K,h,w) or (N,K,h,w), got shape {X.shape}")
        X = X[None]
    if X.shape[1] != n_nodes:
        raise ShapeError(f"maps have {X.shape[1]} channels but the graph has {n_nodes} nodes")
    return X, batched


def layer_forward(X, bank, mats, act="relu"):
    """Edge-aware propagation; returns ``(X_next, cache)``."""
    if bank.n_edges != mats.n_edges:
        raise ShapeError(f"kernel bank has {bank.n_edges} edges, graph has {mats.n_edges}")
    X, batched = _as_batch(X, mats.n_nodes)
    n, K, h, w = X.shape
    kernels = np.array(bank.F)
    edge_maps, xpad = correlate_edges(X, kernels, mats.start)
    z = np.matmul(mats.A_hat, edge_maps.reshape(n, mats.n_edges, h * w)).reshape(n, K, h, w)
    out = activation(z, act)
    cache = LayerCache(xpad, z, kernels, mats.start, mats.A_hat, act, bank.tied, batched)
    return (out if batched else out[0]), cache


def layer_backward(cache, dX_next, need_input=True):
    """Gradients ``(dX, dF)`` of ``sum(dX_next * X_next)``.

    ``dF`` always has the full ``(E, kh, kw)`` shape; for tied banks its
    slices are the summed shared gradient.
    """
    if not isinstance(cache, LayerCache):
        raise ContractError("layer_backward needs the cache returned by layer_forward")
    dX_next = np.asarray(dX_next, dtype=np.float64)
    if not cache.batched:
        dX_next = dX_next[None]
    if dX_next.shape != cache.z.shape:
        raise ContractError(f"gradient shape {dX_next.shape} does not match cached output {cache.z.shape}")
    n, K, h, w = dX_next.shape
    dz = activation_grad(cache.z, dX_next, cache.act)
    d_edges = np.matmul(cache.A_hat.T, dz.reshape(n, K, h * w)).reshape(n, -1, h, w)
    dX, dF = correlate_edges_grads(cache.xpad, cache.kernels, cache.start, d_edges, need_input=need_input)
    if cache.tied:
        dF = np.broadcast_to(dF.sum(axis=0), dF.shape).copy()
    if dX is not None and not cache.batched:
        dX = dX[0]
    return dX, dF


def shared_kernel_layer_forward(X, kernel, mats, act="relu"):
    """Tied-kernel layer computed node-wise.

    With one kernel on every edge the correlation commutes with the graph
    averaging, so this convolves each node map once and then mixes nodes with
    the ``K x K`` operator ``A_hat @ B``.
    """
    X, batched = _as_batch(X, mats.n_nodes)
    n, K, h, w = X.shape
    kernel = np.asarray(kernel, dtype=np.float64)
    node_maps, _ = correlate_edges(X, np.broadcast_to(kernel, (K,) + kernel.shape).copy(), np.arange(K))
    mix = mats.A_hat @ mats.B
    out = activation(np.matmul(mix, node_maps.reshape(n, K, h * w)).reshape(n, K, h, w), act)
    return out if batched else out[0]


@dataclass
class VanillaGcnParams:
    """Flattened-feature GCN layer: weight ``W`` and normalized adjacency."""

    W: np.ndarray
    A_norm: np.ndarray


def vanilla_gcn_forward(H, params, act="identity"):
    """``act(A_norm @ H @ W)`` for node features ``H`` of shape ``(K, M_in)``."""
    H = np.asarray(H, dtype=np.float64)
    W = np.asarray(params.W, dtype=np.float64)
    A = np.asarray(params.A_norm, dtype=np.float64)
    if H.ndim != 2 or W.ndim != 2 or A.shape != (H.shape[0], H.shape[0]) or W.shape[0] != H.shape[1]:
        raise ShapeError(f"incompatible shapes H{H.shape}, W{W.shape}, A_norm{A.shape}")
    return activation(A @ H @ W, act)
