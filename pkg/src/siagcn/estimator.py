"""scikit-learn style wrapper around model construction and training.

``X`` is a stack of input heatmaps ``(n, K, h, w)`` and ``y`` the matching
ground-truth keypoints ``(n, K, 2)`` in ``(x, y)`` pixel order.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import ShapeError
from .graph import SkeletonGraph, build_hand_skeleton, load_graph
from .model import ModelConfig, decode_argmax, init_model
from .objective import PCK_DELTAS, LossConfig, mpck
from .synth import HeatmapDataset
from .train import TrainConfig, predict_maps, train_loop


def _check_maps(X, n_nodes=None, map_shape=None):
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_features=1)
    if X.ndim != 4:
        raise ShapeError(f"expected heatmaps of shape (n, K, h, w), got {X.shape}")
    if n_nodes is not None and X.shape[1] != n_nodes:
        raise ShapeError(f"heatmaps have {X.shape[1]} channels, the graph has {n_nodes} nodes")
    if map_shape is not None and tuple(X.shape[2:]) != tuple(map_shape):
        raise ShapeError(f"heatmaps are {tuple(X.shape[2:])}, expected {tuple(map_shape)}")
    return X


def _check_keypoints(y, X):
    y = check_array(np.asarray(y).reshape(len(y), -1), dtype=np.float64).reshape(np.shape(y))
    if y.shape != (X.shape[0], X.shape[1], 2):
        raise ShapeError(f"keypoints must have shape {(X.shape[0], X.shape[1], 2)}, got {y.shape}")
    return y


class SiaPoseRefiner(TransformerMixin, BaseEstimator):
    """Refine keypoint heatmaps with an edge-aware multi-head graph network.

    ``transform`` returns the fused refined maps, ``predict`` their argmax
    keypoints and ``score`` the mPCK against ground truth, with the
    normalizing size taken as the map width.
    """

    def __init__(self, graph=None, n_heads=3, n_layers=3, kernel_size=7, tied=False,
                 epochs=30, batch_size=16, lr=1e-3, milestones=(18, 24), optimizer="adaptive_moment",
                 alpha_schedule=((0, 1.0), (12, 0.1)), gt_sigma=1.5, init_noise=0.01,
                 max_steps=-1, random_state=0):
        self.graph = graph
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.kernel_size = kernel_size
        self.tied = tied
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.milestones = milestones
        self.optimizer = optimizer
        self.alpha_schedule = alpha_schedule
        self.gt_sigma = gt_sigma
        self.init_noise = init_noise
        self.max_steps = max_steps
        self.random_state = random_state

    def _graph(self):
        if self.graph is None:
            return build_hand_skeleton()
        if isinstance(self.graph, SkeletonGraph):
            return self.graph
        return load_graph(self.graph)

    def fit(self, X, y, X_val=None, y_val=None):
        graph = self._graph()
        X = _check_maps(X, graph.node_count)
        y = _check_keypoints(y, X)
        val = None
        if X_val is not None:
            X_val = _check_maps(X_val, graph.node_count, X.shape[2:])
            val = HeatmapDataset(X_val, _check_keypoints(y_val, X_val), self.gt_sigma)
        seed = 0 if self.random_state is None else int(self.random_state)
        mcfg = ModelConfig(n_heads=self.n_heads, n_layers=self.n_layers, kernel_size=self.kernel_size,
                           map_shape=tuple(X.shape[2:]), tied=self.tied, init_noise=self.init_noise)
        tcfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           milestones=tuple(self.milestones), optimizer=self.optimizer,
                           loss=LossConfig(tuple(self.alpha_schedule)), seed=seed, max_steps=self.max_steps)
        model = init_model(graph, mcfg, seed)
        result = train_loop(model, HeatmapDataset(X, y, self.gt_sigma), tcfg, val)
        self.model_ = result.best_model
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.n_nodes_ = graph.node_count
        self.map_shape_ = tuple(X.shape[2:])
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = _check_maps(X, self.n_nodes_, self.map_shape_)
        return predict_maps(self.model_, X)

    def predict(self, X):
        return decode_argmax(self.transform(X))

    def score(self, X, y, deltas=PCK_DELTAS):
        X = _check_maps(X, getattr(self, "n_nodes_", None))
        y = _check_keypoints(y, X)
        return mpck(self.predict(X), y, deltas, X.shape[3])[0]
