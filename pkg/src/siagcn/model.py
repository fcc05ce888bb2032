"""Multi-head refinement model: parallel SIA-GCN stacks fused by a pointer.

Each head runs its own copy of the input maps through ``n_layers``
edge-aware layers. A pointer maps pooled statistics of the input maps
(per-channel mean and max) to one weight per head, and the refined maps are
the weighted sum of the head outputs. Keypoints are read off with an argmax.
"""

import io
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _binio
from .errors import ConfigError, ContractError, HeaderError, MissingFileError, ShapeError
from .graph import SkeletonGraph, parse_graph
from .layers import EdgeKernelBank, layer_backward, layer_forward
from .numerics import ACTIVATIONS, softmax

MODEL_MAGIC = b"SIAPOSE\0"
MODEL_VERSION = 1
APPENDIX_MAGIC = b"APPX"
POINTER_MODES = ("softmax", "raw")


@dataclass(frozen=True)
class ModelConfig:
    n_heads: int = 3
    n_layers: int = 3
    kernel_size: int = 7
    map_shape: tuple = (32, 32)
    tied: bool = False
    hidden_activation: str = "relu"
    final_activation: str = "identity"
    pointer_mode: str = "softmax"
    init_noise: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "map_shape", tuple(int(s) for s in self.map_shape))
        if self.n_heads < 1 or self.n_layers < 1:
            raise ConfigError("need at least one head and one layer")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")
        for act in (self.hidden_activation, self.final_activation):
            if act not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {act!r}")
        if self.pointer_mode not in POINTER_MODES:
            raise ConfigError(f"unknown pointer_mode {self.pointer_mode!r}")
        if self.init_noise < 0:
            raise ConfigError("init_noise must be non-negative")

    def activation(self, layer):
        return self.final_activation if layer == self.n_layers - 1 else self.hidden_activation


@dataclass
class PointerParams:
    """Affine map from pooled input features (length ``2K``) to head logits."""

    W: np.ndarray
    b: np.ndarray

    @staticmethod
    def features(X0):
        """Per-channel mean followed by per-channel max of ``(N, K, h, w)`` maps."""
        flat = X0.reshape(X0.shape[0], X0.shape[1], -1)
        return np.concatenate([flat.mean(axis=2), flat.max(axis=2)], axis=1)

    def logits(self, features):
        return features @ self.W.T + self.b


@dataclass
class SiaPoseModel:
    graph: SkeletonGraph
    config: ModelConfig
    heads: list
    pointer: PointerParams
    generation: int = field(default=0)

    @property
    def mats(self):
        return self.graph.matrices

    @property
    def n_heads(self):
        return len(self.heads)

    def parameters(self):
        """``(name, array)`` pairs in canonical order: heads, then layers, then pointer."""
        out = []
        for m, head in enumerate(self.heads):
            for l, bank in enumerate(head):
                out.append((f"head{m}.layer{l}.kernels", bank.weights))
        out.append(("pointer.weight", self.pointer.W))
        out.append(("pointer.bias", self.pointer.b))
        return out

    def n_parameters(self):
        return sum(a.size for _, a in self.parameters())

    def bump(self):
        """Mark parameters as modified; forward caches taken earlier become stale."""
        self.generation += 1

    def copy(self):
        heads = [[EdgeKernelBank(b.weights.copy(), b.n_edges, b.tied) for b in head] for head in self.heads]
        pointer = PointerParams(self.pointer.W.copy(), self.pointer.b.copy())
        return SiaPoseModel(self.graph, self.config, heads, pointer)

    def set_parameters(self, arrays):
        params = self.parameters()
        if len(arrays) != len(params):
            raise ShapeError(f"expected {len(params)} parameter tensors, got {len(arrays)}")
        for (name, dst), src in zip(params, arrays):
            src = np.asarray(src, dtype=np.float64)
            if src.shape != dst.shape:
                raise ShapeError(f"{name}: shape {src.shape} does not match {dst.shape}")
            dst[...] = src
        self.bump()


def init_model(graph, config=None, seed=0):
    """Near-identity initialization; see :meth:`EdgeKernelBank.initial`."""
    config = config or ModelConfig()
    rng = np.random.Generator(np.random.PCG64(seed))
    mats = graph.matrices
    heads = [
        [EdgeKernelBank.initial(mats, config.kernel_size, rng, config.init_noise, config.tied) for _ in range(config.n_layers)]
        for _ in range(config.n_heads)
    ]
    W = 0.01 * rng.standard_normal((config.n_heads, 2 * graph.node_count))
    pointer = PointerParams(W, np.zeros(config.n_heads))
    return SiaPoseModel(graph, config, heads, pointer)


@dataclass
class ModelCache:
    model_id: int
    generation: int
    layer_caches: list
    Y: np.ndarray
    w: np.ndarray
    features: np.ndarray
    batched: bool


def fuse(Y, w):
    """Pixelwise ``sum_m w[m] * Y[m]``; a leading batch axis is allowed on both."""
    Y = np.asarray(Y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if Y.ndim == 4 and w.ndim == 1:
        return fuse(Y[None], w[None])[0]
    if Y.ndim != 5 or w.ndim != 2 or Y.shape[:2] != w.shape:
        raise ShapeError(f"cannot fuse head maps {Y.shape} with weights {w.shape}")
    out = w[:, 0, None, None, None] * Y[:, 0]
    for m in range(1, Y.shape[1]):
        out += w[:, m, None, None, None] * Y[:, m]
    return out


def model_forward(X0, model):
    """Returns ``(Y, w, Y_bar, cache)``.

    For ``(K, h, w)`` input: ``Y`` is ``(M, K, h, w)``, ``w`` is ``(M,)`` and
    ``Y_bar`` is ``(K, h, w)``. A leading batch axis on ``X0`` is carried
    through all outputs.
    """
    X0 = np.asarray(X0, dtype=np.float64)
    batched = X0.ndim == 4
    if not batched:
        X0 = X0[None]
    K = model.graph.node_count
    if X0.ndim != 4 or X0.shape[1] != K:
        raise ShapeError(f"input maps of shape {X0.shape[1:]} do not match a {K}-node graph")
    cfg = model.config
    Y = np.empty((X0.shape[0], model.n_heads) + X0.shape[1:])
    layer_caches = []
    for m, head in enumerate(model.heads):
        x, caches = X0, []
        for l, bank in enumerate(head):
            x, c = layer_forward(x, bank, model.mats, cfg.activation(l))
            caches.append(c)
        Y[:, m] = x
        layer_caches.append(caches)
    features = PointerParams.features(X0)
    logits = model.pointer.logits(features)
    w = softmax(logits, axis=1) if cfg.pointer_mode == "softmax" else logits
    Y_bar = fuse(Y, w)
    cache = ModelCache(id(model), model.generation, layer_caches, Y, w, features, batched)
    if not batched:
        return Y[0], w[0], Y_bar[0], cache
    return Y, w, Y_bar, cache


def model_backward(cache, dY_bar, model):
    """Gradients aligned with ``model.parameters()``."""
    if not isinstance(cache, ModelCache) or cache.model_id != id(model):
        raise ContractError("cache does not belong to this model")
    if cache.generation != model.generation:
        raise ContractError("model parameters changed since the forward pass (stale cache)")
    dY_bar = np.asarray(dY_bar, dtype=np.float64)
    if not cache.batched:
        dY_bar = dY_bar[None]
    if dY_bar.shape != cache.Y.shape[:1] + cache.Y.shape[2:]:
        raise ContractError(f"gradient shape {dY_bar.shape} does not match fused output")

    grads = []
    for m, head in enumerate(model.heads):
        d = cache.w[:, m, None, None, None] * dY_bar
        head_grads = [None] * len(head)
        for l in reversed(range(len(head))):
            d, dF = layer_backward(cache.layer_caches[m][l], d, need_input=l > 0)
            head_grads[l] = dF[:1].copy() if head[l].tied else dF
        grads.extend(head_grads)

    dw = np.einsum("nmkhw,nkhw->nm", cache.Y, dY_bar)
    if model.config.pointer_mode == "softmax":
        w = cache.w
        dlogits = w * (dw - (w * dw).sum(axis=1, keepdims=True))
    else:
        dlogits = dw
    grads.append(dlogits.T @ cache.features)
    grads.append(dlogits.sum(axis=0))
    return grads


def decode_argmax(Y_bar):
    """Integer ``(x, y)`` of each channel's maximum.

    Ties go to the first maximum in a row-major scan. Accepts ``(K, h, w)``
    or ``(N, K, h, w)``; returns ``(K, 2)`` or ``(N, K, 2)``.
    """
    Y_bar = np.asarray(Y_bar)
    h, w = Y_bar.shape[-2:]
    if h * w == 0:
        raise ShapeError("cannot decode empty maps")
    idx = Y_bar.reshape(Y_bar.shape[:-2] + (h * w,)).argmax(axis=-1)
    return np.stack([idx % w, idx // w], axis=-1)


def _config_block(model):
    cfg = asdict(model.config)
    cfg["map_shape"] = list(cfg["map_shape"])
    return {"model": cfg, "graph": model.graph.to_text()}


def dump_model(f, model, appendix=None, appendix_tensors=()):
    """Write a model (and an optional appendix) to the binary stream ``f``."""
    f.write(MODEL_MAGIC)
    _binio.write_u32(f, MODEL_VERSION)
    f.write(model.graph.digest())
    _binio.write_json(f, _config_block(model))
    _binio.write_tensors(f, [a for _, a in model.parameters()])
    if appendix is not None:
        f.write(APPENDIX_MAGIC)
        _binio.write_json(f, appendix)
        _binio.write_tensors(f, list(appendix_tensors))


def parse_model(f):
    """Inverse of :func:`dump_model`; returns ``(model, appendix, appendix_tensors)``."""
    magic = f.read(len(MODEL_MAGIC))
    if magic != MODEL_MAGIC:
        raise HeaderError("not a siagcn model file (bad magic)")
    version = _binio.read_u32(f, "version")
    if version != MODEL_VERSION:
        raise HeaderError(f"unsupported model format version {version}")
    digest = _binio.read_exact(f, 32, "graph hash")
    block = _binio.read_json(f, "config block")
    graph = parse_graph(block["graph"], source="<model file>")
    if graph.digest() != digest:
        raise HeaderError("graph hash does not match the embedded graph")
    try:
        config = ModelConfig(**block["model"])
    except TypeError as exc:
        raise HeaderError(f"bad model config block: {exc}") from None
    model = init_model(graph, config)
    model.set_parameters(_binio.read_tensors(f, "parameters"))
    model.generation = 0
    for head in model.heads:
        for bank in head:
            if bank.tied and bank.weights.shape[0] != 1:
                raise HeaderError("tied bank stored with more than one kernel")
    appendix, tensors = None, []
    tag = f.read(len(APPENDIX_MAGIC))
    if tag:
        if tag != APPENDIX_MAGIC:
            raise HeaderError("unexpected trailing data after parameters")
        appendix = _binio.read_json(f, "appendix")
        tensors = _binio.read_tensors(f, "appendix tensors")
    return model, appendix, tensors


def save_model(path, model, appendix=None, appendix_tensors=()):
    buf = io.BytesIO()
    dump_model(buf, model, appendix, appendix_tensors)
    Path(path).write_bytes(buf.getvalue())


def load_model(path):
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"model file not found: {path}")
    with path.open("rb") as f:
        return parse_model(f)
