"""Skeleton graphs and the broadcast/aggregation matrices of the edge-aware layer."""

import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigError, MissingFileError, ParseError, PreconditionError, ShapeError

FINGERS = ("thumb", "index", "middle", "ring", "pinky")
THUMB_JOINTS = ("cmc", "mcp", "ip", "tip")
FINGER_JOINTS = ("mcp", "pip", "dip", "tip")

GRAPH_FILE_HEADER = "# siagcn graph v1"


@dataclass(frozen=True)
class GraphMatrices:
    """Output of :func:`construct_matrices`.

    ``B`` is ``(E, K)`` and copies node maps onto outgoing edges, ``A_hat`` is
    ``(K, E)`` and averages incoming edge messages. ``edge_order`` lists
    ``(start, end)`` pairs in the order kernels are indexed everywhere else.
    """

    B: np.ndarray
    A_hat: np.ndarray
    in_degree: np.ndarray
    edge_order: tuple

    @property
    def n_edges(self):
        return self.B.shape[0]

    @property
    def n_nodes(self):
        return self.B.shape[1]

    @cached_property
    def start(self):
        return np.array([s for s, _ in self.edge_order], dtype=np.int64)

    @cached_property
    def end(self):
        return np.array([t for _, t in self.edge_order], dtype=np.int64)


def add_self_loops(A):
    """Return ``A`` with its diagonal forced to one (idempotent)."""
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"adjacency must be square, got shape {A.shape}")
    out = (A != 0).astype(np.int64)
    np.fill_diagonal(out, 1)
    return out


def construct_matrices(A):
    """Build the broadcast matrix ``B`` and aggregation matrix ``A_hat``.

    Edges are enumerated with the end node ``i`` in the outer loop and the
    start node ``j`` in the inner loop; ``A[j, i] == 1`` means an edge from
    ``j`` to ``i``. ``A_hat`` is normalized by its row sums (in-degrees), so
    every node receives the mean of its incoming messages.
    """
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"adjacency must be square, got shape {A.shape}")
    if not np.all((A == 0) | (A == 1)):
        raise PreconditionError("adjacency must be binary")
    if not np.all(np.diag(A) == 1):
        raise PreconditionError("adjacency must include self connections (diagonal all ones)")

    K = A.shape[0]
    n_edges = int(A.sum())
    B = np.zeros((n_edges, K))
    A_hat = np.zeros((K, n_edges))
    e = np.zeros(n_edges, dtype=np.int64)
    edge_order = []
    m = 0
    for i in range(K):
        for j in range(K):
            if A[j, i] == 1:
                B[m, j] = 1.0
                e[m] = i
                edge_order.append((j, i))
                m += 1
    for m in range(n_edges):
        A_hat[e[m], m] = 1.0
    D = A_hat.sum(axis=1)
    A_hat = A_hat / D[:, None]
    return GraphMatrices(B=B, A_hat=A_hat, in_degree=D.astype(np.int64), edge_order=tuple(edge_order))


def symmetric_normalize(A_tilde):
    """``D^-1/2 A D^-1/2`` with ``D`` the row sums of ``A_tilde``."""
    A_tilde = np.asarray(A_tilde, dtype=np.float64)
    if A_tilde.ndim != 2 or A_tilde.shape[0] != A_tilde.shape[1]:
        raise ShapeError(f"adjacency must be square, got shape {A_tilde.shape}")
    if np.any(A_tilde < 0):
        raise PreconditionError("adjacency must be non-negative")
    d = A_tilde.sum(axis=1)
    if np.any(d == 0):
        raise PreconditionError("adjacency has a zero row")
    s = 1.0 / np.sqrt(d)
    return s[:, None] * A_tilde * s[None, :]


@dataclass(frozen=True)
class SkeletonGraph:
    """Undirected skeleton with self loops added."""

    node_names: tuple
    bones: tuple = field(default=())

    def __post_init__(self):
        names = tuple(self.node_names)
        if not names:
            raise ConfigError("graph has no nodes")
        if len(set(names)) != len(names):
            raise ConfigError("duplicate node names in graph")
        bones = tuple((int(a), int(b)) for a, b in self.bones)
        for a, b in bones:
            if not (0 <= a < len(names) and 0 <= b < len(names)):
                raise ConfigError(f"bone ({a}, {b}) references a missing node")
            if a == b:
                raise ConfigError(f"bone ({a}, {b}) is a self loop; self loops are added automatically")
        if len({frozenset(b) for b in bones}) != len(bones):
            raise ConfigError("duplicate bone in graph")
        object.__setattr__(self, "node_names", names)
        object.__setattr__(self, "bones", bones)

    @classmethod
    def from_names(cls, names, bone_names):
        index = {n: i for i, n in enumerate(names)}
        try:
            bones = [(index[a], index[b]) for a, b in bone_names]
        except KeyError as exc:
            raise ConfigError(f"bone references unknown node {exc.args[0]!r}") from None
        return cls(tuple(names), tuple(bones))

    @property
    def node_count(self):
        return len(self.node_names)

    @cached_property
    def adjacency(self):
        A = np.zeros((self.node_count, self.node_count), dtype=np.int64)
        for a, b in self.bones:
            A[a, b] = A[b, a] = 1
        return add_self_loops(A)

    @cached_property
    def matrices(self):
        return construct_matrices(self.adjacency)

    @property
    def edge_order(self):
        return self.matrices.edge_order

    @property
    def n_edges(self):
        return self.matrices.n_edges

    def parents(self, root=0):
        """Parent index of every node in a BFS tree from ``root`` (root maps to -1)."""
        parent = [-2] * self.node_count
        parent[root] = -1
        frontier = [root]
        nbrs = [[] for _ in range(self.node_count)]
        for a, b in self.bones:
            nbrs[a].append(b)
            nbrs[b].append(a)
        while frontier:
            nxt = []
            for u in frontier:
                for v in sorted(nbrs[u]):
                    if parent[v] == -2:
                        parent[v] = u
                        nxt.append(v)
            frontier = nxt
        if -2 in parent:
            raise PreconditionError("graph is not connected")
        return parent

    def to_text(self):
        lines = [GRAPH_FILE_HEADER, "[nodes]", *self.node_names, "[bones]"]
        lines += [f"{self.node_names[a]} {self.node_names[b]}" for a, b in self.bones]
        return "\n".join(lines) + "\n"

    def digest(self):
        """SHA-256 over the node names and bone list; identifies the graph in files."""
        return hashlib.sha256(self.to_text().encode("utf-8")).digest()


def hand_node_names():
    names = ["wrist"]
    for finger in FINGERS:
        joints = THUMB_JOINTS if finger == "thumb" else FINGER_JOINTS
        names += [f"{finger}_{j}" for j in joints]
    return tuple(names)


def build_hand_skeleton():
    """21-keypoint hand tree: wrist plus four chained joints per finger."""
    names = hand_node_names()
    bones = []
    for f in range(len(FINGERS)):
        first = 1 + 4 * f
        bones.append((0, first))
        bones += [(first + k, first + k + 1) for k in range(3)]
    return SkeletonGraph(names, tuple(bones))


def build_chain(n_nodes):
    """Path graph ``0 - 1 - ... - n-1``; handy for small test models."""
    return SkeletonGraph(tuple(f"n{i}" for i in range(n_nodes)), tuple((i, i + 1) for i in range(n_nodes - 1)))


def parse_graph(text, source="<string>"):
    section = None
    names, bone_names = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line in ("[nodes]", "[bones]"):
            section = line[1:-1]
        elif section == "nodes":
            if len(line.split()) != 1:
                raise ParseError(f"{source}:{lineno}: node names must be single tokens")
            names.append(line)
        elif section == "bones":
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(f"{source}:{lineno}: bone lines need exactly two node names")
            bone_names.append(tuple(parts))
        else:
            raise ParseError(f"{source}:{lineno}: content outside a [nodes] or [bones] section")
    try:
        return SkeletonGraph.from_names(names, bone_names)
    except ConfigError as exc:
        raise ParseError(f"{source}: {exc}") from None


def load_graph(path):
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"graph file not found: {path}")
    return parse_graph(path.read_text(encoding="utf-8"), source=str(path))


def default_graph_path():
    return Path(__file__).parent / "data" / "hand21.graph"
