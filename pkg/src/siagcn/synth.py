"""Synthetic hand poses, a preliminary-estimator simulator, and heatmap files.

Randomness comes from numpy's PCG64 bit generator seeded through
``SeedSequence([seed, split, index, stream])``, so every sample is a pure
function of the base seed and its position in the dataset.

Geometry is in heatmap pixels with ``(x, y)`` pairs, ``y`` pointing down.
The hand is drawn upright: five fanned finger chains grow from the wrist,
with a small global rotation, per-finger spread and per-joint bends.
"""

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import _binio
from .errors import ConfigError, DataError, HeaderError, MissingFileError, ParseError, ShapeError
from .graph import FINGERS, SkeletonGraph, build_hand_skeleton, parse_graph
from .objective import render_maps

HEATMAP_MAGIC = b"SIAHEAT\0"
HEATMAP_VERSION = 1
_HAS_COORDS = 1

SPLITS = ("train", "val", "test")

# wrist->base, then three phalanges; pixels on a 32x32 map
BONE_LENGTHS_32 = {
    "thumb": (4.0, 3.5, 3.0, 3.0),
    "index": (5.0, 4.0, 3.0, 3.0),
    "middle": (5.0, 4.5, 3.0, 3.0),
    "ring": (5.0, 4.0, 3.0, 3.0),
    "pinky": (4.5, 3.0, 3.0, 3.0),
}
# palm-bone direction of each finger in degrees clockwise from straight up
FINGER_ANGLES = {"thumb": -50.0, "index": -18.0, "middle": -3.0, "ring": 12.0, "pinky": 27.0}
SPREAD_RANGE = 5.0
BEND_RANGES = {"thumb": (0.0, 25.0), "index": (-15.0, 15.0), "middle": (-15.0, 15.0),
               "ring": (-15.0, 15.0), "pinky": (-15.0, 15.0)}
PLACEMENT_MARGIN = 1.0


def sample_rng(seed, *keys):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))


def _check_hand(skeleton):
    if skeleton.bones != build_hand_skeleton().bones:
        raise ConfigError("pose sampling needs the 21-node hand tree topology")


def default_bone_lengths(map_shape=(32, 32)):
    """Bone length table aligned with the hand skeleton's bone order."""
    scale = min(map_shape) / 32.0
    return np.array([length * scale for f in FINGERS for length in BONE_LENGTHS_32[f]])


@dataclass
class PoseSample:
    keypoints: np.ndarray
    gt_maps: np.ndarray
    input_maps: np.ndarray = None
    meta: dict = field(default_factory=dict)


def _pose_offsets(bone_lengths, rotation, scale, spreads, bends):
    kp = np.zeros((1 + 4 * len(FINGERS), 2))
    for f, finger in enumerate(FINGERS):
        angle = FINGER_ANGLES[finger] + rotation + spreads[f]
        pos = np.zeros(2)
        for level in range(4):
            if level > 0:
                angle += bends[f, level - 1]
            t = np.deg2rad(angle)
            pos = pos + scale * bone_lengths[4 * f + level] * np.array([np.sin(t), -np.cos(t)])
            kp[1 + 4 * f + level] = pos
    return kp


def sample_pose(rng_seed, skeleton=None, bone_lengths=None, map_shape=(32, 32), *,
                gt_sigma=1.5, length_jitter=0.1, rotation_range=20.0):
    """Draw one hand pose and render its target maps.

    ``rng_seed`` is an int or a ``numpy.random.Generator``. The wrist lands
    uniformly in the central half of the map, restricted to positions that
    keep the whole hand inside a one-pixel margin; keypoints are clamped to
    the map only if no such position exists.
    """
    skeleton = skeleton or build_hand_skeleton()
    _check_hand(skeleton)
    h, w = map_shape
    lengths = default_bone_lengths(map_shape) if bone_lengths is None else np.asarray(bone_lengths, dtype=np.float64)
    if lengths.shape != (len(skeleton.bones),) or np.any(lengths < 0):
        raise ConfigError(f"need {len(skeleton.bones)} non-negative bone lengths")
    if not 0 <= length_jitter < 1:
        raise ConfigError("length_jitter must be in [0, 1)")
    canon = _pose_offsets(lengths, 0.0, 1.0 + length_jitter, np.zeros(5), np.zeros((5, 3)))
    extent = canon.max(axis=0) - canon.min(axis=0)
    if extent[0] > w - 1 - 2 * PLACEMENT_MARGIN or extent[1] > h - 1 - 2 * PLACEMENT_MARGIN:
        raise ConfigError(f"a {h}x{w} map is too small for the bone lengths (hand extent {extent[0]:.1f}x{extent[1]:.1f})")

    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else sample_rng(rng_seed)
    rotation = rng.uniform(-rotation_range, rotation_range)
    scale = rng.uniform(1.0 - length_jitter, 1.0 + length_jitter)
    spreads = rng.uniform(-SPREAD_RANGE, SPREAD_RANGE, size=5)
    bends = np.stack([rng.uniform(*BEND_RANGES[f], size=3) for f in FINGERS])
    offsets = _pose_offsets(lengths, rotation, scale, spreads, bends)

    wrist = np.empty(2)
    for axis, size in ((0, w), (1, h)):
        lo = PLACEMENT_MARGIN - offsets[:, axis].min()
        hi = size - 1 - PLACEMENT_MARGIN - offsets[:, axis].max()
        clo, chi = max(lo, size / 4.0), min(hi, 3.0 * size / 4.0)
        if clo <= chi:
            lo, hi = clo, chi
        elif lo > hi:
            lo = hi = (size - 1) / 2.0
        wrist[axis] = rng.uniform(lo, hi)
    kp = np.clip(offsets + wrist, 0.0, [w - 1, h - 1])
    meta = {"rotation": float(rotation), "scale": float(scale)}
    return PoseSample(kp, render_maps(kp, map_shape, gt_sigma), meta=meta)


@dataclass(frozen=True)
class CorruptionConfig:
    """Degradations applied on top of the ground-truth pose.

    jitter_sigma
        Std (pixels, per axis) of Gaussian keypoint displacement.
    per_edge_bias
        Fixed displacement (pixels) along the incoming bone of each joint in
        ``bias_joints``; ``"tips"`` selects the five fingertips.
    blur_sigma
        Gaussian blur of the rendered maps.
    distractor_rate
        Per-keypoint probability of a false peak at the same joint of the
        neighbouring finger. The true peak is then dimmed to a random
        amplitude in [0.5, 1] and the false one gets an independent
        amplitude in [0.5, 1], so either may win.
    noise_floor
        Amplitude of additive uniform noise.
    """

    jitter_sigma: float = 2.0
    per_edge_bias: float = 4.0
    bias_joints: str = "tips"
    blur_sigma: float = 0.0
    distractor_rate: float = 0.2
    noise_floor: float = 0.0

    def __post_init__(self):
        for name in ("jitter_sigma", "blur_sigma", "noise_floor"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0.0 <= self.distractor_rate <= 1.0:
            raise ConfigError("distractor_rate must be in [0, 1]")

    def biased_nodes(self, skeleton):
        if self.per_edge_bias == 0 or not self.bias_joints:
            return []
        if self.bias_joints == "tips":
            return [i for i, n in enumerate(skeleton.node_names) if n.endswith("_tip")]
        index = {n: i for i, n in enumerate(skeleton.node_names)}
        names = [s.strip() for s in self.bias_joints.split(",") if s.strip()]
        unknown = [n for n in names if n not in index]
        if unknown:
            raise ConfigError(f"bias_joints names unknown nodes: {', '.join(unknown)}")
        return [index[n] for n in names]


def _sibling(node):
    f, level = divmod(node - 1, 4)
    g = f + 1 if f + 1 < len(FINGERS) else f - 1
    return 1 + 4 * g + level


def corrupt(sample, cfg, rng_seed, skeleton=None, gt_sigma=1.5):
    """Simulated preliminary-estimator maps for ``sample``.

    With an all-zero config the result equals ``sample.gt_maps`` exactly.
    Random draws happen in a fixed order regardless of which knobs are
    active, so changing one knob does not reshuffle the others.
    """
    skeleton = skeleton or build_hand_skeleton()
    _check_hand(skeleton)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else sample_rng(rng_seed)
    kp = np.asarray(sample.keypoints, dtype=np.float64)
    K = kp.shape[0]
    shape = sample.gt_maps.shape[1:]

    pos = kp + cfg.jitter_sigma * rng.standard_normal((K, 2))
    draw = rng.uniform(size=K)
    amp_true = rng.uniform(0.5, 1.0, size=K)
    amp_false = rng.uniform(0.5, 1.0, size=K)
    noise = rng.uniform(size=(K,) + shape)

    parent = skeleton.parents()
    for j in cfg.biased_nodes(skeleton):
        bone = kp[j] - kp[parent[j]]
        norm = np.hypot(*bone)
        if norm > 0:
            pos[j] = pos[j] + cfg.per_edge_bias * bone / norm

    maps = render_maps(pos, shape, gt_sigma)
    for k in range(1, K):
        if draw[k] < cfg.distractor_rate:
            maps[k] = amp_true[k] * maps[k] + amp_false[k] * render_maps(pos[_sibling(k)], shape, gt_sigma)
    if cfg.blur_sigma > 0:
        maps = np.stack([gaussian_filter(m, cfg.blur_sigma, mode="constant") for m in maps])
    maps = maps + cfg.noise_floor * noise
    return np.clip(maps, 0.0, 1.0)


def dump_heatmaps(f, maps, coords=None):
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim != 3:
        raise ShapeError(f"heatmap stack must be (K,h,w), got {maps.shape}")
    K, h, w = maps.shape
    f.write(HEATMAP_MAGIC)
    f.write(struct.pack("<5I", HEATMAP_VERSION, K, h, w, _HAS_COORDS if coords is not None else 0))
    f.write(np.ascontiguousarray(maps, dtype=_binio.F8).tobytes())
    if coords is not None:
        coords = np.asarray(coords, dtype=np.float64)
        if coords.shape != (K, 2):
            raise ShapeError(f"coordinates must be ({K}, 2), got {coords.shape}")
        f.write(np.ascontiguousarray(coords, dtype=_binio.F8).tobytes())


def save_heatmaps(path, maps, coords=None):
    """Binary heatmap file: magic, version, K, h, w, flags, row-major LE float64
    maps, then an optional ``(K, 2)`` coordinate footer."""
    buf = io.BytesIO()
    dump_heatmaps(buf, maps, coords)
    Path(path).write_bytes(buf.getvalue())


def load_heatmaps(path, n_nodes=None):
    """Read a heatmap file; returns ``(maps, coords)`` with ``coords`` None if absent."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"heatmap file not found: {path}")
    with path.open("rb") as f:
        if f.read(len(HEATMAP_MAGIC)) != HEATMAP_MAGIC:
            raise HeaderError(f"{path}: not a heatmap file (bad magic)")
        try:
            version, K, h, w, flags = struct.unpack("<5I", _binio.read_exact(f, 20, "header"))
        except ParseError as exc:
            raise HeaderError(f"{path}: {exc}") from None
        if version != HEATMAP_VERSION:
            raise HeaderError(f"{path}: unsupported heatmap format version {version}")
        if flags & ~_HAS_COORDS or min(K, h, w) == 0:
            raise HeaderError(f"{path}: malformed header")
        if n_nodes is not None and K != n_nodes:
            raise ShapeError(f"{path}: file has {K} channels but the graph has {n_nodes} nodes")
        try:
            maps = np.frombuffer(_binio.read_exact(f, 8 * K * h * w, "maps"), dtype=_binio.F8)
            coords = None
            if flags & _HAS_COORDS:
                coords = np.frombuffer(_binio.read_exact(f, 16 * K, "coordinates"), dtype=_binio.F8)
        except ParseError as exc:
            raise ParseError(f"{path}: {exc}") from None
        if f.read(1):
            raise ParseError(f"{path}: trailing bytes after payload")
    maps = maps.astype(np.float64).reshape(K, h, w)
    if not np.all(np.isfinite(maps)):
        raise DataError(f"{path}: non-finite heatmap values")
    if coords is not None:
        coords = coords.astype(np.float64).reshape(K, 2)
    return maps, coords


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 7
    n_train: int = 2000
    n_val: int = 250
    n_test: int = 500
    height: int = 32
    width: int = 32
    gt_sigma: float = 1.5
    length_jitter: float = 0.1
    rotation_range: float = 20.0

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigError("sample counts must be non-negative")
        if self.gt_sigma <= 0:
            raise ConfigError("gt_sigma must be positive")

    @property
    def map_shape(self):
        return (self.height, self.width)

    def count(self, split):
        return getattr(self, f"n_{split}")


@dataclass
class HeatmapDataset:
    """Input maps with (optional) ground-truth keypoints for one split."""

    inputs: np.ndarray
    keypoints: np.ndarray = None
    gt_sigma: float = 1.5

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def map_shape(self):
        return self.inputs.shape[2:]

    @property
    def n_nodes(self):
        return self.inputs.shape[1]

    def targets(self, idx):
        if self.keypoints is None:
            raise DataError("dataset has no ground truth coordinates")
        return render_maps(self.keypoints[idx], self.map_shape, self.gt_sigma)

    def subset(self, idx):
        kp = None if self.keypoints is None else self.keypoints[idx]
        return HeatmapDataset(self.inputs[idx], kp, self.gt_sigma)


def generate_split(synth, corruption, split, skeleton=None):
    skeleton = skeleton or build_hand_skeleton()
    sid = SPLITS.index(split)
    n = synth.count(split)
    K = skeleton.node_count
    inputs = np.empty((n, K) + synth.map_shape)
    keypoints = np.empty((n, K, 2))
    for i in range(n):
        sample = sample_pose(sample_rng(synth.seed, sid, i, 0), skeleton, None, synth.map_shape,
                             gt_sigma=synth.gt_sigma, length_jitter=synth.length_jitter,
                             rotation_range=synth.rotation_range)
        inputs[i] = corrupt(sample, corruption, sample_rng(synth.seed, sid, i, 1), skeleton, synth.gt_sigma)
        keypoints[i] = sample.keypoints
    return HeatmapDataset(inputs, keypoints, synth.gt_sigma)


def generate_dataset(synth=None, corruption=None, skeleton=None):
    synth = synth or SynthConfig()
    corruption = corruption or CorruptionConfig()
    return {s: generate_split(synth, corruption, s, skeleton) for s in SPLITS}


MANIFEST = "manifest.json"


def write_dataset(root, splits, synth, corruption, skeleton=None):
    """Write ``manifest.json`` and one heatmap file per sample under ``root/<split>/``."""
    skeleton = skeleton or build_hand_skeleton()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for split, data in splits.items():
        d = root / split
        d.mkdir(exist_ok=True)
        for i in range(len(data)):
            kp = None if data.keypoints is None else data.keypoints[i]
            save_heatmaps(d / f"{i:06d}.hmap", data.inputs[i], kp)
    manifest = {
        "format": "siagcn-dataset",
        "version": 1,
        "graph": skeleton.to_text(),
        "graph_sha256": skeleton.digest().hex(),
        "synth": asdict(synth),
        "corruption": asdict(corruption),
        "seeds": {"base": synth.seed, "rng": "PCG64(SeedSequence([base, split, index, stream]))",
                  "splits": {s: i for i, s in enumerate(SPLITS)}, "streams": {"pose": 0, "corruption": 1}},
        "counts": {s: len(d) for s, d in splits.items()},
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def read_manifest(root):
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise MissingFileError(f"dataset manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
        manifest["graph_obj"] = parse_graph(manifest["graph"], source=str(path))
        manifest["counts"]
    except (ValueError, KeyError) as exc:
        raise ParseError(f"{path}: malformed manifest ({exc})") from None
    return manifest


def read_dataset(root, split, graph=None, require_coords=False):
    """Load one split; checks channel counts against ``graph`` when given."""
    manifest = read_manifest(root)
    dgraph = manifest["graph_obj"]
    if graph is not None and graph.node_count != dgraph.node_count:
        raise ShapeError(f"dataset graph has {dgraph.node_count} nodes but the model graph has {graph.node_count}")
    n = manifest["counts"].get(split)
    if n is None:
        raise DataError(f"dataset has no split {split!r}")
    inputs, coords = [], []
    for i in range(n):
        maps, kp = load_heatmaps(Path(root) / split / f"{i:06d}.hmap", dgraph.node_count)
        if require_coords and kp is None:
            raise DataError(f"no ground truth: {split}/{i:06d}.hmap has no coordinate footer")
        inputs.append(maps)
        coords.append(kp)
    if n == 0:
        h, w = manifest.get("synth", {}).get("height", 0), manifest.get("synth", {}).get("width", 0)
        return HeatmapDataset(np.empty((0, dgraph.node_count, h, w)), np.empty((0, dgraph.node_count, 2)))
    has_all = all(c is not None for c in coords)
    kp = np.stack(coords) if has_all else None
    sigma = manifest.get("synth", {}).get("gt_sigma", 1.5)
    return HeatmapDataset(np.stack(inputs), kp, sigma)
