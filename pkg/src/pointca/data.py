"""Synthetic shapes, depth-buffer partial views, attack pair manifests and file IO."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InvalidParam, InvalidSpec, InvalidViewpoint, ParseError, TooFewClasses
from .geometry import PointCloud, as_points
from .metrics import chamfer

logger = logging.getLogger(__name__)

SHAPE_CLASSES = ("sphere", "box", "cylinder", "plane")
DEFAULT_COMPLETE_SIZE = 1024
DEFAULT_PARTIAL_SIZE = 256
DEFAULT_RASTER = 64


# --------------------------------------------------------------------------
# shape generation


@dataclass(frozen=True)
class ShapeSpec:
    """Parameters of one synthetic object.

    ``dims`` holds the class-specific size parameters: radius for a sphere,
    three side lengths for a box, (radius, height) for a cylinder and two side
    lengths for a plane. All must be positive.
    """

    cls: str
    dims: tuple = ()
    sample_count: int = DEFAULT_COMPLETE_SIZE
    seed: int = 0

    def validate(self):
        want = {"sphere": 1, "box": 3, "cylinder": 2, "plane": 2}
        if self.cls not in want:
            raise InvalidSpec(f"unknown shape class {self.cls!r}")
        if len(self.dims) != want[self.cls]:
            raise InvalidSpec(f"{self.cls} needs {want[self.cls]} dims, got {len(self.dims)}")
        if any(not (d > 0 and np.isfinite(d)) for d in self.dims):
            raise InvalidSpec(f"dims must be positive and finite, got {self.dims}")
        if self.sample_count < 1:
            raise InvalidSpec("sample_count must be >= 1")


def random_spec(cls, rng, sample_count=DEFAULT_COMPLETE_SIZE, seed=0) -> ShapeSpec:
    """Draw class-specific dimensions from ranges that fit inside the unit ball."""
    if cls == "sphere":
        dims = (rng.uniform(0.5, 0.9),)
    elif cls == "box":
        dims = tuple(rng.uniform(0.5, 1.1, size=3))
    elif cls == "cylinder":
        dims = (rng.uniform(0.3, 0.5), rng.uniform(0.6, 1.6))
    elif cls == "plane":
        dims = tuple(rng.uniform(0.8, 1.4, size=2))
    else:
        raise InvalidSpec(f"unknown shape class {cls!r}")
    return ShapeSpec(cls, tuple(float(d) for d in dims), sample_count, seed)


def _sample_sphere(rng, n, r):
    v = rng.normal(size=(n, 3))
    return r * v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_box(rng, n, dims):
    a, b, c = dims
    areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = (rng.uniform(size=(n, 3)) - 0.5) * np.array(dims)
    axis = face // 2
    sign = np.where(face % 2 == 0, -0.5, 0.5)
    pts[np.arange(n), axis] = sign * np.asarray(dims)[axis]
    return pts


def _sample_cylinder(rng, n, r, h):
    side, cap = 2 * np.pi * r * h, np.pi * r * r
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    rad = np.where(part == 0, r, r * np.sqrt(rng.uniform(size=n)))
    z = np.where(part == 0, rng.uniform(-h / 2, h / 2, size=n), np.where(part == 1, -h / 2, h / 2))
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _sample_plane(rng, n, a, b):
    xy = (rng.uniform(size=(n, 2)) - 0.5) * np.array([a, b])
    return np.concatenate([xy, np.zeros((n, 1))], axis=1)


def fit_unit_ball(points):
    """Shrink a centered cloud into the unit ball if it sticks out; else return it as is."""
    pts = np.asarray(points, dtype=np.float64)
    r = np.linalg.norm(pts, axis=1).max()
    return pts / r if r > 1.0 else pts


def farthest_point_sample(points, n, rng):
    """Greedy farthest-point subset of size ``n`` starting from a random point."""
    pts = np.asarray(points)
    idx = np.empty(n, dtype=np.intp)
    idx[0] = rng.integers(pts.shape[0])
    dist = np.linalg.norm(pts - pts[idx[0]], axis=1)
    for i in range(1, n):
        idx[i] = np.argmax(dist)
        dist = np.minimum(dist, np.linalg.norm(pts - pts[idx[i]], axis=1))
    return pts[np.sort(idx)]


OVERSAMPLE = 4


def generate_shape(spec: ShapeSpec) -> PointCloud:
    """Sample ``spec.sample_count`` points evenly over the shape surface.

    Surface points are drawn uniformly by area, ``OVERSAMPLE`` times more than
    needed, then thinned by farthest-point sampling so coverage is even. Shapes
    are centered at the origin and lie inside the unit ball.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.sample_count * OVERSAMPLE
    if spec.cls == "sphere":
        pts = _sample_sphere(rng, n, spec.dims[0])
    elif spec.cls == "box":
        pts = _sample_box(rng, n, spec.dims)
    elif spec.cls == "cylinder":
        pts = _sample_cylinder(rng, n, *spec.dims)
    else:
        pts = _sample_plane(rng, n, *spec.dims)
    pts = farthest_point_sample(fit_unit_ball(pts), spec.sample_count, rng)
    return PointCloud(pts, label=spec.cls, kind="complete")


# --------------------------------------------------------------------------
# partial views


def _camera_basis(viewpoint):
    forward = -viewpoint / np.linalg.norm(viewpoint)
    helper = np.array([0.0, 0.0, 1.0]) if abs(forward[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    right = np.cross(forward, helper)
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    return right, up, forward


def visible_indices(complete, viewpoint, raster=DEFAULT_RASTER, splat_radius=3, depth_tolerance=0.3):
    """Indices of points that survive depth-buffer culling from ``viewpoint``.

    A pinhole camera at ``viewpoint`` looks at the origin. Every point is
    splatted as a disk of ``splat_radius`` pixels into a ``raster x raster``
    depth buffer; a point is visible when its depth is within
    ``depth_tolerance`` of the buffer's nearest depth at its own pixel.
    """
    pts = as_points(complete)
    vp = np.asarray(viewpoint, dtype=np.float64)
    if vp.shape != (3,) or not np.all(np.isfinite(vp)) or np.linalg.norm(vp) <= 1.0:
        raise InvalidViewpoint(f"viewpoint must lie outside the unit ball, got {viewpoint}")
    right, up, forward = _camera_basis(vp)
    rel = pts - vp
    depth = rel @ forward
    half_angle = np.arcsin(1.0 / np.linalg.norm(vp))
    focal = (raster / 2) / np.tan(half_angle) * 0.98
    u = np.clip(np.floor(rel @ right / depth * focal + raster / 2).astype(int), 0, raster - 1)
    v = np.clip(np.floor(rel @ up / depth * focal + raster / 2).astype(int), 0, raster - 1)
    zbuf = np.full((raster, raster), np.inf)
    r = int(splat_radius)
    for du in range(-r, r + 1):
        for dv in range(-r, r + 1):
            if du * du + dv * dv > r * r:
                continue
            uu, vv = u + du, v + dv
            ok = (uu >= 0) & (uu < raster) & (vv >= 0) & (vv < raster)
            np.minimum.at(zbuf, (uu[ok], vv[ok]), depth[ok])
    return np.flatnonzero(depth <= zbuf[u, v] + depth_tolerance)


def render_partial(
    complete,
    viewpoint,
    m=DEFAULT_PARTIAL_SIZE,
    raster=DEFAULT_RASTER,
    splat_radius=3,
    depth_tolerance=0.3,
    seed=0,
) -> PointCloud:
    """Points of ``complete`` seen from ``viewpoint``, resampled to exactly ``m``.

    The visible set (see :func:`visible_indices`) is subsampled without
    replacement, or padded by resampling with replacement when fewer than
    ``m`` points are visible.
    """
    pts = as_points(complete)
    if pts.shape[0] < m:
        raise InvalidParam(f"complete cloud has {pts.shape[0]} points, fewer than m={m}")
    visible = visible_indices(pts, viewpoint, raster, splat_radius, depth_tolerance)
    rng = np.random.default_rng(seed)
    if visible.size >= m:
        chosen = np.sort(rng.choice(visible, size=m, replace=False))
    else:
        extra = rng.choice(visible, size=m - visible.size, replace=True)
        chosen = np.concatenate([visible, extra])
    label = complete.label if isinstance(complete, PointCloud) else None
    return PointCloud(pts[chosen], label=label, kind="partial")


def random_viewpoint(rng, distance=3.0):
    v = rng.normal(size=3)
    return distance * v / np.linalg.norm(v)


# --------------------------------------------------------------------------
# datasets


@dataclass
class Sample:
    """One partial view of one object, with the object's complete cloud."""

    sample_id: str
    object_id: str
    cls: str
    split: str
    viewpoint: np.ndarray
    partial: PointCloud
    complete: PointCloud


@dataclass
class DatasetConfig:
    classes: tuple = SHAPE_CLASSES
    objects_per_class: int = 30
    views_per_object: int = 4
    test_objects_per_class: int = 10
    complete_size: int = DEFAULT_COMPLETE_SIZE
    partial_size: int = DEFAULT_PARTIAL_SIZE
    raster: int = DEFAULT_RASTER
    camera_distance: float = 3.0
    seed: int = 0


def generate_dataset(cfg: DatasetConfig) -> list[Sample]:
    """Deterministic synthetic dataset; the last objects of every class are test data."""
    if cfg.test_objects_per_class >= cfg.objects_per_class:
        raise InvalidParam("need at least one training object per class")
    samples = []
    root = np.random.SeedSequence(cfg.seed)
    class_seqs = root.spawn(len(cfg.classes))
    for cls, seq in zip(cfg.classes, class_seqs):
        for obj, obj_seq in enumerate(seq.spawn(cfg.objects_per_class)):
            rng = np.random.default_rng(obj_seq)
            spec = random_spec(cls, rng, cfg.complete_size, seed=int(rng.integers(2**31)))
            complete = generate_shape(spec)
            split = "test" if obj >= cfg.objects_per_class - cfg.test_objects_per_class else "train"
            oid = f"{cls}_{obj:03d}"
            for view in range(cfg.views_per_object):
                vp = random_viewpoint(rng, cfg.camera_distance)
                partial = render_partial(
                    complete, vp, cfg.partial_size, raster=cfg.raster,
                    seed=int(rng.integers(2**31)),
                )
                samples.append(Sample(f"{oid}_v{view}", oid, cls, split, vp, partial, complete))
    return samples


def save_dataset(samples, root, cfg: Optional[DatasetConfig] = None):
    root = Path(root)
    (root / "complete").mkdir(parents=True, exist_ok=True)
    (root / "partial").mkdir(parents=True, exist_ok=True)
    index = []
    written = set()
    for s in samples:
        gt_path = f"complete/{s.object_id}.xyz"
        if s.object_id not in written:
            write_xyz(root / gt_path, s.complete)
            written.add(s.object_id)
        part_path = f"partial/{s.sample_id}.xyz"
        write_xyz(root / part_path, s.partial)
        index.append({
            "sample_id": s.sample_id,
            "object_id": s.object_id,
            "class": s.cls,
            "split": s.split,
            "viewpoint": [float(x) for x in s.viewpoint],
            "partial_path": part_path,
            "complete_path": gt_path,
        })
    doc = {"version": 1, "samples": index}
    if cfg is not None:
        doc["config"] = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}
    (root / "dataset.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_dataset(root) -> list[Sample]:
    root = Path(root)
    doc = json.loads((root / "dataset.json").read_text())
    cache = {}
    out = []
    for e in doc["samples"]:
        if e["complete_path"] not in cache:
            cache[e["complete_path"]] = read_xyz(root / e["complete_path"], label=e["class"], kind="complete")
        out.append(Sample(
            e["sample_id"], e["object_id"], e["class"], e["split"], np.array(e["viewpoint"]),
            read_xyz(root / e["partial_path"], label=e["class"]),
            cache[e["complete_path"]],
        ))
    return out


# --------------------------------------------------------------------------
# attack pairs


@dataclass
class PairEntry:
    pair_id: str
    source_partial_path: str
    source_gt_path: str
    target_partial_path: str
    target_gt_path: str
    source_class: str
    target_class: str
    target_rank: int = 0
    target_gt_distance: float = 0.0
    t_nre_denominator: Optional[float] = None
    s_nre_denominator: Optional[float] = None


@dataclass
class PairManifest:
    entries: list = field(default_factory=list)
    root: str = "."

    def __len__(self):
        return len(self.entries)

    def resolve(self, rel):
        return Path(self.root) / rel

    def to_json(self):
        return json.dumps({"version": 1, "entries": [asdict(e) for e in self.entries]}, indent=1) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path, root=None):
        doc = json.loads(Path(path).read_text())
        entries = [PairEntry(**e) for e in doc["entries"]]
        return cls(entries, str(root if root is not None else Path(path).parent))


def build_pair_manifest(
    samples, sources_per_class=10, targets_topN=3, seed=0, split="test", limit=None, root="."
) -> PairManifest:
    """Pair every source partial with its CD_P-nearest objects of each other class.

    For each class ``sources_per_class`` source views are drawn. For every
    foreign class the ``targets_topN`` objects whose complete clouds are
    nearest (CD_P) to the source's complete cloud become targets, each with one
    seeded choice of partial view. Ties in distance go to the lower object id.
    """
    pool = [s for s in samples if s.split == split]
    classes = sorted({s.cls for s in pool})
    if len(classes) < 2:
        raise TooFewClasses(f"pairing needs at least 2 classes, got {classes}")
    rng = np.random.default_rng(seed)
    objects = {}
    views = {}
    for s in pool:
        objects.setdefault(s.cls, {})[s.object_id] = s.complete
        views.setdefault(s.object_id, []).append(s)
    gt_dist_cache = {}

    def gt_distance(a, b):
        key = (a, b) if a < b else (b, a)
        if key not in gt_dist_cache:
            ca = views[a][0].complete
            cb = views[b][0].complete
            gt_dist_cache[key] = chamfer(ca, cb)
        return gt_dist_cache[key]

    entries = []
    for cls in classes:
        cands = sorted((s for s in pool if s.cls == cls), key=lambda s: s.sample_id)
        picks = rng.choice(len(cands), size=min(sources_per_class, len(cands)), replace=False)
        for pi in sorted(picks):
            src = cands[pi]
            for tcls in classes:
                if tcls == cls:
                    continue
                ranked = sorted(objects[tcls], key=lambda o: (gt_distance(src.object_id, o), o))
                for rank, oid in enumerate(ranked[:targets_topN]):
                    tv = sorted(views[oid], key=lambda s: s.sample_id)
                    tgt = tv[int(rng.integers(len(tv)))]
                    entries.append(PairEntry(
                        pair_id=f"{src.sample_id}__{tgt.sample_id}",
                        source_partial_path=f"partial/{src.sample_id}.xyz",
                        source_gt_path=f"complete/{src.object_id}.xyz",
                        target_partial_path=f"partial/{tgt.sample_id}.xyz",
                        target_gt_path=f"complete/{oid}.xyz",
                        source_class=cls,
                        target_class=tcls,
                        target_rank=rank,
                        target_gt_distance=gt_distance(src.object_id, oid),
                    ))
    if limit is not None and limit < len(entries):
        keep = np.sort(np.random.default_rng(seed + 1).choice(len(entries), size=limit, replace=False))
        entries = [entries[i] for i in keep]
    return PairManifest(entries, str(root))


# --------------------------------------------------------------------------
# file formats


def write_xyz(path, cloud):
    pts = as_points(cloud)
    lines = [f"{x!r} {y!r} {z!r}" for x, y, z in pts.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_xyz(path, label=None, kind="partial") -> PointCloud:
    """Parse ``x y z`` lines; blank lines and ``#`` comments are skipped."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) != 3:
                raise ParseError(f"expected 3 values, got {len(parts)}", lineno)
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise ParseError(f"not a number: {text!r}", lineno) from exc
    if not rows:
        raise ParseError(f"{path}: no points")
    return PointCloud(np.array(rows), label=label, kind=kind)


def write_ply(path, cloud):
    pts = as_points(cloud)
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {pts.shape[0]}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    body = [f"{x!r} {y!r} {z!r}" for x, y, z in pts.tolist()]
    Path(path).write_text("\n".join(header + body) + "\n")


def read_ply(path, label=None, kind="partial") -> PointCloud:
    """Read an ASCII PLY file with float x, y, z vertex properties."""
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError as exc:
        raise ParseError("binary or non-ASCII PLY is not supported") from exc
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", 1)
    n_vertex = None
    props = []
    in_vertex = False
    end = None
    for i, line in enumerate(lines[1:], 2):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise ParseError(f"unsupported PLY format {' '.join(tok[1:])!r}", i)
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            end = i
            break
    if end is None or n_vertex is None:
        raise ParseError("incomplete PLY header")
    try:
        cols = [props.index(c) for c in ("x", "y", "z")]
    except ValueError as exc:
        raise ParseError("vertex element lacks x, y, z properties") from exc
    rows = []
    for off, line in enumerate(lines[end : end + n_vertex]):
        parts = line.split()
        lineno = end + off + 1
        if len(parts) < len(props):
            raise ParseError(f"expected {len(props)} values", lineno)
        try:
            rows.append([float(parts[c]) for c in cols])
        except ValueError as exc:
            raise ParseError(f"not a number: {line!r}", lineno) from exc
    if len(rows) != n_vertex or n_vertex == 0:
        raise ParseError(f"expected {n_vertex} vertices, found {len(rows)}")
    return PointCloud(np.array(rows), label=label, kind=kind)


def read_cloud(path, **kw):
    return read_ply(path, **kw) if os.fspath(path).endswith(".ply") else read_xyz(path, **kw)
