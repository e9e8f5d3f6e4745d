"""Point clouds, synthetic labelled shapes, and file I/O (xyz-text, OFF, dataset manifests)."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

SHAPE_KINDS = ("sphere", "cube", "cylinder", "torus")
PART_COUNTS = {"sphere": 2, "cube": 6, "cylinder": 3, "torus": 2}
PART_NAMES = {
    "sphere": ("upper", "lower"),
    "cube": ("+x", "-x", "+y", "-y", "+z", "-z"),
    "cylinder": ("side", "top", "bottom"),
    "torus": ("+x", "-x"),
}
TORUS_MAJOR = 1.0
TORUS_MINOR = 0.4
DEFAULT_NOISE = 0.01


@dataclass
class PointCloud:
    coords: np.ndarray
    part_labels: Optional[np.ndarray] = None
    class_label: Optional[int] = None
    id: str = ""

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2:
            raise ValueError(f"PointCloud: coords must be N x C, got shape {self.coords.shape}")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError(f"PointCloud {self.id!r}: non-finite coordinate")
        if self.part_labels is not None:
            self.part_labels = np.asarray(self.part_labels, dtype=np.int64)
            if self.part_labels.shape != (self.coords.shape[0],):
                raise ValueError(f"PointCloud {self.id!r}: {self.part_labels.shape[0]} part labels "
                                 f"for {self.coords.shape[0]} points")

    @property
    def num_points(self) -> int:
        return self.coords.shape[0]

    def with_coords(self, coords: np.ndarray) -> "PointCloud":
        return replace(self, coords=coords)


def normalize(cloud: PointCloud) -> PointCloud:
    """Centre on the centroid and scale so the farthest point has norm 1."""
    if cloud.num_points < 1:
        raise ValueError("normalize: empty cloud")
    centered = cloud.coords - cloud.coords.mean(axis=0)
    radius = np.sqrt(np.max(np.sum(centered * centered, axis=1)))
    if radius == 0.0:
        raise ValueError(f"normalize: degenerate cloud {cloud.id!r} (all points identical)")
    return cloud.with_coords(centered / radius)


def part_labels_from_coords(kind: str, coords: np.ndarray) -> np.ndarray:
    """Part label of each point of an un-noised, un-normalised primitive."""
    x, z = coords[:, 0], coords[:, 2]
    if kind == "sphere":
        return np.where(z >= 0, 0, 1)
    if kind == "cube":
        axis = np.argmax(np.abs(coords), axis=1)
        sign = np.take_along_axis(coords, axis[:, None], axis=1)[:, 0] < 0
        return 2 * axis + sign
    if kind == "cylinder":
        on_cap = np.abs(np.abs(z) - 1.0) < 1e-12
        return np.where(on_cap, np.where(z > 0, 1, 2), 0)
    if kind == "torus":
        return np.where(x >= 0, 0, 1)
    raise ValueError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")


def _sample_surface(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "sphere":
        v = rng.standard_normal((n, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    if kind == "cube":
        face = rng.integers(0, 6, n)
        uv = rng.uniform(-1.0, 1.0, (n, 2))
        pts = np.empty((n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        for a in range(3):
            sel = axis == a
            others = [d for d in range(3) if d != a]
            pts[sel, a] = sign[sel]
            pts[sel, others[0]] = uv[sel, 0]
            pts[sel, others[1]] = uv[sel, 1]
        return pts
    if kind == "cylinder":
        # radius 1, z in [-1, 1]: side area 4*pi, each cap pi
        region = rng.choice(3, size=n, p=[4 / 6, 1 / 6, 1 / 6])
        theta = rng.uniform(0.0, 2 * np.pi, n)
        r = np.where(region == 0, 1.0, np.sqrt(rng.uniform(0.0, 1.0, n)))
        z = np.where(region == 0, rng.uniform(-1.0, 1.0, n), np.where(region == 1, 1.0, -1.0))
        return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    if kind == "torus":
        # area element is proportional to (R + r cos v); rejection-sample v
        vs = []
        while len(vs) < n:
            v = rng.uniform(0.0, 2 * np.pi, 2 * n)
            keep = rng.uniform(0.0, 1.0, 2 * n) < (TORUS_MAJOR + TORUS_MINOR * np.cos(v)) / (TORUS_MAJOR + TORUS_MINOR)
            vs.extend(v[keep].tolist())
        v = np.array(vs[:n])
        u = rng.uniform(0.0, 2 * np.pi, n)
        ring = TORUS_MAJOR + TORUS_MINOR * np.cos(v)
        return np.stack([ring * np.cos(u), ring * np.sin(u), TORUS_MINOR * np.sin(v)], axis=1)
    raise ValueError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")


def generate_shape(kind: str, n_points: int, noise_sigma: float = DEFAULT_NOISE,
                   rng: Optional[np.random.Generator] = None, normalized: bool = True,
                   id: str = "") -> PointCloud:
    """Sample ``n_points`` uniformly on a unit primitive's surface, with part labels.

    Parts: sphere = two hemispheres, cube = six faces, cylinder = side and two
    caps, torus = two halves. Noise is added after labelling; the result is
    normalised unless ``normalized`` is False.
    """
    if kind not in SHAPE_KINDS:
        raise ValueError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")
    if n_points < 16:
        raise ValueError(f"generate_shape: n_points must be >= 16, got {n_points}")
    rng = rng if rng is not None else np.random.default_rng()
    pts = _sample_surface(kind, n_points, rng)
    labels = part_labels_from_coords(kind, pts)
    if noise_sigma > 0:
        pts = pts + rng.normal(0.0, noise_sigma, pts.shape)
    cloud = PointCloud(pts, labels, SHAPE_KINDS.index(kind), id or kind)
    return normalize(cloud) if normalized else cloud


@dataclass
class Dataset:
    clouds: list
    split: list
    class_names: list
    part_names: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.clouds) != len(self.split):
            raise ValueError("Dataset: one split tag per cloud required")

    def subset(self, which: str) -> list:
        return [c for c, s in zip(self.clouds, self.split) if s == which]

    @property
    def train(self) -> list:
        return self.subset("train")

    @property
    def test(self) -> list:
        return self.subset("test")

    def part_offsets(self) -> dict:
        """Global part-id offset of each class; class parts occupy a contiguous id range."""
        offsets, total = {}, 0
        for name in self.class_names:
            offsets[name] = total
            total += len(self.part_names.get(name, ()))
        return offsets

    @property
    def num_parts(self) -> int:
        return sum(len(self.part_names.get(n, ())) for n in self.class_names)

    def category_parts(self) -> dict:
        offsets = self.part_offsets()
        return {n: list(range(offsets[n], offsets[n] + len(self.part_names.get(n, ())))) for n in self.class_names}

    def global_part_labels(self, cloud: PointCloud) -> np.ndarray:
        name = self.class_names[cloud.class_label]
        return cloud.part_labels + self.part_offsets()[name]


def make_dataset(classes: Sequence[str] = SHAPE_KINDS, per_class: int = 32, n_points: int = 256,
                 split: float = 0.75, seed: int = 0, noise_sigma: float = DEFAULT_NOISE) -> Dataset:
    """Stratified synthetic dataset; bitwise reproducible for a fixed seed."""
    if not 0.0 < split < 1.0:
        raise ValueError(f"make_dataset: split fraction must be in (0, 1), got {split}")
    if per_class < 2:
        raise ValueError(f"make_dataset: per-class count must be >= 2, got {per_class}")
    classes = list(classes)
    for kind in classes:
        if kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")
    n_train = min(per_class - 1, max(1, int(round(split * per_class))))
    clouds, tags = [], []
    for ci, kind in enumerate(classes):
        order = np.random.default_rng([seed, ci, 0]).permutation(per_class)
        is_train = np.zeros(per_class, dtype=bool)
        is_train[order[:n_train]] = True
        for i in range(per_class):
            rng = np.random.default_rng([seed, ci, i + 1])
            cloud = generate_shape(kind, n_points, noise_sigma, rng, id=f"{kind}_{i:04d}")
            cloud.class_label = ci
            clouds.append(cloud)
            tags.append("train" if is_train[i] else "test")
    return Dataset(clouds, tags, classes, {k: PART_NAMES[k] for k in classes})


# --- file formats -----------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def save_cloud(cloud: PointCloud, path, format: str = "xyz") -> None:
    """Write ``xyz`` (count line, then ``x y z [part]`` rows) or ``off`` (vertices only)."""
    path = Path(path)
    rows = []
    if format == "xyz":
        rows.append(str(cloud.num_points))
        for i, p in enumerate(cloud.coords):
            row = " ".join(_fmt(v) for v in p)
            if cloud.part_labels is not None:
                row += f" {int(cloud.part_labels[i])}"
            rows.append(row)
    elif format == "off":
        rows.append("OFF")
        rows.append(f"{cloud.num_points} 0 0")
        rows.extend(" ".join(_fmt(v) for v in p) for p in cloud.coords)
    else:
        raise ValueError(f"unknown cloud format {format!r}; expected 'xyz' or 'off'")
    path.write_text("\n".join(rows) + "\n")


def _content_lines(text: str):
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if stripped:
            yield lineno, stripped


def _parse_floats(fields, lineno, path, n=3):
    try:
        return [float(v) for v in fields[:n]]
    except ValueError:
        raise ValueError(f"{path}:{lineno}: malformed coordinate row") from None


def load_cloud(path, format: Optional[str] = None) -> PointCloud:
    path = Path(path)
    if format is None:
        format = "off" if path.suffix.lower() == ".off" else "xyz"
    lines = list(_content_lines(path.read_text()))
    if not lines:
        raise ValueError(f"{path}: empty file")
    if format == "xyz":
        lineno, header = lines[0]
        try:
            n = int(header)
        except ValueError:
            raise ValueError(f"{path}:{lineno}: expected point count, got {header!r}") from None
        body = lines[1:]
        if len(body) != n:
            raise ValueError(f"{path}:{lines[-1][0]}: header declares {n} points, found {len(body)} rows")
        coords, labels = [], []
        for lineno, row in body:
            fields = row.split()
            if len(fields) not in (3, 4):
                raise ValueError(f"{path}:{lineno}: expected 3 or 4 fields, got {len(fields)}")
            coords.append(_parse_floats(fields, lineno, path))
            if len(fields) == 4:
                try:
                    labels.append(int(fields[3]))
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: malformed part label {fields[3]!r}") from None
        if labels and len(labels) != n:
            raise ValueError(f"{path}: part labels present on only some rows")
        return PointCloud(np.array(coords).reshape(n, 3), np.array(labels) if labels else None, id=path.stem)
    if format == "off":
        lineno, magic = lines[0]
        counts_line = lines[1] if len(lines) > 1 else None
        if magic.upper() == "OFF":
            rest = lines[1:]
        elif magic.upper().startswith("OFF"):
            # header and counts on one line, e.g. "OFF 4 0 0"
            counts_line = (lineno, magic[3:].strip())
            rest = [counts_line] + lines[1:]
        else:
            raise ValueError(f"{path}:{lineno}: missing OFF header")
        if not rest:
            raise ValueError(f"{path}: missing OFF counts line")
        lineno, counts = rest[0]
        try:
            n_verts = int(counts.split()[0])
        except (ValueError, IndexError):
            raise ValueError(f"{path}:{lineno}: malformed OFF counts line {counts!r}") from None
        verts = rest[1:1 + n_verts]
        if len(verts) != n_verts:
            raise ValueError(f"{path}: OFF declares {n_verts} vertices, found {len(verts)}")
        coords = []
        for lineno, row in verts:
            fields = row.split()
            if len(fields) < 3:
                raise ValueError(f"{path}:{lineno}: expected 3 vertex coordinates")
            coords.append(_parse_floats(fields, lineno, path))
        return PointCloud(np.array(coords).reshape(n_verts, 3), id=path.stem)
    raise ValueError(f"unknown cloud format {format!r}; expected 'xyz' or 'off'")


MANIFEST_FIELDS = ["id", "class", "split", "path"]


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write one xyz file per cloud plus ``manifest.csv`` (id,class,split,path)."""
    out_dir = Path(out_dir)
    (out_dir / "clouds").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for cloud, tag in zip(dataset.clouds, dataset.split):
            rel = f"clouds/{cloud.id}.xyz"
            save_cloud(cloud, out_dir / rel)
            w.writerow([cloud.id, dataset.class_names[cloud.class_label], tag, rel])
    return manifest


def load_dataset(path) -> Dataset:
    """Read a manifest (file or directory containing ``manifest.csv``)."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.csv"
    root = path.parent
    clouds, tags, class_names = [], [], []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_FIELDS:
            raise ValueError(f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}")
        for lineno, row in enumerate(reader, start=2):
            if row["split"] not in ("train", "test"):
                raise ValueError(f"{path}:{lineno}: split must be train or test, got {row['split']!r}")
            name = row["class"]
            if name not in class_names:
                class_names.append(name)
            cloud = load_cloud(root / row["path"])
            cloud.id = row["id"]
            cloud.class_label = class_names.index(name)
            clouds.append(cloud)
            tags.append(row["split"])
    part_names = {}
    for ci, name in enumerate(class_names):
        if name in PART_NAMES:
            part_names[name] = PART_NAMES[name]
        else:
            labelled = [c.part_labels for c in clouds if c.class_label == ci and c.part_labels is not None]
            count = int(max(l.max() for l in labelled)) + 1 if labelled else 0
            part_names[name] = tuple(f"part{p}" for p in range(count))
    return Dataset(clouds, tags, class_names, part_names)
