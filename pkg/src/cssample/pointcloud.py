"""Point clouds: value type, text I/O, normalisation, augmentation, synthetic shapes."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "PointCloud",
    "CloudFormatError",
    "DatasetSpec",
    "CLASS_NAMES",
    "read_cloud",
    "write_cloud",
    "normalize_unit_sphere",
    "augment",
    "generate_dataset",
    "sample_shape",
    "train_test_split",
]

CLASS_NAMES = ("sphere", "cube", "cylinder", "torus", "cone", "pyramid", "ellipsoid", "helix")


class CloudFormatError(ValueError):
    """A point-cloud file does not follow its grammar."""


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    label: Optional[int] = None
    source_path: Optional[str] = None

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be an (n, 3) array, got shape {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        if not np.issubdtype(pts.dtype, np.floating):
            pts = pts.astype(np.float64)
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def with_points(self, points) -> "PointCloud":
        return PointCloud(points, self.label, self.source_path)


# ---------------------------------------------------------------------------
# text formats


def _format_from_path(path) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    return {".xyz": "xyz", ".txt": "xyz", ".off": "off", ".ply": "ply_ascii"}.get(ext, "xyz")


def _parse_floats(tokens, lineno, expect=3):
    if len(tokens) < expect:
        raise CloudFormatError(f"line {lineno}: expected {expect} numbers, got {len(tokens)}")
    try:
        vals = [float(t) for t in tokens[:expect]]
    except ValueError as exc:
        raise CloudFormatError(f"line {lineno}: non-numeric token in {' '.join(tokens)!r}") from exc
    return vals


def _read_xyz(lines):
    pts = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) != 3:
            raise CloudFormatError(f"line {lineno}: expected 3 numbers, got {len(tokens)}")
        pts.append(_parse_floats(tokens, lineno))
    return pts


def _content_lines(lines):
    """(lineno, tokens) for non-blank, non-comment lines."""
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if line and not line.startswith("#"):
            yield lineno, line.split()


def _read_off(lines):
    it = _content_lines(lines)
    try:
        lineno, tokens = next(it)
    except StopIteration:
        raise CloudFormatError("line 1: empty OFF file") from None
    # some exporters glue the counts onto the header: "OFF8 6 0"
    head = tokens[0]
    if not head.startswith("OFF"):
        raise CloudFormatError(f"line {lineno}: missing OFF header")
    rest = ([head[3:]] if len(head) > 3 else []) + tokens[1:]
    if not rest:
        try:
            lineno, rest = next(it)
        except StopIteration:
            raise CloudFormatError(f"line {lineno}: missing counts line") from None
    try:
        nv = int(rest[0])
    except (ValueError, IndexError):
        raise CloudFormatError(f"line {lineno}: bad counts line") from None
    pts = []
    last = lineno
    for _ in range(nv):
        try:
            last, tokens = next(it)
        except StopIteration:
            raise CloudFormatError(
                f"line {last}: OFF declares {nv} vertices but only {len(pts)} present"
            ) from None
        pts.append(_parse_floats(tokens, last))
    return pts


def _read_ply(lines):
    it = iter(enumerate(lines, 1))
    lineno, first = next(it, (1, ""))
    if first.strip() != "ply":
        raise CloudFormatError(f"line {lineno}: missing 'ply' magic")
    nv = None
    props = []
    in_vertex = False
    for lineno, raw in it:
        tokens = raw.split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise CloudFormatError(f"line {lineno}: only ascii PLY is supported")
        elif tokens[0] == "element":
            in_vertex = len(tokens) >= 3 and tokens[1] == "vertex"
            if in_vertex:
                nv = int(tokens[2])
        elif tokens[0] == "property" and in_vertex:
            props.append(tokens[-1])
        elif tokens[0] == "end_header":
            break
    else:
        raise CloudFormatError(f"line {lineno}: missing end_header")
    if nv is None:
        raise CloudFormatError("PLY has no vertex element")
    try:
        cols = [props.index(a) for a in ("x", "y", "z")]
    except ValueError:
        raise CloudFormatError("PLY vertex element lacks x, y, z properties") from None
    pts = []
    for lineno, raw in it:
        if len(pts) == nv:
            break
        tokens = raw.split()
        if not tokens:
            continue
        if len(tokens) < len(props):
            raise CloudFormatError(f"line {lineno}: expected {len(props)} values, got {len(tokens)}")
        vals = _parse_floats(tokens, lineno, expect=len(props))
        pts.append([vals[c] for c in cols])
    if len(pts) != nv:
        raise CloudFormatError(f"line {lineno}: PLY declares {nv} vertices but only {len(pts)} present")
    return pts


_READERS = {"xyz": _read_xyz, "off": _read_off, "ply_ascii": _read_ply}


def read_cloud(path, format: Optional[str] = None, label: Optional[int] = None) -> PointCloud:
    """Read a cloud, keeping points in file order."""
    fmt = format or _format_from_path(path)
    if fmt not in _READERS:
        raise CloudFormatError(f"unknown point-cloud format {fmt!r}")
    with open(path) as fh:
        lines = fh.read().splitlines()
    pts = _READERS[fmt](lines)
    if not pts:
        raise CloudFormatError(f"{path}: no points")
    return PointCloud(np.asarray(pts, dtype=np.float64), label, str(path))


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def write_cloud(cloud: PointCloud, path, format: Optional[str] = None) -> None:
    """Write ``cloud`` as xyz or ascii PLY with 9 significant digits."""
    fmt = format or _format_from_path(path)
    rows = "".join(f"{_fmt(x)} {_fmt(y)} {_fmt(z)}\n" for x, y, z in cloud.points.tolist())
    if fmt == "xyz":
        text = rows
    elif fmt == "ply_ascii":
        header = (
            "ply\nformat ascii 1.0\n"
            f"element vertex {cloud.n}\n"
            "property float x\nproperty float y\nproperty float z\n"
            "end_header\n"
        )
        text = header + rows
    else:
        raise CloudFormatError(f"cannot write format {fmt!r}")
    with open(path, "w") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# geometry


def normalize_unit_sphere(cloud: PointCloud) -> PointCloud:
    pts = np.asarray(cloud.points, dtype=np.float64)
    centred = pts - pts.mean(axis=0)
    radius = np.sqrt((centred**2).sum(axis=1)).max()
    if radius <= 1e-12:
        radius = 1.0
    return cloud.with_points(centred / radius)


def _rotation(rng: np.random.Generator, full: bool) -> np.ndarray:
    if not full:
        t = rng.uniform(0.0, 2 * np.pi)
        c, s = np.cos(t), np.sin(t)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    # uniform SO(3) from a random unit quaternion
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def augment(
    cloud: PointCloud,
    rng: np.random.Generator,
    rotation: bool = True,
    scale_range: Sequence[float] = (0.8, 1.25),
    full_rotation: bool = False,
) -> PointCloud:
    """Random rotation about z (or SO(3) if ``full_rotation``) and uniform scaling."""
    lo, hi = scale_range
    if not 0 < lo <= hi:
        raise ValueError(f"invalid scale range [{lo}, {hi}]")
    pts = cloud.points
    if rotation:
        pts = pts @ _rotation(rng, full_rotation).T
    scale = rng.uniform(lo, hi) if hi > lo else lo
    if scale != 1.0:
        pts = pts * scale
    return cloud.with_points(pts)


# ---------------------------------------------------------------------------
# synthetic shapes


def _unit_sphere(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cube(rng, n, _):
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1, 1, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        sel = axis == a
        others = [b for b in range(3) if b != a]
        pts[sel, a] = sign[sel]
        pts[sel, others[0]] = uv[sel, 0]
        pts[sel, others[1]] = uv[sel, 1]
    return pts


def _cylinder(rng, n, prm):
    r = 1.0
    h = prm.uniform(1.2, 2.0)
    side, cap = 2 * np.pi * r * h, np.pi * r * r
    pick = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    t = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    s = pick == 0
    pts[s] = np.stack([np.cos(t[s]), np.sin(t[s]), rng.uniform(-h / 2, h / 2, s.sum())], axis=1)
    for which, z in ((1, h / 2), (2, -h / 2)):
        c = pick == which
        rad = r * np.sqrt(rng.uniform(0, 1, c.sum()))
        pts[c] = np.stack([rad * np.cos(t[c]), rad * np.sin(t[c]), np.full(c.sum(), z)], axis=1)
    return pts


def _torus(rng, n, prm):
    big, small = 1.0, prm.uniform(0.25, 0.4)
    u = rng.uniform(0, 2 * np.pi, size=n)
    # area element is proportional to (R + r cos v); rejection keeps v area-correct
    v = np.empty(n)
    filled = 0
    while filled < n:
        cand = rng.uniform(0, 2 * np.pi, size=2 * (n - filled))
        keep = rng.uniform(0, big + small, size=cand.size) < big + small * np.cos(cand)
        cand = cand[keep][: n - filled]
        v[filled : filled + cand.size] = cand
        filled += cand.size
    ring = big + small * np.cos(v)
    return np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], axis=1)


def _cone(rng, n, prm):
    r, h = 1.0, prm.uniform(1.2, 2.0)
    slant = np.sqrt(r * r + h * h)
    side, base = np.pi * r * slant, np.pi * r * r
    on_side = rng.uniform(0, side + base, size=n) < side
    t = rng.uniform(0, 2 * np.pi, size=n)
    frac = np.sqrt(rng.uniform(0, 1, size=n))
    rad = r * frac
    z = np.where(on_side, h * (1 - frac), 0.0)
    return np.stack([rad * np.cos(t), rad * np.sin(t), z - h / 3], axis=1)


def _pyramid(rng, n, prm):
    h = prm.uniform(1.2, 2.0)
    base = np.array([[1, 1, 0], [-1, 1, 0], [-1, -1, 0], [1, -1, 0]], dtype=float)
    apex = np.array([0.0, 0.0, h])
    tris = [(base[i], base[(i + 1) % 4], apex) for i in range(4)]
    tris += [(base[0], base[1], base[2]), (base[0], base[2], base[3])]
    tris = np.array(tris)
    areas = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
    which = rng.choice(len(tris), size=n, p=areas / areas.sum())
    a, b = rng.uniform(size=(2, n))
    flip = a + b > 1
    a[flip], b[flip] = 1 - a[flip], 1 - b[flip]
    t = tris[which]
    pts = t[:, 0] + a[:, None] * (t[:, 1] - t[:, 0]) + b[:, None] * (t[:, 2] - t[:, 0])
    return pts - np.array([0, 0, h / 4])


def _ellipsoid(rng, n, prm):
    axes = np.array([1.0, prm.uniform(0.45, 0.7), prm.uniform(0.25, 0.45)])
    # rejection on the area distortion of the radial map from the sphere
    out = np.empty((0, 3))
    while out.shape[0] < n:
        u = _unit_sphere(rng, 2 * n)
        x = u * axes
        w = np.sqrt(((u / axes) ** 2).sum(axis=1)) * axes.prod()
        keep = rng.uniform(0, w.max(), size=w.size) < w
        out = np.concatenate([out, x[keep]])
    return out[:n]


def _helix(rng, n, prm):
    turns = prm.uniform(2.0, 3.0)
    tube = 0.12
    t = rng.uniform(0, 2 * np.pi * turns, size=n)
    pitch = 0.35
    centre = np.stack([np.cos(t), np.sin(t), pitch * t / (2 * np.pi)], axis=1)
    tangent = np.stack([-np.sin(t), np.cos(t), np.full(n, pitch / (2 * np.pi))], axis=1)
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    normal = np.stack([-np.cos(t), -np.sin(t), np.zeros(n)], axis=1)
    binormal = np.cross(tangent, normal)
    phi = rng.uniform(0, 2 * np.pi, size=n)
    return centre + tube * (np.cos(phi)[:, None] * normal + np.sin(phi)[:, None] * binormal)


_SHAPES = {
    "sphere": lambda rng, n, prm: _unit_sphere(rng, n),
    "cube": _cube,
    "cylinder": _cylinder,
    "torus": _torus,
    "cone": _cone,
    "pyramid": _pyramid,
    "ellipsoid": _ellipsoid,
    "helix": _helix,
}


def sample_shape(name: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """Sample ``n`` points uniformly from the surface of a named shape.

    Per-instance shape parameters (heights, radii ratios) are also drawn from
    ``rng``. No noise, no normalisation.
    """
    if name not in _SHAPES:
        raise ValueError(f"unknown shape class {name!r}; known: {', '.join(_SHAPES)}")
    return _SHAPES[name](rng, n, rng)


@dataclass(frozen=True)
class DatasetSpec:
    class_names: tuple[str, ...] = CLASS_NAMES
    per_class: int = 150
    points_per_cloud: int = 256
    seed: int = 0
    noise_sigma: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.per_class < 1:
            raise ValueError("per_class must be >= 1")
        if self.points_per_cloud < 8:
            raise ValueError("points_per_cloud must be >= 8")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        for name in self.class_names:
            if name not in _SHAPES:
                raise ValueError(f"unknown shape class {name!r}")


def generate_dataset(spec: DatasetSpec) -> list[PointCloud]:
    """Labelled clouds ordered class by class; a pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    clouds = []
    for label, name in enumerate(spec.class_names):
        for _ in range(spec.per_class):
            pts = sample_shape(name, spec.points_per_cloud, rng)
            if spec.noise_sigma > 0:
                pts = pts + rng.normal(scale=spec.noise_sigma, size=pts.shape)
            clouds.append(normalize_unit_sphere(PointCloud(pts, label)))
    return clouds


def train_test_split(clouds: Sequence[PointCloud], test_fraction: float = 0.2, seed: int = 0):
    """Seeded per-class shuffle; returns disjoint (train, test) lists."""
    rng = np.random.default_rng(seed)
    by_label: dict = {}
    for i, c in enumerate(clouds):
        by_label.setdefault(c.label, []).append(i)
    train, test = [], []
    for label in sorted(by_label, key=lambda v: (v is None, v)):
        idx = np.array(by_label[label])
        rng.shuffle(idx)
        n_test = int(round(len(idx) * test_fraction))
        test.extend(idx[:n_test].tolist())
        train.extend(idx[n_test:].tolist())
    return [clouds[i] for i in sorted(train)], [clouds[i] for i in sorted(test)]
