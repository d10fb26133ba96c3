"""Point cloud file I/O, normalization, subsampling and synthetic shape families.

A point cloud is a plain ``(N, 3)`` float array. Two on-disk formats are
supported:

* ``xyz`` text: one point per line, three whitespace-separated floats,
  lines starting with ``#`` are skipped.
* ``pcsq`` binary: the 5 magic bytes ``PCSQ1``, a little-endian uint32 point
  count, then ``count * 3`` little-endian float32 values in x, y, z order.

Depth images reuse the binary container with magic ``PCSQ2`` followed by
uint32 height and width and ``height * width`` float32 values, or can be
read from plain-text PGM (``P2``) files.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError, WriteError

logger = logging.getLogger(__name__)

MAGIC = b"PCSQ1"
DEPTH_MAGIC = b"PCSQ2"
FORMATS = ("xyz", "pcsq")
FAMILIES = ("ellipsoid", "box", "two-lobe")


def _infer_format(path, fmt):
    if fmt is not None:
        if fmt not in FORMATS:
            raise ValueError(f"unknown point cloud format {fmt!r}")
        return fmt
    suffix = Path(path).suffix.lower()
    if suffix in (".pcsq", ".bin"):
        return "pcsq"
    return "xyz"


def load_pointcloud(path, fmt=None) -> np.ndarray:
    """Read a point cloud, returning points in file order.

    ``fmt`` is ``"xyz"`` or ``"pcsq"``; when omitted it is guessed from the
    suffix (``.pcsq``/``.bin`` are binary, everything else text).
    """
    fmt = _infer_format(path, fmt)
    if fmt == "pcsq":
        return _load_pcsq(Path(path).read_bytes())
    return _load_xyz(Path(path).read_text())


def _load_xyz(text):
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        fields = stripped.split()
        if len(fields) != 3:
            raise FormatError(
                f"line {lineno}: expected 3 fields, got {len(fields)}", offset=lineno
            )
        try:
            rows.append([float(f) for f in fields])
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}", offset=lineno) from None
    if not rows:
        raise FormatError("no points in file", offset=0)
    pts = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        bad = int(np.argwhere(~np.isfinite(pts))[0, 0])
        raise FormatError(f"non-finite coordinate in point {bad}", offset=bad)
    return pts


def _load_pcsq(data):
    if len(data) < 9:
        raise FormatError(f"truncated header at byte {len(data)}", offset=len(data))
    if data[:5] != MAGIC:
        raise FormatError("bad magic at byte 0", offset=0)
    (count,) = struct.unpack_from("<I", data, 5)
    need = 9 + 12 * count
    if len(data) < need:
        raise FormatError(
            f"truncated payload: expected {need} bytes, file ends at byte {len(data)}",
            offset=len(data),
        )
    if len(data) > need:
        raise FormatError(f"trailing data at byte {need}", offset=need)
    if count == 0:
        raise FormatError("point count is zero at byte 5", offset=5)
    pts = np.frombuffer(data, dtype="<f4", count=3 * count, offset=9).reshape(count, 3)
    if not np.all(np.isfinite(pts)):
        bad = int(np.argwhere(~np.isfinite(pts))[0, 0])
        raise FormatError(f"non-finite coordinate at byte {9 + 12 * bad}", offset=9 + 12 * bad)
    return pts.astype(np.float32)


def save_pointcloud(pc, path, fmt=None) -> None:
    """Write ``pc`` to ``path``.

    The binary format stores float32, so float32 input round-trips exactly.
    Text output keeps 6 significant digits.
    """
    pts = np.asarray(pc)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise DomainError(f"expected a non-empty (N, 3) array, got shape {pts.shape}")
    fmt = _infer_format(path, fmt)
    if fmt == "pcsq":
        payload = MAGIC + struct.pack("<I", len(pts)) + pts.astype("<f4").tobytes()
        _write(path, payload)
    else:
        lines = "".join(f"{x:.6g} {y:.6g} {z:.6g}\n" for x, y, z in pts.tolist())
        _write(path, lines.encode())


def _write(path, payload):
    try:
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise WriteError(f"cannot write {path}: {exc}") from exc


def normalize_unit_sphere(pc) -> np.ndarray:
    """Center on the centroid and scale so the farthest point has norm 1."""
    pts = np.asarray(pc, dtype=np.float64)
    if len(pts) < 1:
        raise DomainError("empty point cloud")
    centered = pts - pts.mean(axis=0)
    scale = np.linalg.norm(centered, axis=1).max()
    if scale <= 1e-12:
        raise DomainError("all points identical; scale is undefined")
    return centered / scale


def subsample(pc, n, seed=0) -> np.ndarray:
    """Draw ``n`` points uniformly, without replacement when possible."""
    if n < 1:
        raise DomainError("n must be >= 1")
    pts = np.asarray(pc)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pts), size=n, replace=n > len(pts))
    return pts[idx]


# ---------------------------------------------------------------------------
# synthetic shapes


def sample_ellipsoid(axes, n, rng) -> np.ndarray:
    """Surface samples of an axis-aligned ellipsoid centered at the origin.

    Directions are uniform on the unit sphere and then stretched, so for
    ``axes=(1, 1, 1)`` every point has unit norm.
    """
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * np.asarray(axes, dtype=np.float64)


def sample_box(half_extents, n, rng) -> np.ndarray:
    a, b, c = half_extents
    areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    ext = np.array([a, b, c])
    for ax in range(3):
        m = axis == ax
        others = [i for i in range(3) if i != ax]
        pts[m, ax] = sign[m] * ext[ax]
        pts[m, others[0]] = uv[m, 0] * ext[others[0]]
        pts[m, others[1]] = uv[m, 1] * ext[others[1]]
    return pts


def sample_two_lobe(r1, r2, gap, n, rng) -> np.ndarray:
    """Union surface of two spheres on the x axis, interior parts removed."""
    c1 = np.array([-(r1 + gap / 2), 0.0, 0.0]) * 0.7
    c2 = np.array([r2 + gap / 2, 0.0, 0.0]) * 0.7
    out = []
    have = 0
    while have < n:
        m = 2 * n
        pick = rng.uniform(size=m) < r1**2 / (r1**2 + r2**2)
        d = rng.normal(size=(m, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        pts = np.where(pick[:, None], c1 + r1 * d, c2 + r2 * d)
        inside1 = np.linalg.norm(pts - c1, axis=1) < r1 - 1e-9
        inside2 = np.linalg.norm(pts - c2, axis=1) < r2 - 1e-9
        keep = pts[~((pick & inside2) | (~pick & inside1))]
        out.append(keep)
        have += len(keep)
    return np.concatenate(out)[:n]


def sample_family(family, n, rng) -> np.ndarray:
    if family == "ellipsoid":
        axes = rng.uniform([0.5, 0.3, 0.2], [1.0, 0.8, 0.6])
        return sample_ellipsoid(axes, n, rng)
    if family == "box":
        return sample_box(rng.uniform([0.4, 0.2, 0.1], [1.0, 0.6, 0.5]), n, rng)
    if family == "two-lobe":
        return sample_two_lobe(rng.uniform(0.3, 0.6), rng.uniform(0.3, 0.6),
                               rng.uniform(-0.2, 0.3), n, rng)
    raise ValueError(f"unknown shape family {family!r}; choose from {FAMILIES}")


@dataclass
class ShapeDataset:
    samples: list = field(default_factory=list)
    split: str = "train"
    seed: int = 0

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def stacked(self) -> np.ndarray:
        """All samples as one ``(B, N, 3)`` float32 array."""
        sizes = {len(s) for s in self.samples}
        if len(sizes) != 1:
            raise DomainError(f"samples have differing point counts {sorted(sizes)}")
        return np.stack(self.samples).astype(np.float32)

    def save(self, directory, fmt="pcsq"):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        ext = "pcsq" if fmt == "pcsq" else "xyz"
        for i, s in enumerate(self.samples):
            save_pointcloud(s, directory / f"{i:04d}.{ext}", fmt)

    @classmethod
    def load(cls, directory, split=None):
        directory = Path(directory)
        files = sorted(p for p in directory.iterdir() if p.suffix in (".pcsq", ".xyz"))
        samples = [load_pointcloud(p) for p in files]
        return cls(samples=samples, split=split or directory.name, seed=-1)


def synth_dataset(family, count, points_per_shape, seed=0, split="train") -> ShapeDataset:
    """``count`` randomly parameterized shapes, each normalized to the unit sphere."""
    if count < 1:
        raise DomainError("count must be >= 1")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(count):
        pts = sample_family(family, points_per_shape, rng)
        samples.append(normalize_unit_sphere(pts).astype(np.float32))
    return ShapeDataset(samples=samples, split=split, seed=seed)


# ---------------------------------------------------------------------------
# depth images and label export


def render_depth(pc, res=32, camera_z=2.0) -> np.ndarray:
    """Orthographic depth map looking down -z; empty pixels are 0."""
    pts = np.asarray(pc, dtype=np.float64)
    ij = np.clip(((pts[:, :2] + 1.0) * 0.5 * res).astype(int), 0, res - 1)
    depth = np.full((res, res), np.inf)
    np.minimum.at(depth, (ij[:, 1], ij[:, 0]), camera_z - pts[:, 2])
    depth[np.isinf(depth)] = 0.0
    return depth.astype(np.float32)


def save_depth(depth, path) -> None:
    d = np.asarray(depth, dtype="<f4")
    if d.ndim != 2:
        raise DomainError("depth image must be 2D")
    h, w = d.shape
    _write(path, DEPTH_MAGIC + struct.pack("<II", h, w) + d.tobytes())


def load_depth(path) -> np.ndarray:
    """Read a depth image from a ``PCSQ2`` container or a ``P2`` PGM file."""
    data = Path(path).read_bytes()
    if data[:5] == DEPTH_MAGIC:
        if len(data) < 13:
            raise FormatError("truncated depth header", offset=len(data))
        h, w = struct.unpack_from("<II", data, 5)
        need = 13 + 4 * h * w
        if len(data) != need:
            raise FormatError(f"depth payload size mismatch at byte {len(data)}", offset=len(data))
        return np.frombuffer(data, dtype="<f4", offset=13).reshape(h, w).astype(np.float32)
    return _load_pgm(data.decode())


def _load_pgm(text):
    tokens = []
    for line in text.splitlines():
        tokens.extend(line.split("#", 1)[0].split())
    if not tokens or tokens[0] != "P2":
        raise FormatError("not a P2 PGM file", offset=0)
    try:
        w, h, maxval = (int(t) for t in tokens[1:4])
        vals = np.array([float(t) for t in tokens[4:]])
    except ValueError as exc:
        raise FormatError(f"bad PGM token: {exc}", offset=0) from None
    if vals.size != w * h:
        raise FormatError(f"expected {w * h} pixels, got {vals.size}", offset=vals.size)
    return (vals.reshape(h, w) / maxval).astype(np.float32)


def save_labeled_xyz(pc, labels, path) -> None:
    """Export points with an integer fourth column (e.g. group ids)."""
    lines = "".join(
        f"{x:.6g} {y:.6g} {z:.6g} {int(g)}\n"
        for (x, y, z), g in zip(np.asarray(pc).tolist(), np.asarray(labels).tolist())
    )
    _write(path, lines.encode())
