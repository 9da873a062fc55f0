"""Volumes, slice sets, missing-slice simulation and a synthetic labelled dataset.

On-disk volume format (RVOL)::

    b"RVOL" | version u16 LE | 3 x u32 LE dims | float32 LE payload, row-major

The manifest is a CSV with header ``subject_id,path,age,split``.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, EmptySetError, FormatError

RVOL_MAGIC = b"RVOL"
RVOL_VERSION = 1
_HEADER = struct.Struct("<4sH3I")

AXES = {"sagittal": 0, "coronal": 1, "axial": 2}
SPLITS = ("train", "val", "test")
MIN_EXTENT = 4

# synthetic generator constants (shared with the label-recovery oracle in the tests)
AGE_RANGE = (45.0, 80.0)
AGE_NORMAL = (62.6, 7.4)
RADIUS_BASE, RADIUS_SLOPE = 0.22, 0.14      # semi-axis as a fraction of each extent
INTERIOR_BASE, INTERIOR_SLOPE = 0.2, 0.4   # interior intensity
SHELL_WIDTH = 0.12                          # in normalized-radius units
EDGE_SOFTNESS = 0.05


@dataclass
class Volume:
    voxels: np.ndarray
    subject_id: str = ""
    age: float = float("nan")
    split: str = "train"

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise DataError(f"volume must be 3-d, got shape {self.voxels.shape}")
        if min(self.voxels.shape) < MIN_EXTENT:
            raise DataError(f"every volume extent must be >= {MIN_EXTENT}, got {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise DataError(f"volume {self.subject_id!r} has non-finite voxels")

    @property
    def dims(self) -> tuple:
        return self.voxels.shape


@dataclass
class SliceSet:
    """Slices of one volume along one axis.

    ``planes[j]`` is the cross-section at position ``indices[j]``; indices are
    strictly increasing. Order is kept only so that imputation and the
    sequence baseline can use it.
    """

    indices: np.ndarray
    planes: np.ndarray
    axis: str
    source_extent: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if len(self.indices) != len(self.planes):
            raise DataError("indices and planes differ in length")
        if len(self.indices) and (np.any(np.diff(self.indices) <= 0) or self.indices[0] < 0
                                  or self.indices[-1] >= self.source_extent):
            raise DataError("slice indices must be strictly increasing within the source extent")

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def plane_shape(self) -> tuple:
        return tuple(self.planes.shape[1:])

    def is_complete(self) -> bool:
        return len(self) == self.source_extent


# -- RVOL I/O ----------------------------------------------------------------------

def save_volume(volume: Volume | np.ndarray, path) -> None:
    voxels = volume.voxels if isinstance(volume, Volume) else np.asarray(volume, dtype=np.float32)
    header = _HEADER.pack(RVOL_MAGIC, RVOL_VERSION, *voxels.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(voxels, dtype="<f4").tobytes())


def read_rvol(path) -> np.ndarray:
    """Raw voxel array from an RVOL file (no normalization)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file too short for an RVOL header")
    magic, version, *dims = _HEADER.unpack_from(raw)
    if magic != RVOL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != RVOL_VERSION:
        raise FormatError(f"{path}: unsupported RVOL version {version}")
    if min(dims) < 1:
        raise FormatError(f"{path}: invalid dims {dims}")
    expected = math.prod(dims) * 4
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, dims {tuple(dims)} need {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def normalize_intensity(voxels: np.ndarray) -> np.ndarray:
    """Per-volume min-max scaling to [0, 1]; a constant volume maps to zeros."""
    lo, hi = float(voxels.min()), float(voxels.max())
    if hi <= lo:
        return np.zeros_like(voxels, dtype=np.float32)
    return ((voxels - lo) / (hi - lo)).astype(np.float32)


def load_volume(path, subject_id: str = "", age: float = float("nan"), split: str = "train",
                normalize: bool = True) -> Volume:
    voxels = read_rvol(path)
    if normalize:
        voxels = normalize_intensity(voxels)
    return Volume(voxels, subject_id=subject_id or Path(path).stem, age=age, split=split)


# -- manifest --------------------------------------------------------------------------

@dataclass
class ManifestRow:
    subject_id: str
    path: str
    age: float
    split: str


@dataclass
class Manifest:
    rows: list[ManifestRow] = field(default_factory=list)
    root: Path = Path(".")

    def __post_init__(self):
        ids = [r.subject_id for r in self.rows]
        if len(set(ids)) != len(ids):
            raise DataError("manifest subject ids are not unique")
        bad = {r.split for r in self.rows} - set(SPLITS)
        if bad:
            raise DataError(f"unknown split(s) in manifest: {sorted(bad)}")

    def split(self, name: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == name]

    def split_sizes(self) -> dict[str, int]:
        return {s: len(self.split(s)) for s in SPLITS}

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subject_id", "path", "age", "split"])
            for r in self.rows:
                w.writerow([r.subject_id, r.path, repr(float(r.age)), r.split])

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["subject_id", "path", "age", "split"]:
                raise FormatError(f"{path}: expected header subject_id,path,age,split")
            rows = [ManifestRow(r["subject_id"], r["path"], float(r["age"]), r["split"]) for r in reader]
        return cls(rows, root=path.parent)

    def load(self, split: str | None = None) -> list[Volume]:
        rows = self.rows if split is None else self.split(split)
        return [load_volume(self.root / r.path, r.subject_id, r.age, r.split) for r in rows]


# -- slicing ------------------------------------------------------------------------------

def _axis_index(axis: str) -> int:
    try:
        return AXES[axis]
    except KeyError:
        raise DataError(f"unknown axis {axis!r}; expected one of {sorted(AXES)}") from None


def slice_volume(volume: Volume | np.ndarray, axis: str = "sagittal") -> SliceSet:
    voxels = volume.voxels if isinstance(volume, Volume) else np.asarray(volume)
    planes = np.moveaxis(voxels, _axis_index(axis), 0)
    return SliceSet(np.arange(planes.shape[0]), np.ascontiguousarray(planes), axis, planes.shape[0])


def stack_slices(s: SliceSet) -> np.ndarray:
    """Reassemble a complete slice set into its volume."""
    if not s.is_complete():
        raise DataError("cannot stack an incomplete slice set; impute first")
    return np.ascontiguousarray(np.moveaxis(s.planes, 0, _axis_index(s.axis)))


def _subset(s: SliceSet, keep: np.ndarray) -> SliceSet:
    return SliceSet(s.indices[keep], s.planes[keep], s.axis, s.source_extent)


def drop_all_but_kth(s: SliceSet, k: int) -> SliceSet:
    """Keep only slices whose original index is a multiple of ``k``."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return _subset(s, np.flatnonzero(s.indices % k == 0))


def keep_count(n: int, keep_fraction: float) -> int:
    return int(math.floor(keep_fraction * n + 0.5))


def drop_random_fraction(s: SliceSet, keep_fraction: float, seed) -> SliceSet:
    """Keep ``round(keep_fraction * len(s))`` slices chosen uniformly without replacement."""
    if not 0 < keep_fraction <= 1:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    n_keep = keep_count(len(s), keep_fraction)
    if n_keep < 1:
        raise ValueError(f"keeping {keep_fraction:.0%} of {len(s)} slices leaves none")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(s), size=n_keep, replace=False))
    return _subset(s, keep)


def impute_nearest(s: SliceSet) -> SliceSet:
    """Fill every missing position with the nearest present slice (lower index on ties)."""
    if len(s) == 0:
        raise EmptySetError("cannot impute from an empty slice set")
    present = s.indices
    targets = np.arange(s.source_extent)
    right = np.clip(np.searchsorted(present, targets), 0, len(present) - 1)
    left = np.clip(right - 1, 0, len(present) - 1)
    use_left = np.abs(targets - present[left]) <= np.abs(present[right] - targets)
    src = np.where(use_left, left, right)
    return SliceSet(targets, s.planes[src], s.axis, s.source_extent)


# -- synthetic data --------------------------------------------------------------------------

def split_sizes(n: int) -> tuple[int, int, int]:
    """Train/val/test counts in 70/9/21 proportion with at least one per split."""
    if n < 3:
        raise ValueError(f"need at least 3 subjects to fill train/val/test, got {n}")
    n_val = max(1, int(math.floor(0.09 * n + 0.5)))
    n_test = max(1, int(math.floor(0.21 * n + 0.5)))
    return n - n_val - n_test, n_val, n_test


def age_fraction(age: float) -> float:
    lo, hi = AGE_RANGE
    return (age - lo) / (hi - lo)


def render_subject(dims, age: float) -> np.ndarray:
    """Noise-free synthetic scan: a soft ellipsoid shell whose size and fill depend on age."""
    t = age_fraction(age)
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    rho2 = np.zeros(dims)
    for g, n in zip(grids, dims):
        semi = (RADIUS_BASE + RADIUS_SLOPE * t) * n
        rho2 += ((g - (n - 1) / 2) / semi) ** 2
    rho = np.sqrt(rho2)
    shell = np.exp(-0.5 * ((rho - 1.0) / SHELL_WIDTH) ** 2)
    interior = (INTERIOR_BASE + INTERIOR_SLOPE * t) / (1.0 + np.exp(-(1.0 - rho) / EDGE_SOFTNESS))
    return shell + interior


def synth_dataset(n: int, dims=(32, 40, 32), seed: int = 0, noise_level: float = 0.1,
                  out_dir=None, age_dist: str = "uniform",
                  sizes: tuple[int, int, int] | None = None) -> tuple[Manifest, list[Volume]]:
    """Generate ``n`` labelled volumes; optionally write them as RVOL files plus ``manifest.csv``.

    Ages are uniform on [45, 80] or, with ``age_dist="normal"``, drawn from
    N(62.6, 7.4) clipped to that range. Returned volumes hold raw (unnormalized)
    voxels, exactly as written to disk.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < MIN_EXTENT:
        raise ValueError(f"dims must be three extents >= {MIN_EXTENT}, got {dims}")
    if sizes is None:
        sizes = split_sizes(n)
    elif sum(sizes) != n or min(sizes) < 1:
        raise ValueError(f"split sizes {sizes} must be positive and sum to n={n}")
    if noise_level < 0:
        raise ValueError("noise_level must be >= 0")

    rng = np.random.default_rng(seed)
    if age_dist == "uniform":
        ages = rng.uniform(*AGE_RANGE, size=n)
    elif age_dist == "normal":
        ages = np.clip(rng.normal(*AGE_NORMAL, size=n), *AGE_RANGE)
    else:
        raise ValueError(f"unknown age_dist {age_dist!r}")
    splits = ["train"] * sizes[0] + ["val"] * sizes[1] + ["test"] * sizes[2]

    width = len(str(n - 1))
    rows, volumes = [], []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for i, (age, split) in enumerate(zip(ages, splits)):
        sid = f"sub{i:0{width}d}"
        voxels = render_subject(dims, float(age))
        if noise_level > 0:
            voxels = voxels + noise_level * np.random.default_rng([seed, i]).standard_normal(dims)
        vol = Volume(voxels.astype(np.float32), sid, float(age), split)
        fname = f"{sid}.rvol"
        if out is not None:
            save_volume(vol, out / fname)
        rows.append(ManifestRow(sid, fname, float(age), split))
        volumes.append(vol)
    manifest = Manifest(rows, root=out or Path("."))
    if out is not None:
        manifest.write(out / "manifest.csv")
    return manifest, volumes


def normalized(volumes: list[Volume]) -> list[Volume]:
    return [replace(v, voxels=normalize_intensity(v.voxels)) for v in volumes]


@dataclass
class Dataset:
    """Normalized volumes grouped by split."""

    train: list[Volume]
    val: list[Volume]
    test: list[Volume]

    @classmethod
    def from_volumes(cls, volumes: list[Volume], normalize: bool = True) -> "Dataset":
        vols = normalized(volumes) if normalize else list(volumes)
        return cls(*([v for v in vols if v.split == s] for s in SPLITS))

    @classmethod
    def from_manifest(cls, path) -> "Dataset":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.csv"
        if not path.exists():
            raise DataError(f"no manifest at {path}")
        manifest = Manifest.read(path)
        return cls(*(manifest.load(s) for s in SPLITS))

    def split(self, name: str) -> list[Volume]:
        return getattr(self, name)

    @property
    def dims(self) -> tuple:
        return self.train[0].dims if self.train else self.val[0].dims
