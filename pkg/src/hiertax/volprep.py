"""CT volume pretreatment: resample, normalize, crop, augment, featurize.

Volumes are stored as flat float32 arrays in x-fastest order together with
their voxel dims and mm spacing.  The pipeline mirrors common practice for
lesion classification: trilinear resampling to isotropic 1 mm, Hounsfield
windowing to [-1, 1], a 48^3 crop centered on the lesion centroid, optional
axis-aligned augmentation, and average-pool featurization that bridges
volumes to the vector backbone.

Conventions:
* resampling treats both grids as cell-centered partitions of the same
  physical extent (voxel i covers [i*s, (i+1)*s), center at (i+0.5)*s);
* centroid coordinates put the origin at the center of voxel (0,0,0), so
  with 1 mm spacing the nearest voxel index is round(position);
* a size-S crop centered on voxel k spans [k - (S-1)//2, k + S - (S-1)//2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .rng import SplitMix64

PAD_VALUE = -1.0  # normalized air
DEFAULT_HU_WINDOW = (-1024.0, 400.0)


class VolumeError(ValueError):
    """Raised for malformed volume files or invalid preprocessing inputs."""


@dataclass(frozen=True)
class Volume:
    dims: tuple[int, int, int]  # (nx, ny, nz)
    spacing: tuple[float, float, float]  # mm per voxel
    voxels: np.ndarray  # flat float32, x-fastest
    normalized: bool = False

    def __post_init__(self):
        nx, ny, nz = self.dims
        if min(self.dims) < 1:
            raise VolumeError(f"bad dims {self.dims}")
        if min(self.spacing) <= 0:
            raise VolumeError(f"bad spacing {self.spacing}")
        if self.voxels.shape != (nx * ny * nz,):
            raise VolumeError(
                f"voxel count {self.voxels.shape} does not match dims {self.dims}"
            )

    def as_zyx(self) -> np.ndarray:
        """View shaped (nz, ny, nx); index [z, y, x]."""
        nx, ny, nz = self.dims
        return self.voxels.reshape(nz, ny, nx)


@dataclass(frozen=True)
class Centroid:
    position: tuple[float, float, float]  # (x, y, z) mm

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.position):
            raise VolumeError(f"non-finite centroid {self.position}")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def resample_trilinear(v: Volume, target_spacing=(1.0, 1.0, 1.0)) -> Volume:
    """Resample onto an isotropic grid covering the same physical extent."""
    if min(target_spacing) <= 0:
        raise VolumeError(f"non-positive target spacing {target_spacing}")
    nx, ny, nz = v.dims
    sx, sy, sz = v.spacing
    tx, ty, tz = (float(t) for t in target_spacing)
    mx = max(1, _round_half_up(nx * sx / tx))
    my = max(1, _round_half_up(ny * sy / ty))
    mz = max(1, _round_half_up(nz * sz / tz))
    dst = np.empty(mx * my * mz, dtype=np.float32)
    _kernels.resample_trilinear(
        np.ascontiguousarray(v.voxels, dtype=np.float32),
        nx, ny, nz, float(sx), float(sy), float(sz), tx, ty, tz, dst, mx, my, mz,
    )
    return Volume((mx, my, mz), (tx, ty, tz), dst, v.normalized)


def normalize_hu(v: Volume, window=DEFAULT_HU_WINDOW) -> Volume:
    """Affine map of HU window to [-1, 1] with clamping outside it."""
    lo, hi = (float(w) for w in window)
    if hi <= lo:
        raise VolumeError(f"bad HU window ({lo}, {hi})")
    vals = v.voxels.astype(np.float64)
    scaled = np.clip(2.0 * (vals - lo) / (hi - lo) - 1.0, -1.0, 1.0)
    return Volume(v.dims, v.spacing, scaled.astype(np.float32), normalized=True)


def crop_centered(v: Volume, c: Centroid, size: int = 48) -> Volume:
    """Cube crop centered on the voxel nearest the centroid, padded with -1.

    Requires an isotropic 1 mm normalized volume (the pad value is
    normalized air).
    """
    if not v.normalized:
        raise VolumeError("crop_centered expects a normalized volume")
    if v.spacing != (1.0, 1.0, 1.0):
        raise VolumeError(f"crop_centered expects 1 mm isotropic spacing, got {v.spacing}")
    if size < 1:
        raise VolumeError(f"bad crop size {size}")
    centers = [_round_half_up(p) for p in c.position]  # (x, y, z)
    half_lo = (size - 1) // 2
    starts = [k - half_lo for k in centers]

    out = np.full((size, size, size), PAD_VALUE, dtype=np.float32)  # (z, y, x)
    src = v.as_zyx()
    nsrc = (v.dims[2], v.dims[1], v.dims[0])  # (nz, ny, nx)
    start_zyx = (starts[2], starts[1], starts[0])
    src_slices = []
    dst_slices = []
    for axis in range(3):
        lo = max(0, start_zyx[axis])
        hi = min(nsrc[axis], start_zyx[axis] + size)
        if lo >= hi:
            return Volume((size, size, size), (1.0, 1.0, 1.0), out.reshape(-1), True)
        src_slices.append(slice(lo, hi))
        dst_slices.append(slice(lo - start_zyx[axis], hi - start_zyx[axis]))
    out[tuple(dst_slices)] = src[tuple(src_slices)]
    return Volume((size, size, size), (1.0, 1.0, 1.0), out.reshape(-1), True)


def augment(v: Volume, seed: int) -> Volume:
    """Random axis-aligned augmentation, deterministic per seed.

    Draw order from SplitMix64(seed): rotation axis (x/y/z), quarter-turn
    count (0-3), three flip coins (x, y, z), three integer translations
    uniform in [-4, 4].  Rotation and flips permute voxels; translation
    shifts content with -1 padding.
    """
    s = SplitMix64(seed)
    axis = s.next_below(3)  # 0=x, 1=y, 2=z
    quarters = s.next_below(4)
    flips = [s.next_below(2) for _ in range(3)]  # x, y, z
    shifts = [s.next_below(9) - 4 for _ in range(3)]  # x, y, z
    return apply_augment(v, axis, quarters, flips, shifts)


def apply_augment(v: Volume, axis: int, quarters: int, flips, shifts) -> Volume:
    """Deterministic augmentation core: rotate, flip, then translate."""
    nx, ny, nz = v.dims
    if not (nx == ny == nz):
        raise VolumeError("augment expects a cubic volume")

    arr = v.as_zyx().copy()  # (z, y, x)
    rot_planes = {0: (0, 1), 1: (0, 2), 2: (1, 2)}  # about x: (z,y); y: (z,x); z: (y,x)
    if quarters:
        arr = np.rot90(arr, k=quarters, axes=rot_planes[axis])
    for ax_xyz, flip in enumerate(flips):
        if flip:
            arr = np.flip(arr, axis=2 - ax_xyz)

    shifted = np.full_like(arr, PAD_VALUE)
    src_sl = []
    dst_sl = []
    for ax_xyz in range(3):
        t = shifts[ax_xyz]
        n = arr.shape[2 - ax_xyz]
        lo_src, hi_src = max(0, -t), min(n, n - t)
        sl_src = slice(lo_src, hi_src)
        sl_dst = slice(lo_src + t, hi_src + t)
        src_sl.append(sl_src)
        dst_sl.append(sl_dst)
    src_sl = tuple(reversed(src_sl))  # to (z, y, x)
    dst_sl = tuple(reversed(dst_sl))
    shifted[dst_sl] = arr[src_sl]
    return Volume(v.dims, v.spacing, np.ascontiguousarray(shifted).reshape(-1), v.normalized)


def featurize_pool(v: Volume, block: int = 8) -> np.ndarray:
    """Average-pool non-overlapping block^3 regions, flattened x-fastest."""
    nx, ny, nz = v.dims
    if block < 1 or nx % block or ny % block or nz % block:
        raise VolumeError(f"dims {v.dims} not divisible by block {block}")
    out = np.empty((nx // block) * (ny // block) * (nz // block), dtype=np.float64)
    _kernels.avg_pool3d(
        np.ascontiguousarray(v.voxels, dtype=np.float32), nx, ny, nz, block, out
    )
    return out


_SPACING_FMT = "%.17g"


def write_volume(v: Volume) -> bytes:
    header = "dims=%d,%d,%d spacing=%s,%s,%s normalized=%d\n" % (
        *v.dims,
        _SPACING_FMT % v.spacing[0],
        _SPACING_FMT % v.spacing[1],
        _SPACING_FMT % v.spacing[2],
        1 if v.normalized else 0,
    )
    blob = np.ascontiguousarray(v.voxels, dtype="<f4").tobytes()
    return header.encode("utf-8") + blob


def read_volume(data: bytes) -> Volume:
    nl = data.find(b"\n")
    if nl < 0:
        raise VolumeError("missing volume header line")
    try:
        header = data[:nl].decode("utf-8")
        fields = dict(part.split("=", 1) for part in header.split())
        dims = tuple(int(x) for x in fields["dims"].split(","))
        spacing = tuple(float(x) for x in fields["spacing"].split(","))
        normalized = fields["normalized"] == "1"
    except (KeyError, ValueError, UnicodeDecodeError) as e:
        raise VolumeError(f"bad volume header: {e}") from None
    if len(dims) != 3 or len(spacing) != 3:
        raise VolumeError("dims and spacing must have 3 components")
    voxels = np.frombuffer(data[nl + 1:], dtype="<f4")
    expected = dims[0] * dims[1] * dims[2]
    if voxels.shape[0] != expected:
        raise VolumeError(
            f"voxel payload has {voxels.shape[0]} values, header says {expected}"
        )
    return Volume(dims, spacing, voxels.astype(np.float32), normalized)


def load_centroids(text: str) -> dict[str, tuple[Centroid, str | None]]:
    """Parse `id,x_mm,y_mm,z_mm[,leaf]` CSV; returns id -> (centroid, leaf?)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise VolumeError("empty centroid file")
    header = lines[0].split(",")
    if header[:4] != ["id", "x_mm", "y_mm", "z_mm"]:
        raise VolumeError("bad centroid header: expected id,x_mm,y_mm,z_mm[,leaf]")
    has_leaf = len(header) == 5 and header[4] == "leaf"
    out: dict[str, tuple[Centroid, str | None]] = {}
    for rowno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != len(header):
            raise VolumeError(f"row {rowno}: expected {len(header)} fields")
        cid = parts[0]
        if cid in out:
            raise VolumeError(f"row {rowno}: duplicate id {cid!r}")
        pos = tuple(float(x) for x in parts[1:4])
        out[cid] = (Centroid(pos), parts[4] if has_leaf else None)
    return out
