"""Dense slice/stack/volume containers with raw float32 + JSON sidecar I/O.

File layout (version 1):
    <name>.f32   raw little-endian 32-bit floats, x fastest, then y,
                 then z (slice index for stacks)
    <name>.json  sidecar with dims/spacing/origin/dtype/role; stacks add
                 z_positions, acq_times and slice_thickness

Arrays are kept in C order with shape (nz, ny, nx) for volumes and
(ny, nx) for slices, so ``tofile`` produces the x-fastest layout directly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

SIDECAR_DTYPE = "f32le"


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{what} contains NaN/Inf values")


@dataclass(frozen=True)
class Slice2D:
    """Single 2D slice: intensities plus in-plane spacing in mm."""

    data: np.ndarray  # (ny, nx), float
    dx: float
    dy: float

    def __post_init__(self):
        if self.data.ndim != 2:
            raise DataError(f"slice data must be 2D, got shape {self.data.shape}")
        _check_finite(self.data, "slice")
        if self.dx <= 0 or self.dy <= 0:
            raise DataError("in-plane spacing must be positive")

    @property
    def nx(self) -> int:
        return self.data.shape[1]

    @property
    def ny(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class SliceStack:
    """Ordered sequence of equally shaped 2D slices acquired along one axis.

    ``data`` holds all slices stacked as (T, ny, nx).  ``z_positions`` are the
    through-plane slice centres in mm (monotonic, the sweep moves one way),
    ``acq_times`` the acquisition timestamps in seconds (strictly increasing).
    ``slice_thickness`` is the through-plane PSF FWHM in mm.
    """

    data: np.ndarray  # (T, ny, nx)
    dx: float
    dy: float
    z_positions: np.ndarray  # (T,)
    acq_times: np.ndarray  # (T,)
    slice_thickness: float

    def __post_init__(self):
        if self.data.ndim != 3:
            raise DataError(f"stack data must be 3D, got shape {self.data.shape}")
        _check_finite(self.data, "stack")
        T = self.data.shape[0]
        if len(self.z_positions) != T or len(self.acq_times) != T:
            raise DataError("z_positions/acq_times length must equal slice count")
        if self.dx <= 0 or self.dy <= 0 or self.slice_thickness <= 0:
            raise DataError("spacings and slice thickness must be positive")
        dt = np.diff(self.acq_times)
        if T > 1 and not np.all(dt > 0):
            raise DataError("acq_times must be strictly increasing")
        dz = np.diff(self.z_positions)
        if T > 1 and not (np.all(dz >= 0) or np.all(dz <= 0)):
            raise DataError("z_positions must be monotonic")

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def nx(self) -> int:
        return self.data.shape[2]

    @property
    def ny(self) -> int:
        return self.data.shape[1]

    def slice(self, t: int) -> Slice2D:
        return Slice2D(self.data[t], self.dx, self.dy)

    def subset(self, indices) -> "SliceStack":
        """Ordered sub-stack keeping per-slice positions and times."""
        idx = np.asarray(indices, dtype=int)
        if idx.size == 0:
            raise DataError("empty slice selection")
        return SliceStack(
            data=self.data[idx],
            dx=self.dx,
            dy=self.dy,
            z_positions=self.z_positions[idx],
            acq_times=self.acq_times[idx],
            slice_thickness=self.slice_thickness,
        )


@dataclass(frozen=True)
class Volume3D:
    """Axis-aligned 3D voxel grid.

    ``data`` has shape (nz, ny, nx); ``spacing`` is (dx, dy, dz) in mm and
    ``origin`` the centre of voxel (0, 0, 0) in mm.
    """

    data: np.ndarray
    spacing: tuple
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise DataError(f"volume data must be 3D, got shape {self.data.shape}")
        _check_finite(self.data, "volume")
        if any(s <= 0 for s in self.spacing):
            raise DataError("spacing components must be positive")

    @property
    def nx(self) -> int:
        return self.data.shape[2]

    @property
    def ny(self) -> int:
        return self.data.shape[1]

    @property
    def nz(self) -> int:
        return self.data.shape[0]

    @property
    def z_coords(self) -> np.ndarray:
        """Centre z coordinate of every plane, in mm."""
        return self.origin[2] + np.arange(self.nz) * self.spacing[2]

    def is_isotropic(self, tol=1e-9) -> bool:
        dx, dy, dz = self.spacing
        return abs(dx - dy) <= tol and abs(dx - dz) <= tol


# ---------------------------------------------------------------------------
# file I/O


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix == ".f32":
        base = p.with_suffix("")
    elif p.suffix == ".json":
        base = p.with_suffix("")
    else:
        base = p
    return base.with_suffix(".f32"), base.with_suffix(".json")


def _read_payload(payload_path: Path, header: dict) -> np.ndarray:
    dims = header.get("dims")
    if not isinstance(dims, list) or len(dims) != 3:
        raise DataError(f"{payload_path}: header dims must be a 3-list")
    if header.get("dtype") != SIDECAR_DTYPE:
        raise DataError(f"{payload_path}: unsupported dtype {header.get('dtype')!r}")
    raw = np.fromfile(payload_path, dtype="<f4")
    n_expected = int(np.prod(dims))
    if raw.size != n_expected:
        raise DataError(
            f"{payload_path}: payload length mismatch "
            f"(header implies {n_expected} elements, file has {raw.size})"
        )
    nx, ny, nz = dims
    return raw.reshape(nz, ny, nx)


def _load_header(json_path: Path) -> dict:
    if not json_path.exists():
        raise DataError(f"missing sidecar header {json_path}")
    try:
        with open(json_path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt sidecar header {json_path}: {exc}") from exc


def read_stack(path) -> SliceStack:
    """Read a slice stack written by :func:`write_stack`."""
    payload_path, json_path = _paths(path)
    header = _load_header(json_path)
    if header.get("role") != "stack":
        raise DataError(f"{json_path}: role {header.get('role')!r}, expected 'stack'")
    if not payload_path.exists():
        raise DataError(f"missing payload {payload_path}")
    data = _read_payload(payload_path, header)
    spacing = header.get("spacing", [1.0, 1.0, 1.0])
    return SliceStack(
        data=data,
        dx=float(spacing[0]),
        dy=float(spacing[1]),
        z_positions=np.asarray(header["z_positions"], dtype=float),
        acq_times=np.asarray(header["acq_times"], dtype=float),
        slice_thickness=float(header["slice_thickness"]),
    )


def write_stack(stack: SliceStack, path) -> None:
    payload_path, json_path = _paths(path)
    payload_path.parent.mkdir(parents=True, exist_ok=True)
    stack.data.astype("<f4").tofile(payload_path)
    header = {
        "dims": [stack.nx, stack.ny, stack.T],
        "spacing": [stack.dx, stack.dy, 0.0],
        "origin": [0.0, 0.0, float(stack.z_positions[0])],
        "dtype": SIDECAR_DTYPE,
        "role": "stack",
        "z_positions": [float(z) for z in stack.z_positions],
        "acq_times": [float(t) for t in stack.acq_times],
        "slice_thickness": float(stack.slice_thickness),
    }
    with open(json_path, "w") as fh:
        json.dump(header, fh, indent=1)


def read_volume(path) -> Volume3D:
    payload_path, json_path = _paths(path)
    header = _load_header(json_path)
    if header.get("role") not in ("volume", None):
        raise DataError(f"{json_path}: role {header.get('role')!r}, expected 'volume'")
    if not payload_path.exists():
        raise DataError(f"missing payload {payload_path}")
    data = _read_payload(payload_path, header)
    return Volume3D(
        data=data,
        spacing=tuple(float(s) for s in header.get("spacing", [1, 1, 1])),
        origin=tuple(float(o) for o in header.get("origin", [0, 0, 0])),
    )


def write_volume(vol: Volume3D, path) -> None:
    payload_path, json_path = _paths(path)
    payload_path.parent.mkdir(parents=True, exist_ok=True)
    vol.data.astype("<f4").tofile(payload_path)
    header = {
        "dims": [vol.nx, vol.ny, vol.nz],
        "spacing": [float(s) for s in vol.spacing],
        "origin": [float(o) for o in vol.origin],
        "dtype": SIDECAR_DTYPE,
        "role": "volume",
    }
    with open(json_path, "w") as fh:
        json.dump(header, fh, indent=1)


# ---------------------------------------------------------------------------
# scatter initialization


def scatter_initialize(selected: SliceStack, grid: Volume3D, psf) -> Volume3D:
    """PSF-weight-normalized splat of the selected slices onto ``grid``.

    Each voxel gets the weight-normalized sum of contributing slice
    intensities; planes with zero total weight are filled from the nearest
    filled plane in z so the optimizer starts finite everywhere.
    """
    if selected.T < 1:
        raise DataError("empty slice selection")
    if (selected.nx, selected.ny) != (grid.nx, grid.ny):
        raise DataError(
            f"in-plane dims mismatch: slices {selected.nx}x{selected.ny}, "
            f"grid {grid.nx}x{grid.ny}"
        )
    sigma = psf.sigma_mm
    zc = grid.z_coords  # (nz,)
    dzm = zc[None, :] - np.asarray(selected.z_positions)[:, None]  # (T, nz)
    w = np.exp(-0.5 * (dzm / sigma) ** 2)
    w[np.abs(dzm) > psf.truncation_sigma * sigma] = 0.0
    wsum = w.sum(axis=0)  # (nz,)
    num = np.tensordot(w, selected.data.astype(np.float64), axes=(0, 0))  # (nz,ny,nx)
    out = np.zeros_like(num)
    filled = wsum > 0
    out[filled] = num[filled] / wsum[filled, None, None]
    if not np.any(filled):
        raise DataError("no grid plane receives PSF weight from the selection")
    if not np.all(filled):
        filled_idx = np.nonzero(filled)[0]
        for z in np.nonzero(~filled)[0]:
            nearest = filled_idx[np.argmin(np.abs(filled_idx - z))]
            out[z] = out[nearest]
    return Volume3D(out.astype(np.float32), grid.spacing, grid.origin)


# ---------------------------------------------------------------------------
# inspection images


def export_slice_images(vol: Volume3D, axis: str, out_dir) -> list[Path]:
    """Dump every plane along ``axis`` as an 8-bit grayscale PNG.

    Intensities are min-max windowed per volume; a degenerate dynamic range
    produces mid-gray images.
    """
    from PIL import Image

    if axis not in ("x", "y", "z"):
        raise DataError(f"axis must be x, y or z, got {axis!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lo, hi = float(vol.data.min()), float(vol.data.max())
    if hi - lo <= 0:
        scaled = np.full(vol.data.shape, 128, dtype=np.uint8)
    else:
        scaled = np.clip((vol.data - lo) / (hi - lo) * 255.0, 0, 255).astype(np.uint8)
    ax = {"z": 0, "y": 1, "x": 2}[axis]
    paths = []
    for i in range(vol.data.shape[ax]):
        plane = np.take(scaled, i, axis=ax)
        p = out_dir / f"{axis}_{i:04d}.png"
        Image.fromarray(plane, mode="L").save(p)
        paths.append(p)
    return paths
