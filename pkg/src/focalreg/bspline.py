"""Cubic B-spline free-form deformation.

Volumes are dense scalar grids with physical spacing in mm; deformations are
displacement vectors (mm) on a regular control-point lattice, interpolated
with the uniform cubic B-spline basis. Also includes landmark-based fitting
of a deformation (the silver-ground-truth registration) and volume warping
by backward mapping with trilinear sampling.
"""

import struct
from dataclasses import dataclass, field

import numpy as np


class SupportError(ValueError):
    """A point fell outside the control grid's support."""


class VolumeFormatError(IOError):
    """Bad magic/version or truncated volume/grid file."""


@dataclass
class Volume3D:
    """Dense scalar field; data indexed [z, y, x] with x fastest in memory."""
    dims: tuple            # (nx, ny, nz)
    spacing: tuple         # mm per voxel
    origin: tuple = (0.0, 0.0, 0.0)
    data: np.ndarray = None

    def __post_init__(self):
        self.dims = tuple(int(v) for v in self.dims)
        self.spacing = tuple(float(v) for v in self.spacing)
        self.origin = tuple(float(v) for v in self.origin)
        if any(s <= 0 for s in self.spacing):
            raise ValueError("spacing must be positive")
        nx, ny, nz = self.dims
        if self.data is None:
            self.data = np.zeros((nz, ny, nx), dtype=np.float32)
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.shape != (nz, ny, nx):
            raise ValueError(f"data shape {self.data.shape} does not match "
                             f"dims {self.dims}")
        if not np.isfinite(self.data).all():
            raise ValueError("volume intensities must be finite")

    def voxel_to_mm(self, idx):
        """idx: (..., 3) array of (ix, iy, iz) voxel indices -> mm points."""
        idx = np.asarray(idx, dtype=np.float64)
        return self.origin + idx * np.asarray(self.spacing)

    def extent_mm(self):
        lo = np.asarray(self.origin, dtype=np.float64)
        hi = lo + (np.asarray(self.dims) - 1) * np.asarray(self.spacing)
        return lo, hi


@dataclass
class BSplineGrid:
    """Control-point lattice; disp[kz, ky, kx] is a 3-vector in mm."""
    grid_dims: tuple       # control points per axis (nx, ny, nz)
    grid_spacing: tuple    # mm between control points
    grid_origin: tuple     # mm position of control point (0, 0, 0)
    disp: np.ndarray = None

    def __post_init__(self):
        self.grid_dims = tuple(int(v) for v in self.grid_dims)
        self.grid_spacing = tuple(float(v) for v in self.grid_spacing)
        self.grid_origin = tuple(float(v) for v in self.grid_origin)
        if any(d < 4 for d in self.grid_dims):
            raise ValueError("need at least 4 control points per axis")
        nx, ny, nz = self.grid_dims
        if self.disp is None:
            self.disp = np.zeros((nz, ny, nx, 3), dtype=np.float64)
        self.disp = np.asarray(self.disp, dtype=np.float64)
        if self.disp.shape != (nz, ny, nx, 3):
            raise ValueError("disp shape does not match grid_dims")


def bspline_basis(u):
    """Uniform cubic basis weights (B0..B3) at fraction u in [0, 1).

    Vectorized: u may be an array; returns shape u.shape + (4,).
    """
    u = np.asarray(u, dtype=np.float64)
    if np.any(u < 0) or np.any(u >= 1):
        raise ValueError("basis fraction must lie in [0, 1)")
    v = 1.0 - u
    b0 = v ** 3 / 6.0
    b1 = (3 * u ** 3 - 6 * u ** 2 + 4) / 6.0
    b2 = (-3 * u ** 3 + 3 * u ** 2 + 3 * u + 1) / 6.0
    b3 = u ** 3 / 6.0
    return np.stack([b0, b1, b2, b3], axis=-1)


def _cell_and_frac(grid, pts):
    """Map mm points to base control-cell index and in-cell fraction.

    The 4x4x4 support of a point in cell i is control points i-1 .. i+2.
    """
    pts = np.asarray(pts, dtype=np.float64)
    rel = (pts - np.asarray(grid.grid_origin)) / np.asarray(grid.grid_spacing)
    cell = np.floor(rel).astype(np.int64)
    frac = rel - cell
    dims = np.asarray(grid.grid_dims)
    if np.any(cell < 1) or np.any(cell + 2 > dims - 1):
        raise SupportError("point outside B-spline grid support")
    return cell, frac


def displacement_at(grid, pts):
    """Displacement (mm) at mm points; pts shape (..., 3) or (3,)."""
    pts = np.asarray(pts, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    cell, frac = _cell_and_frac(grid, pts)
    bx = bspline_basis(frac[:, 0])
    by = bspline_basis(frac[:, 1])
    bz = bspline_basis(frac[:, 2])
    out = np.zeros((pts.shape[0], 3))
    for c in range(4):
        # contract z, then y, then x against the 4^3 support
        iz = cell[:, 2] - 1 + c
        t1 = grid.disp[iz]                      # [n, gy, gx, 3]
        wz = bz[:, c][:, None, None, None]
        if c == 0:
            tz = wz * t1
        else:
            tz += wz * t1
    for b in range(4):
        iy = cell[:, 1] - 1 + b
        t2 = tz[np.arange(pts.shape[0]), iy]    # [n, gx, 3]
        wy = by[:, b][:, None, None]
        if b == 0:
            ty = wy * t2
        else:
            ty += wy * t2
    for a in range(4):
        ix = cell[:, 0] - 1 + a
        out += bx[:, a][:, None] * ty[np.arange(pts.shape[0]), ix]
    return out[0] if single else out


def _lattice_points_mm(vol):
    nx, ny, nz = vol.dims
    xs = vol.origin[0] + np.arange(nx) * vol.spacing[0]
    ys = vol.origin[1] + np.arange(ny) * vol.spacing[1]
    zs = vol.origin[2] + np.arange(nz) * vol.spacing[2]
    return xs, ys, zs


def displacement_field(grid, vol):
    """Displacement vectors at every voxel center; array [nz, ny, nx, 3].

    Separable evaluation: one axis is contracted at a time, which turns the
    64-term tensor-product sum into three cheap passes.
    """
    xs, ys, zs = _lattice_points_mm(vol)

    def prep(vals, axis):
        rel = (vals - grid.grid_origin[axis]) / grid.grid_spacing[axis]
        cell = np.floor(rel).astype(np.int64)
        if np.any(cell < 1) or np.any(cell + 2 > grid.grid_dims[axis] - 1):
            raise SupportError("volume outside B-spline grid support")
        return cell, bspline_basis(rel - cell)

    cx, bx = prep(xs, 0)
    cy, by = prep(ys, 1)
    cz, bz = prep(zs, 2)

    d = grid.disp
    tz = np.zeros((len(zs),) + d.shape[1:])
    for c in range(4):
        tz += bz[:, c][:, None, None, None] * d[cz - 1 + c]
    ty = np.zeros((len(zs), len(ys)) + d.shape[2:])
    for b in range(4):
        ty += by[None, :, b, None, None] * tz[:, cy - 1 + b]
    out = np.zeros((len(zs), len(ys), len(xs), 3))
    for a in range(4):
        out += bx[None, None, :, a, None] * ty[:, :, cx - 1 + a]
    return out


def error_field(grid, vol):
    """Per-voxel simulated registration error: norm of the displacement."""
    disp = displacement_field(grid, vol)
    mag = np.linalg.norm(disp, axis=-1)
    return Volume3D(vol.dims, vol.spacing, vol.origin, mag)


def trilinear_sample(vol, pts_mm, fill=0.0):
    """Sample intensities at mm points; outside the volume -> fill."""
    pts = np.atleast_2d(np.asarray(pts_mm, dtype=np.float64))
    rel = (pts - np.asarray(vol.origin)) / np.asarray(vol.spacing)
    nx, ny, nz = vol.dims
    hi = np.asarray([nx, ny, nz]) - 1
    inside = np.all((rel >= 0) & (rel <= hi), axis=-1)
    # clamp the cell so rel == n-1 lands in the top cell with fraction 1.0;
    # voxel-center samples then reproduce stored values bit-exactly
    i0 = np.clip(np.floor(rel).astype(np.int64), 0, hi - 1)
    f = rel - i0
    d = vol.data
    ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    out = np.zeros(pts.shape[0])
    for dz in (0, 1):
        wz = fz if dz else 1 - fz
        for dy in (0, 1):
            wy = fy if dy else 1 - fy
            for dx in (0, 1):
                wx = fx if dx else 1 - fx
                out += wz * wy * wx * d[iz + dz, iy + dy, ix + dx]
    out[~inside] = fill
    return out


def warp_volume(vol, grid, disp=None):
    """Backward-mapping warp: out(x) = vol(x + displacement(x)).

    Samples landing outside the input volume become 0 (out-of-FOV darkness).
    `disp` may pass a precomputed displacement_field to share work with
    error_field.
    """
    if disp is None:
        disp = displacement_field(grid, vol)
    xs, ys, zs = _lattice_points_mm(vol)
    zz, yy, xx = np.meshgrid(zs, ys, xs, indexing="ij")
    pts = np.stack([xx, yy, zz], axis=-1).reshape(-1, 3) + disp.reshape(-1, 3)
    vals = trilinear_sample(vol, pts, fill=0.0)
    return Volume3D(vol.dims, vol.spacing, vol.origin,
                    vals.reshape(vol.data.shape))


def grid_covering(vol, spacing_mm, margin=1):
    """Control grid that covers the volume with >= `margin`+1 extra points
    on every side (cubic support needs one beyond each boundary cell)."""
    lo, hi = vol.extent_mm()
    spacing = np.broadcast_to(np.asarray(spacing_mm, dtype=np.float64), 3)
    n = np.ceil((hi - lo) / spacing).astype(int) + 2 * (margin + 1) + 1
    origin = lo - (margin + 1) * spacing
    return BSplineGrid(tuple(n), tuple(spacing), tuple(origin))


def random_deformation(rng, vol, max_points=20, max_disp_mm=30.0):
    """Random isotropic-grid deformation.

    One control-point count is drawn per deformation (the grid density is
    arbitrary per deformation); each displacement component is uniform in
    (-d, d) with d = u^2 * max_disp_mm, u ~ U(0, 1]. Squaring biases the
    amplitude low: most deformations are mild and large ones form a sparse
    tail, as in registration practice.
    """
    if max_points < 4:
        raise ValueError("max_points must be >= 4")
    lo, hi = vol.extent_mm()
    span = float(np.max(hi - lo))
    if span <= 0:
        raise ValueError("degenerate volume")
    n_pts = int(rng.integers(4, max_points + 1))
    spacing = span / (n_pts - 1)
    grid = grid_covering(vol, spacing)
    if max_disp_mm > 0:
        d = float(rng.uniform(0.0, 1.0)) ** 2 * max_disp_mm
        grid.disp = rng.uniform(-d, d, grid.disp.shape)
    return grid


@dataclass
class LandmarkSet:
    """Paired (fixed, moving) landmark coordinates in mm."""
    fixed: np.ndarray
    moving: np.ndarray

    def __post_init__(self):
        self.fixed = np.atleast_2d(np.asarray(self.fixed, dtype=np.float64))
        self.moving = np.atleast_2d(np.asarray(self.moving, dtype=np.float64))
        if self.fixed.shape != self.moving.shape or self.fixed.shape[0] < 1 \
                or self.fixed.shape[1] != 3:
            raise ValueError("landmarks must be matching (n, 3) arrays")

    def __len__(self):
        return self.fixed.shape[0]


def _basis_matrix(grid, pts):
    """Sparse-in-spirit design matrix: row i holds the 64 basis weights of
    moving point i against the flattened control lattice."""
    cell, frac = _cell_and_frac(grid, pts)
    bx = bspline_basis(frac[:, 0])
    by = bspline_basis(frac[:, 1])
    bz = bspline_basis(frac[:, 2])
    gx, gy, gz = grid.grid_dims
    n = pts.shape[0]
    a = np.zeros((n, gz * gy * gx))
    for c in range(4):
        for b in range(4):
            for aa in range(4):
                w = bz[:, c] * by[:, b] * bx[:, aa]
                idx = ((cell[:, 2] - 1 + c) * gy + cell[:, 1] - 1 + b) * gx \
                    + cell[:, 0] - 1 + aa
                a[np.arange(n), idx] += w
    return a


def fit_landmark_bspline(lms, vol, grid_spacing_mm=10.0, ridge_lambda=1e-6):
    """Ridge-regularized least squares for control displacements so the
    deformation carries each moving landmark onto its fixed mate."""
    grid = grid_covering(vol, grid_spacing_mm)
    a = _basis_matrix(grid, lms.moving)
    target = lms.fixed - lms.moving
    ata = a.T @ a + ridge_lambda * np.eye(a.shape[1])
    if ridge_lambda <= 0:
        cond = np.linalg.cond(ata)
        if not np.isfinite(cond) or cond > 1e12:
            raise np.linalg.LinAlgError(
                "landmark fit is ill-posed without regularization")
    sol = np.linalg.solve(ata, a.T @ target)
    grid.disp = sol.reshape(grid.disp.shape[:3] + (3,),)
    return grid


def mtre(lms, grid):
    """Mean target registration error (mm) of a deformation over landmarks."""
    moved = lms.moving + displacement_at(grid, lms.moving)
    return float(np.mean(np.linalg.norm(moved - lms.fixed, axis=1)))


def landmark_residuals(lms, grid):
    moved = lms.moving + displacement_at(grid, lms.moving)
    return np.linalg.norm(moved - lms.fixed, axis=1)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

_VOL_MAGIC = b"FENV"
_GRID_MAGIC = b"FENG"
_IO_VERSION = 1


def save_volume(path, vol):
    with open(path, "wb") as f:
        f.write(_VOL_MAGIC)
        f.write(struct.pack("<I", _IO_VERSION))
        f.write(struct.pack("<3I", *vol.dims))
        f.write(struct.pack("<3d", *vol.spacing))
        f.write(struct.pack("<3d", *vol.origin))
        f.write(np.ascontiguousarray(vol.data, dtype="<f4").tobytes())


def load_volume(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _VOL_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _IO_VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    dims = struct.unpack_from("<3I", raw, 8)
    spacing = struct.unpack_from("<3d", raw, 20)
    origin = struct.unpack_from("<3d", raw, 44)
    n = dims[0] * dims[1] * dims[2]
    if 68 + 4 * n > len(raw):
        raise VolumeFormatError(f"{path}: truncated data")
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=68)
    return Volume3D(dims, spacing, origin,
                    data.reshape(dims[2], dims[1], dims[0]).copy())


def save_grid(path, grid):
    with open(path, "wb") as f:
        f.write(_GRID_MAGIC)
        f.write(struct.pack("<I", _IO_VERSION))
        f.write(struct.pack("<3I", *grid.grid_dims))
        f.write(struct.pack("<3d", *grid.grid_spacing))
        f.write(struct.pack("<3d", *grid.grid_origin))
        f.write(np.ascontiguousarray(grid.disp, dtype="<f8").tobytes())


def load_grid(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _GRID_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _IO_VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    dims = struct.unpack_from("<3I", raw, 8)
    spacing = struct.unpack_from("<3d", raw, 20)
    origin = struct.unpack_from("<3d", raw, 44)
    n = dims[0] * dims[1] * dims[2] * 3
    if 68 + 8 * n > len(raw):
        raise VolumeFormatError(f"{path}: truncated data")
    disp = np.frombuffer(raw, dtype="<f8", count=n, offset=68)
    return BSplineGrid(dims, spacing, origin,
                       disp.reshape(dims[2], dims[1], dims[0], 3).copy())
