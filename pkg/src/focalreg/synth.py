"""Synthetic paired-volume generator.

Stands in for clinical MRI/ultrasound pairs: both modalities render the same
underlying anatomy (smooth ellipsoidal structures plus band-limited texture)
through different contrast maps; the ultrasound-like volume additionally gets
multiplicative speckle and a truncated oblique wedge field of view with zeros
outside. Landmarks sit on strong gradients inside the FOV, mutually at least
8 mm apart, and far enough from the borders that 33^3 patches survive a
10-voxel shift.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .bspline import Volume3D, load_volume, save_volume


@dataclass
class SynthParams:
    dims: tuple = (128, 128, 128)
    spacing: tuple = (0.5, 0.5, 0.5)
    n_blobs: int = 30
    texture_sigma_vox: float = 2.0
    texture_weight: float = 0.25
    mri_noise: float = 0.02
    speckle: float = 0.25
    wedge_half_angle_deg: float = 50.0
    n_landmarks_min: int = 12
    n_landmarks_max: int = 16
    landmark_min_dist_mm: float = 8.0
    border_margin_vox: int = 28    # patch half-size 16 + max shift 10 + slack

    def __post_init__(self):
        self.dims = tuple(self.dims)
        self.spacing = tuple(self.spacing)


@dataclass
class SyntheticSubject:
    id: str
    mri: Volume3D
    us: Volume3D
    landmarks: np.ndarray        # voxel indices (n, 3) as (ix, iy, iz)
    fov_mask: Volume3D

    def landmarks_mm(self):
        return self.mri.voxel_to_mm(self.landmarks)


def _anatomy(rng, params):
    nx, ny, nz = params.dims
    zz, yy, xx = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx),
                             indexing="ij")
    field = np.zeros((nz, ny, nx))
    span = np.asarray([nx, ny, nz], dtype=np.float64)
    for _ in range(params.n_blobs):
        center = rng.uniform(0.15, 0.85, 3) * span
        radii = rng.uniform(4.0, 18.0, 3) / np.asarray(params.spacing)
        amp = rng.uniform(0.3, 1.0)
        r2 = (((xx - center[0]) / radii[0]) ** 2
              + ((yy - center[1]) / radii[1]) ** 2
              + ((zz - center[2]) / radii[2]) ** 2)
        field += amp * np.exp(-r2)
    texture = gaussian_filter(rng.normal(0.0, 1.0, field.shape),
                              params.texture_sigma_vox)
    texture /= max(np.abs(texture).max(), 1e-12)
    field = field / max(field.max(), 1e-12)
    field = field + params.texture_weight * texture
    field -= field.min()
    field /= max(field.max(), 1e-12)
    return field


def _wedge_mask(rng, params):
    """Truncated cone from a point just outside a random face, aimed at a
    jittered volume center."""
    nx, ny, nz = params.dims
    dims = np.asarray([nx, ny, nz], dtype=np.float64)
    face_axis = int(rng.integers(0, 3))
    face_side = int(rng.integers(0, 2))
    apex = rng.uniform(0.3, 0.7, 3) * dims
    apex[face_axis] = -0.15 * dims[face_axis] if face_side == 0 \
        else 1.15 * dims[face_axis]
    target = dims / 2 + rng.uniform(-0.1, 0.1, 3) * dims
    axis = target - apex
    axis /= np.linalg.norm(axis)
    zz, yy, xx = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx),
                             indexing="ij")
    vec = np.stack([xx - apex[0], yy - apex[1], zz - apex[2]], axis=-1)
    dist = np.linalg.norm(vec, axis=-1)
    along = vec @ axis
    cos = np.clip(along / np.maximum(dist, 1e-9), -1, 1)
    half = np.deg2rad(params.wedge_half_angle_deg)
    r_near = 0.18 * dims[face_axis]
    r_far = rng.uniform(1.35, 1.6) * dims[face_axis]
    mask = (cos >= np.cos(half)) & (dist >= r_near) & (dist <= r_far)
    return mask.astype(np.float32)


def _pick_landmarks(rng, saliency, valid, n_min, n_max, min_dist_vox):
    """Greedy maxima of `saliency` restricted to `valid`, spaced apart."""
    n_want = int(rng.integers(n_min, n_max + 1))
    flat = np.where(valid.reshape(-1))[0]
    order = flat[np.argsort(saliency.reshape(-1)[flat])[::-1]]
    nz, ny, nx = saliency.shape
    chosen = []
    for idx in order:
        z, rem = divmod(int(idx), ny * nx)
        y, x = divmod(rem, nx)
        p = np.array([x, y, z])
        if all(np.linalg.norm(p - q) >= min_dist_vox for q in chosen):
            chosen.append(p)
            if len(chosen) == n_want:
                break
    return np.array(chosen, dtype=np.int64)


def synth_subject(rng, params=None, subject_id="s0"):
    params = params or SynthParams()
    anatomy = _anatomy(rng.split(0), params)

    mri = np.clip(anatomy ** 0.8
                  + rng.split(1).normal(0.0, params.mri_noise, anatomy.shape),
                  0.0, 1.0)

    grad = np.linalg.norm(np.stack(np.gradient(anatomy)), axis=0)
    grad_n = grad / max(grad.max(), 1e-12)
    us_base = 0.55 * anatomy ** 2.0 + 0.45 * grad_n
    speckle = 1.0 + params.speckle * gaussian_filter(
        rng.split(2).normal(0.0, 1.0, anatomy.shape), 0.8)
    fov = _wedge_mask(rng.split(3), params)
    us = np.clip(us_base * speckle, 0.0, 1.0) * fov

    m = params.border_margin_vox
    valid = np.zeros_like(fov, dtype=bool)
    valid[m:-m, m:-m, m:-m] = fov[m:-m, m:-m, m:-m] > 0
    min_dist_vox = params.landmark_min_dist_mm / min(params.spacing)
    lms = _pick_landmarks(rng.split(4), grad_n * (us > 0), valid,
                          params.n_landmarks_min, params.n_landmarks_max,
                          min_dist_vox)
    if len(lms) < 8:
        raise RuntimeError(
            f"subject {subject_id}: only {len(lms)} landmarks found; "
            "FOV too small for the requested margins")

    mk = lambda d: Volume3D(params.dims, params.spacing, (0.0,) * 3, d)
    return SyntheticSubject(subject_id, mk(mri), mk(us), lms, mk(fov))


def generate_subjects(seed, n_subjects, params=None):
    from .rng import Rng
    params = params or SynthParams()
    master = Rng(seed)
    return [synth_subject(master.split(i), params, subject_id=f"subj{i:03d}")
            for i in range(n_subjects)]


# ---------------------------------------------------------------------------
# on-disk layout: one directory per cohort
# ---------------------------------------------------------------------------

def save_subjects(out_dir, subjects, params, seed):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"seed": seed, "params": asdict(params),
            "subjects": [s.id for s in subjects],
            "landmarks": {s.id: s.landmarks.tolist() for s in subjects}}
    (out / "cohort.json").write_text(json.dumps(meta, indent=2))
    for s in subjects:
        save_volume(out / f"{s.id}_mri.fenv", s.mri)
        save_volume(out / f"{s.id}_us.fenv", s.us)
        save_volume(out / f"{s.id}_fov.fenv", s.fov_mask)


def load_subjects(in_dir):
    src = Path(in_dir)
    meta = json.loads((src / "cohort.json").read_text())
    subjects = []
    for sid in meta["subjects"]:
        subjects.append(SyntheticSubject(
            sid,
            load_volume(src / f"{sid}_mri.fenv"),
            load_volume(src / f"{sid}_us.fenv"),
            np.asarray(meta["landmarks"][sid], dtype=np.int64),
            load_volume(src / f"{sid}_fov.fenv")))
    return subjects, meta
