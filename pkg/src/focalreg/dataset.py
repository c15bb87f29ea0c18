"""Patch dataset construction, splits, augmentation and serialization.

Every co-registered ultrasound volume is deformed a fixed number of times by
random B-spline fields; at each landmark a 33^3 MRI/US patch pair is cut and
labelled with the mean per-voxel displacement norm over the US patch. Subject
level splits prevent leakage; a shifted variant of the test set probes
robustness away from landmark centers.

Blob file: magic "FEND", version u32, record count u32, then CRC32-guarded
records. Manifest is JSON carrying seed, parameters, splits and one entry per
sample (label in the manifest must equal the label in the blob).
"""

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bspline import (Volume3D, displacement_field, random_deformation,
                      warp_volume)
from .rng import Rng

PATCH = 33
HALF = PATCH // 2

_MAGIC = b"FEND"
_VERSION = 1


class DatasetFormatError(IOError):
    """Bad magic/version, truncated blob, or checksum mismatch."""


@dataclass
class PatchPair:
    mri_patch: np.ndarray
    us_patch: np.ndarray
    label_mm: float
    subject_id: str
    center_voxel: tuple
    deformation_id: int

    def __post_init__(self):
        if self.mri_patch.shape != (PATCH,) * 3 \
                or self.us_patch.shape != (PATCH,) * 3:
            raise ValueError("patches must be 33^3")
        if self.label_mm < 0:
            raise ValueError("label must be non-negative")


@dataclass
class BuildParams:
    deformations_per_volume: int = 10
    max_points: int = 20
    max_disp_mm: float = 40.0
    fractions: tuple = (0.6, 0.2, 0.2)

    def __post_init__(self):
        self.fractions = tuple(self.fractions)


def extract_patch(vol, center, size=PATCH):
    """Cube copy around a voxel center, min-max normalized to [0, 1]."""
    half = size // 2
    cx, cy, cz = (int(c) for c in center)
    nx, ny, nz = vol.dims
    if not (half <= cx < nx - half and half <= cy < ny - half
            and half <= cz < nz - half):
        raise IndexError(f"patch at {center} exceeds volume bounds {vol.dims}")
    cube = vol.data[cz - half:cz + half + 1,
                    cy - half:cy + half + 1,
                    cx - half:cx + half + 1].astype(np.float32)
    lo, hi = cube.min(), cube.max()
    if hi - lo <= 0:
        return np.zeros_like(cube)
    return (cube - lo) / (hi - lo)


def patch_in_bounds(vol, center, size=PATCH):
    half = size // 2
    return all(half <= int(c) < n - half
               for c, n in zip(center, vol.dims))


def split_subjects(subject_ids, fractions=(0.6, 0.2, 0.2), rng=None):
    """Shuffle subjects, then contiguous train/val/test; rounding favors
    train."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    ids = sorted(subject_ids)
    if rng is not None:
        ids = [ids[i] for i in rng.permutation(len(ids))]
    n = len(ids)
    n_val = int(np.floor(fractions[1] * n))
    n_test = int(np.floor(fractions[2] * n))
    n_train = n - n_val - n_test
    splits = {}
    for i, sid in enumerate(ids):
        if i < n_train:
            splits[sid] = "train"
        elif i < n_train + n_val:
            splits[sid] = "val"
        else:
            splits[sid] = "test"
    return splits


def _deformation_rng(seed, subject_index, deformation_id):
    return Rng(seed).split(1000 + subject_index).split(deformation_id)


def _patch_label(err_mag, center):
    cx, cy, cz = (int(c) for c in center)
    block = err_mag[cz - HALF:cz + HALF + 1, cy - HALF:cy + HALF + 1,
                    cx - HALF:cx + HALF + 1]
    return float(block.mean())


def build_dataset(subjects, seed, params=None, splits=None, log=None):
    """Deform each subject's US volume and cut labelled patch pairs.

    Returns (samples, manifest_dict). Ordering is stable: subjects sorted by
    id, deformations in index order, landmarks in stored order.
    """
    params = params or BuildParams()
    if len(subjects) < 5:
        raise ValueError("need at least 5 subjects for subject-level splits")
    subjects = sorted(subjects, key=lambda s: s.id)
    if splits is None:
        splits = split_subjects([s.id for s in subjects], params.fractions,
                                Rng(seed).split(1))
    samples = []
    skipped = 0
    for si, subj in enumerate(subjects):
        for di in range(params.deformations_per_volume):
            drng = _deformation_rng(seed, si, di)
            grid = random_deformation(drng, subj.us, params.max_points,
                                      params.max_disp_mm)
            disp = displacement_field(grid, subj.us)
            warped = warp_volume(subj.us, grid, disp)
            err_mag = np.linalg.norm(disp, axis=-1)
            for lm in subj.landmarks:
                if not patch_in_bounds(subj.us, lm):
                    skipped += 1
                    if log:
                        log(f"skip landmark {lm.tolist()} of {subj.id}: "
                            "too close to border")
                    continue
                samples.append(PatchPair(
                    extract_patch(subj.mri, lm),
                    extract_patch(warped, lm),
                    _patch_label(err_mag, lm),
                    subj.id, tuple(int(v) for v in lm), di))
    manifest = {
        "seed": seed,
        "params": asdict(params),
        "splits": splits,
        "skipped": skipped,
        "samples": [{
            "index": i,
            "subject_id": s.subject_id,
            "center_voxel": list(s.center_voxel),
            "deformation_id": s.deformation_id,
            "label_mm": s.label_mm,
            "split": splits[s.subject_id],
        } for i, s in enumerate(samples)],
    }
    return samples, manifest


def shifted_test_set(subjects, manifest, seed_shift, max_shift_voxels=10):
    """Re-extract test patches at randomly shifted centers, labels
    recomputed at the new support. Deformations are regenerated from the
    manifest seed, so the underlying misalignments are identical."""
    seed = manifest["seed"]
    params = BuildParams(**manifest["params"])
    subjects = sorted(subjects, key=lambda s: s.id)
    index_of = {s.id: i for i, s in enumerate(subjects)}
    by_subj = {s.id: s for s in subjects}
    test_records = [r for r in manifest["samples"] if r["split"] == "test"]
    srng = Rng(seed_shift)

    samples = []
    cache_key, cache = None, None
    for pos, rec in enumerate(sorted(
            test_records,
            key=lambda r: (r["subject_id"], r["deformation_id"], r["index"]))):
        subj = by_subj[rec["subject_id"]]
        key = (rec["subject_id"], rec["deformation_id"])
        if key != cache_key:
            drng = _deformation_rng(seed, index_of[subj.id],
                                    rec["deformation_id"])
            grid = random_deformation(drng, subj.us, params.max_points,
                                      params.max_disp_mm)
            disp = displacement_field(grid, subj.us)
            cache = (warp_volume(subj.us, grid, disp),
                     np.linalg.norm(disp, axis=-1))
            cache_key = key
        warped, err_mag = cache
        rng = srng.split(rec["index"])
        center = np.asarray(rec["center_voxel"])
        draw = 0
        while True:
            shift = rng.split(draw).integers(-max_shift_voxels,
                                             max_shift_voxels + 1, 3)
            if patch_in_bounds(subj.us, center + shift):
                break
            draw += 1
        c = tuple(int(v) for v in center + shift)
        samples.append(PatchPair(
            extract_patch(subj.mri, c), extract_patch(warped, c),
            _patch_label(err_mag, c), subj.id, c, rec["deformation_id"]))
    shifted_manifest = {
        "seed": seed,
        "seed_shift": seed_shift,
        "max_shift_voxels": max_shift_voxels,
        "params": manifest["params"],
        "splits": {sid: sp for sid, sp in manifest["splits"].items()
                   if sp == "test"},
        "skipped": 0,
        "samples": [{
            "index": i,
            "subject_id": s.subject_id,
            "center_voxel": list(s.center_voxel),
            "deformation_id": s.deformation_id,
            "label_mm": s.label_mm,
            "split": "test",
        } for i, s in enumerate(samples)],
    }
    return samples, shifted_manifest


def augment_pair(mri_patch, us_patch, rng, noise_sigma=0.02):
    """Identical per-axis flips on both patches plus independent Gaussian
    noise; the label is untouched (flips only permute voxels)."""
    mri, us = mri_patch, us_patch
    for axis in range(3):
        if rng.random() < 0.5:
            mri = np.flip(mri, axis=axis)
            us = np.flip(us, axis=axis)
    if noise_sigma > 0:
        mri = np.clip(mri + rng.normal(0, noise_sigma, mri.shape), 0, 1)
        us = np.clip(us + rng.normal(0, noise_sigma, us.shape), 0, 1)
    return np.ascontiguousarray(mri, dtype=np.float32), \
        np.ascontiguousarray(us, dtype=np.float32)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_dataset(path_blob, path_manifest, samples, manifest):
    if len(samples) != len(manifest["samples"]):
        raise ValueError("manifest/sample count mismatch")
    with open(path_blob, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(samples)))
        for s in samples:
            sid = s.subject_id.encode("utf-8")
            payload = struct.pack("<I", len(sid)) + sid
            payload += struct.pack("<3i", *s.center_voxel)
            payload += struct.pack("<Id", s.deformation_id, s.label_mm)
            payload += np.ascontiguousarray(s.mri_patch, dtype="<f4").tobytes()
            payload += np.ascontiguousarray(s.us_patch, dtype="<f4").tobytes()
            f.write(payload)
            f.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))
    Path(path_manifest).write_text(json.dumps(manifest, indent=1))


def load_dataset(path_blob, path_manifest):
    manifest = json.loads(Path(path_manifest).read_text())
    with open(path_blob, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise DatasetFormatError(f"{path_blob}: bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise DatasetFormatError(f"{path_blob}: unsupported version")
    if count != len(manifest["samples"]):
        raise DatasetFormatError("manifest sample count != blob record count")
    npx = PATCH ** 3
    off = 12
    samples = []
    for i in range(count):
        start = off
        try:
            (slen,) = struct.unpack_from("<I", raw, off)
            off += 4
            sid = raw[off:off + slen].decode("utf-8")
            off += slen
            center = struct.unpack_from("<3i", raw, off)
            off += 12
            def_id, label = struct.unpack_from("<Id", raw, off)
            off += 12
            if off + 8 * npx + 4 > len(raw):
                raise DatasetFormatError(
                    f"{path_blob}: truncated record {i}")
            mri = np.frombuffer(raw, dtype="<f4", count=npx, offset=off)
            off += 4 * npx
            us = np.frombuffer(raw, dtype="<f4", count=npx, offset=off)
            off += 4 * npx
            (crc,) = struct.unpack_from("<I", raw, off)
            off += 4
        except struct.error as exc:
            raise DatasetFormatError(
                f"{path_blob}: truncated record {i}") from exc
        if zlib.crc32(raw[start:off - 4]) & 0xFFFFFFFF != crc:
            raise DatasetFormatError(
                f"{path_blob}: checksum failure at record {i}")
        rec = manifest["samples"][i]
        if rec["label_mm"] != label:
            raise DatasetFormatError(
                f"{path_blob}: manifest label mismatch at record {i}")
        samples.append(PatchPair(
            mri.reshape(PATCH, PATCH, PATCH).copy(),
            us.reshape(PATCH, PATCH, PATCH).copy(),
            label, sid, tuple(center), def_id))
    return samples, manifest


class PatchDataset:
    """In-memory view with per-split index lists."""

    def __init__(self, samples, manifest):
        self.samples = samples
        self.manifest = manifest
        self.labels = np.array([s.label_mm for s in samples])
        self.split_indices = {k: [] for k in ("train", "val", "test")}
        for i, rec in enumerate(manifest["samples"]):
            self.split_indices[rec["split"]].append(i)

    @classmethod
    def load(cls, blob_path, manifest_path):
        return cls(*load_dataset(blob_path, manifest_path))

    def batch_arrays(self, indices):
        """Stack patch pairs into a [n, 2, 33, 33, 33] float32 array."""
        out = np.empty((len(indices), 2, PATCH, PATCH, PATCH),
                       dtype=np.float32)
        for j, i in enumerate(indices):
            out[j, 0] = self.samples[i].mri_patch
            out[j, 1] = self.samples[i].us_patch
        return out
