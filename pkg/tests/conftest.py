import numpy as np
import pytest

from focalreg import Rng, synth
from focalreg.dataset import PatchDataset, PatchPair
from focalreg.focalnet import BaselineCnnConfig, FocalErrorNetConfig

# verdict lines from the acceptance suite, replayed after the test summary
acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines:
            terminalreporter.write_line(line)


# small-volume synthesis settings used across dataset/trainer tests
SMALL_SYNTH = dict(dims=(64, 64, 64), border_margin_vox=18,
                   landmark_min_dist_mm=4.0)


def tiny_focal_config(**over):
    base = dict(patch_size=9, stem_dim=4, stage_dims=(4, 6),
                blocks_per_stage=(1, 1), stage_strides=(1, 2),
                focal_kernels=(3, 3), mlp_hidden=(8, 6), dropout_p=0.0)
    base.update(over)
    return FocalErrorNetConfig(**base)


def tiny_baseline_config(**over):
    base = dict(patch_size=9, channels=(3, 4), fc_hidden=6, dropout_p=0.0)
    base.update(over)
    return BaselineCnnConfig(**base)


def patch_focal_config(**over):
    """33^3-input config small enough for test-time training."""
    base = dict(patch_size=33, stem_dim=8, stage_dims=(8, 12),
                blocks_per_stage=(1, 1), stage_strides=(2, 2),
                mlp_hidden=(32, 16))
    base.update(over)
    return FocalErrorNetConfig(**base)


@pytest.fixture(scope="session")
def small_cohort():
    params = synth.SynthParams(**SMALL_SYNTH)
    return synth.generate_subjects(11, 5, params), params


@pytest.fixture(scope="session")
def small_dataset(small_cohort):
    from focalreg.dataset import BuildParams, PatchDataset, build_dataset
    subjects, _ = small_cohort
    samples, manifest = build_dataset(
        subjects, 3, BuildParams(deformations_per_volume=2, max_disp_mm=10.0))
    return PatchDataset(samples, manifest)


def rand_patch(seed, size=9):
    return Rng(seed).random((size, size, size)).astype(np.float32)


def toy_dataset(seed=0, n=48):
    """Patches whose label is a simple function of intensity, so a small
    model can fit it quickly."""
    rng = Rng(seed)
    samples = []
    recs = []
    for i in range(n):
        level = float(rng.uniform(0.1, 0.9))
        mri = np.clip(level + rng.normal(0, 0.05, (33, 33, 33)),
                      0, 1).astype(np.float32)
        us = np.clip(level + rng.normal(0, 0.05, (33, 33, 33)),
                     0, 1).astype(np.float32)
        label = 10.0 * level
        split = "train" if i < n - 16 else ("val" if i < n - 8 else "test")
        sid = f"t{i:02d}"
        samples.append(PatchPair(mri, us, label, sid, (16, 16, 16), 0))
        recs.append({"index": i, "subject_id": sid,
                     "center_voxel": [16, 16, 16], "deformation_id": 0,
                     "label_mm": label, "split": split})
    manifest = {"seed": seed, "params": {}, "skipped": 0,
                "splits": {r["subject_id"]: r["split"] for r in recs},
                "samples": recs}
    return PatchDataset(samples, manifest)
