"""focalreg: registration-error regression on synthetic paired volumes.

Minimal tensor autodiff engine, a 3D focal modulation regression network and
a plain-CNN baseline, a cubic B-spline free-form deformation engine, a
synthetic paired-volume dataset pipeline, deterministic Adam training, and
MC-dropout uncertainty with a statistical evaluation suite.
"""

from .bspline import (BSplineGrid, LandmarkSet, SupportError, Volume3D,
                      VolumeFormatError, bspline_basis, displacement_at,
                      displacement_field, error_field, fit_landmark_bspline,
                      grid_covering, load_grid, load_volume, mtre,
                      random_deformation, save_grid, save_volume,
                      trilinear_sample, warp_volume)
from .checkpoint import CheckpointError, load_params, save_params
from .dataset import (BuildParams, DatasetFormatError, PatchDataset,
                      PatchPair, augment_pair, build_dataset, extract_patch,
                      load_dataset, save_dataset, shifted_test_set,
                      split_subjects)
from .focalnet import (BaselineCnn, BaselineCnnConfig, FocalErrorNet,
                       FocalErrorNetConfig, FocalModulationConfig,
                       MODEL_TYPES, build_model)
from .gradcheck import grad_check
from .metrics import (MCPrediction, bin_values, evaluate_report,
                      mc_predict, mc_predict_dataset, mutual_information,
                      paired_ttest_two_sided, pearson_corr)
from .rng import Rng
from .synth import (SynthParams, SyntheticSubject, generate_subjects,
                    load_subjects, save_subjects, synth_subject)
from .tensor import (NumericError, ShapeError, Tensor, no_grad, precision)
from .trainer import Adam, TrainConfig, TrainResult, train

__version__ = "0.1.0"
