"""Deterministic mini-batch training: Adam + MSE on either model.

All randomness (shuffling, augmentation, dropout) is keyed on the config
seed plus epoch/batch indices, so a rerun with the same config reproduces
the loss curve bit for bit.
"""

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .checkpoint import load_params, save_params
from .dataset import PatchDataset, augment_pair
from .focalnet import (MODEL_TYPES, build_model, config_to_json)
from .rng import Rng
from .tensor import NumericError, Tensor, no_grad


@dataclass
class TrainConfig:
    model: str = "focalerrornet"
    learning_rate: float = 5e-5
    batch_size: int = 64
    epochs: int = 60
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    augment: bool = True
    noise_sigma: float = 0.02
    model_config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.model not in MODEL_TYPES:
            raise ValueError(f"unknown model {self.model!r}")


class Adam:
    """Standard Adam with bias correction over a named-parameter dict."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {k!r} "
                                   f"at step {self.t}")
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape mismatch for {k!r}")
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / c1
            vhat = self.v[k] / c2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _eval_mse(model, dataset, indices, batch_size):
    """MSE with dropout inactive."""
    if not indices:
        return float("nan")
    total = 0.0
    with no_grad():
        for lo in range(0, len(indices), batch_size):
            batch = indices[lo:lo + batch_size]
            x = Tensor(dataset.batch_arrays(batch))
            pred = model.forward(x, mode="infer").data[:, 0]
            y = dataset.labels[batch]
            total += float(((pred - y) ** 2).sum())
    return total / len(indices)


@dataclass
class TrainResult:
    model: object
    best_params_path: str
    curve: list                 # (epoch, train_mse, val_mse)
    best_epoch: int
    best_val_mse: float


def train(config, dataset, out_dir, model=None, log=print):
    """Epoch loop with seeded shuffling, train-only augmentation and
    best-validation checkpointing."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not isinstance(dataset, PatchDataset):
        raise TypeError("train expects a PatchDataset")
    for split in ("train", "val", "test"):
        if not dataset.split_indices[split]:
            raise ValueError(f"dataset has an empty {split!r} split")

    root = Rng(config.seed)
    if model is None:
        _, cfg_cls = MODEL_TYPES[config.model]
        model = build_model(config.model, cfg_cls(**config.model_config),
                            rng=root.split(0))
    (out / "train_config.json").write_text(json.dumps(asdict(config),
                                                      indent=2))
    (out / "model_config.json").write_text(config_to_json(model.config))

    opt = Adam(model.parameters(), config.learning_rate,
               config.beta1, config.beta2, config.eps)
    train_idx = list(dataset.split_indices["train"])
    val_idx = list(dataset.split_indices["val"])
    best_path = out / "best.fenp"
    curve = []
    best_val = np.inf
    best_epoch = -1
    for epoch in range(config.epochs):
        erng = root.split(1).split(epoch)
        order = [train_idx[i] for i in erng.split(0).permutation(
            len(train_idx))]
        epoch_sq = 0.0
        for bi, lo in enumerate(range(0, len(order), config.batch_size)):
            batch = order[lo:lo + config.batch_size]
            x = dataset.batch_arrays(batch)
            if config.augment:
                arng = erng.split(1).split(bi)
                for j in range(len(batch)):
                    x[j, 0], x[j, 1] = augment_pair(
                        x[j, 0], x[j, 1], arng.split(j), config.noise_sigma)
            y = dataset.labels[batch].astype(np.float32)[:, None]
            model.zero_grad()
            pred = model.forward(Tensor(x), mode="train",
                                 rng=erng.split(2).split(bi))
            loss = ops.mse_loss(pred, y)
            loss.backward()
            try:
                opt.step()
            except NumericError as exc:
                raise NumericError(
                    f"epoch {epoch} batch {bi}: {exc}") from exc
            epoch_sq += loss.item() * len(batch)
        train_mse = epoch_sq / len(order)
        val_mse = _eval_mse(model, dataset, val_idx, config.batch_size)
        curve.append((epoch, train_mse, val_mse))
        if val_mse < best_val:
            best_val = val_mse
            best_epoch = epoch
            save_params(best_path, model.parameters())
        if log:
            log(f"epoch {epoch:3d} train_mse {train_mse:.5f} "
                f"val_mse {val_mse:.5f}")
    with open(out / "loss_curve.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["epoch", "train_mse", "val_mse"])
        wr.writerows(curve)
    # leave the model holding its best-validation weights
    best = load_params(best_path)
    for k, p in model.parameters().items():
        p.data = best[k].data.astype(p.data.dtype)
    return TrainResult(model, str(best_path), curve, best_epoch,
                       float(best_val))
