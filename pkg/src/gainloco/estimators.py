"""Terrain classifier and variational state estimator, both trained on the
same stream of normalized observation histories.

The classifier predicts the 4-way terrain class from proprioceptive history.
The estimator regresses the body-frame base velocity and encodes a latent
context vector whose posterior is pulled toward a standard normal prior with
weight beta; its loss has no decoder term. Supervision (terrain label, true
velocity) comes only from privileged simulator state.
"""

from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint, CheckpointEntry
from .env import OBS_DIM
from .nets import Mlp, gaussian_kl_to_standard, softmax, softmax_cross_entropy

N_CLASSES = 4
VELOCITY_DIM = 3
NORM_CLIP = 20.0


@dataclass
class EstimatorConfig:
    obs_dim: int = OBS_DIM
    history_length: int = 6
    latent_dim: int = 16
    beta: float = 0.2
    estimator_hidden: tuple[int, ...] = (128, 64)
    classifier_hidden: tuple[int, ...] = (128, 64)

    @property
    def input_dim(self) -> int:
        return self.obs_dim * self.history_length


class NormalizationStats:
    """Streaming per-component mean/variance (Welford); normalization clips
    to +-NORM_CLIP. Frozen stats refuse further updates (evaluation mode)."""

    def __init__(self, dim: int):
        self.dim = int(dim)
        self.count = 0.0
        self.mean = np.zeros(self.dim)
        self.m2 = np.zeros(self.dim)
        self.frozen = False

    def update(self, x: np.ndarray) -> None:
        if self.frozen:
            raise RuntimeError("normalization stats are frozen")
        x = np.asarray(x, dtype=float)
        self.count += 1.0
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    def update_batch(self, xs: np.ndarray) -> None:
        """Chan's parallel update for a (B, dim) batch."""
        if self.frozen:
            raise RuntimeError("normalization stats are frozen")
        xs = np.asarray(xs, dtype=float)
        nb = float(xs.shape[0])
        if nb == 0:
            return
        mean_b = xs.mean(axis=0)
        m2_b = ((xs - mean_b) ** 2).sum(axis=0)
        delta = mean_b - self.mean
        total = self.count + nb
        self.mean += delta * (nb / total)
        self.m2 += m2_b + delta * delta * (self.count * nb / total)
        self.count = total

    @property
    def variance(self) -> np.ndarray:
        if self.count < 1.0:
            return np.ones(self.dim)
        return np.maximum(self.m2 / self.count, 1e-8)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        z = (np.asarray(x, dtype=float) - self.mean) / np.sqrt(self.variance)
        return np.clip(z, -NORM_CLIP, NORM_CLIP)

    def checkpoint_entry(self) -> CheckpointEntry:
        return CheckpointEntry("normalization",
                               [np.array([self.count]), self.mean, self.m2])

    def load_entry(self, ckpt: Checkpoint) -> None:
        arrays = ckpt.entry("normalization").arrays
        self.count = float(arrays[0][0])
        self.mean = arrays[1].copy()
        self.m2 = arrays[2].copy()
        self.frozen = True


class TerrainClassifier:
    def __init__(self, cfg: EstimatorConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(2)
        self.cfg = cfg
        self.mlp = Mlp([cfg.input_dim, *cfg.classifier_hidden, N_CLASSES], rng, out_gain=0.01)

    def logits(self, history: np.ndarray) -> tuple[np.ndarray, dict]:
        return self.mlp.forward(history)

    def classify(self, history: np.ndarray) -> np.ndarray:
        """Softmax probabilities; class order matches TerrainKind."""
        logits, _ = self.mlp.forward(history)
        return softmax(logits)

    def params(self) -> list[np.ndarray]:
        return self.mlp.params()

    def checkpoint_entries(self) -> list[CheckpointEntry]:
        return [CheckpointEntry("classifier", self.mlp.params(), tuple(self.mlp.widths))]

    def load_entries(self, ckpt: Checkpoint) -> None:
        self.mlp.set_params(ckpt.entry("classifier").arrays)


def classifier_loss(logits: np.ndarray, label: int | np.ndarray) -> tuple[float, np.ndarray]:
    """Cross-entropy against the ground-truth terrain class."""
    return softmax_cross_entropy(logits, label)


class StateEstimator:
    """Encoder producing (v_hat, mu_z, log_sigma_z); the latent sample is
    reparameterized as z = mu + sigma * eps."""

    def __init__(self, cfg: EstimatorConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(3)
        self.cfg = cfg
        out_dim = VELOCITY_DIM + 2 * cfg.latent_dim
        self.mlp = Mlp([cfg.input_dim, *cfg.estimator_hidden, out_dim], rng, out_gain=0.01)

    def split_outputs(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        k = self.cfg.latent_dim
        return (y[..., :VELOCITY_DIM], y[..., VELOCITY_DIM:VELOCITY_DIM + k],
                y[..., VELOCITY_DIM + k:])

    def estimate(self, history: np.ndarray, rng: np.random.Generator | None = None,
                 deterministic: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Returns (v_hat, z, mu_z, log_sigma_z); deterministic mode uses z = mu."""
        y, _ = self.mlp.forward(history)
        v_hat, mu, log_sigma = self.split_outputs(y)
        if deterministic:
            z = mu.copy()
        else:
            if rng is None:
                raise ValueError("sampling requires an rng")
            z = mu + np.exp(log_sigma) * rng.standard_normal(mu.shape)
        return v_hat, z, mu, log_sigma

    def params(self) -> list[np.ndarray]:
        return self.mlp.params()

    def checkpoint_entries(self) -> list[CheckpointEntry]:
        return [CheckpointEntry("estimator", self.mlp.params(), tuple(self.mlp.widths))]

    def load_entries(self, ckpt: Checkpoint) -> None:
        self.mlp.set_params(ckpt.entry("estimator").arrays)


def vae_loss(v_hat: np.ndarray, v_true: np.ndarray, mu: np.ndarray, log_sigma: np.ndarray,
             beta: float) -> tuple[float, float, float]:
    """Velocity regression MSE (mean over the 3 components) plus beta-weighted
    KL to the standard-normal prior. Batched inputs average over the batch.
    Returns (total, mse, kl)."""
    v_hat = np.asarray(v_hat, dtype=float)
    v_true = np.asarray(v_true, dtype=float)
    mse = float(np.mean((v_hat - v_true) ** 2, axis=-1).mean())
    kl = float(np.mean(gaussian_kl_to_standard(mu, log_sigma)))
    return mse + beta * kl, mse, kl
