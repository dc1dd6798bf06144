"""The asymmetric dual-actor controller: a joint actor over the 12
reference-position actions, a gain actor over the 24 PD-offset actions, and
a critic fed with privileged state. Per-actor Gaussians are independent;
total log-probability and entropy are the sums over both actors.

Ablation variants:
  baseline / sa  single joint actor, gains frozen at their initial values
  nc             dual actors, terrain input slot zeroed (no classifier)
  full           dual actors with classifier terrain probabilities
"""

from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint, CheckpointEntry
from .env import ACTION_DIM, OBS_DIM, PRIV_DIM
from .nets import DiagonalGaussian, Mlp, clamp_log_std, gaussian_entropy, gaussian_log_prob
from .sim import N_JOINTS

N_TERRAIN = 4
JOINT_ACTION_DIM = N_JOINTS        # 12
GAIN_ACTION_DIM = 2 * N_JOINTS     # 24

# actions leaving the policy are clipped to this envelope (gain clamping and
# torque clipping provide the physical safety; this bounds the observation
# feedback loop through the last-action slot)
ACTION_CLIP = 100.0

VARIANTS = ("baseline", "sa", "nc", "full")

# Network widths per preset; "desk" halves the full-scale "paper" sizes
# for CPU-budget training.
PRESET_WIDTHS = {
    "paper": {"actor": (512, 256, 128), "critic": (512, 256, 128),
              "estimator": (256, 128), "classifier": (256, 128)},
    "desk": {"actor": (256, 128, 64), "critic": (256, 128, 64),
             "estimator": (128, 64), "classifier": (128, 64)},
}


class VariantError(ValueError):
    pass


@dataclass
class PolicyConfig:
    variant: str = "full"
    obs_dim: int = OBS_DIM
    latent_dim: int = 16
    actor_hidden: tuple[int, ...] = (256, 128, 64)
    critic_hidden: tuple[int, ...] = (256, 128, 64)
    init_log_std: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise VariantError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    @property
    def uses_gain_actor(self) -> bool:
        return self.variant in ("nc", "full")

    @property
    def uses_classifier(self) -> bool:
        return self.variant == "full"

    @property
    def joint_input_dim(self) -> int:
        return self.obs_dim + self.latent_dim

    @property
    def gain_input_dim(self) -> int:
        return self.obs_dim + self.latent_dim + N_TERRAIN


def variant_factory(variant: str, preset: str = "desk", obs_dim: int = OBS_DIM,
                    latent_dim: int = 16) -> PolicyConfig:
    """Resolve an ablation variant name into a concrete policy configuration."""
    variant = variant.strip().lower()
    preset = preset.strip().lower()
    if preset not in PRESET_WIDTHS:
        raise VariantError(f"unknown preset {preset!r}; expected one of {tuple(PRESET_WIDTHS)}")
    widths = PRESET_WIDTHS[preset]
    return PolicyConfig(variant=variant, obs_dim=obs_dim, latent_dim=latent_dim,
                        actor_hidden=widths["actor"], critic_hidden=widths["critic"])


@dataclass
class ActionVector:
    """The divided action space: 12 reference-position actions followed by
    12 P-offset and 12 D-offset actions."""

    a_pos: np.ndarray
    a_p: np.ndarray
    a_d: np.ndarray

    def packed(self) -> np.ndarray:
        return np.concatenate([self.a_pos, self.a_p, self.a_d])

    @classmethod
    def from_packed(cls, a: np.ndarray) -> "ActionVector":
        a = np.asarray(a, dtype=float)
        if a.shape != (ACTION_DIM,):
            raise ValueError(f"packed action must have length {ACTION_DIM}, got {a.shape}")
        return cls(a_pos=a[:N_JOINTS].copy(), a_p=a[N_JOINTS:2 * N_JOINTS].copy(),
                   a_d=a[2 * N_JOINTS:].copy())


class DualActorPolicy:
    def __init__(self, cfg: PolicyConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.joint_actor = Mlp([cfg.joint_input_dim, *cfg.actor_hidden, JOINT_ACTION_DIM], rng)
        self.joint_log_std = np.full(JOINT_ACTION_DIM, cfg.init_log_std)
        if cfg.uses_gain_actor:
            self.gain_actor = Mlp([cfg.gain_input_dim, *cfg.actor_hidden, GAIN_ACTION_DIM], rng)
            self.gain_log_std = np.full(GAIN_ACTION_DIM, cfg.init_log_std)
        else:
            self.gain_actor = None
            self.gain_log_std = None

    # -- wiring ---------------------------------------------------------------

    def terrain_slot(self, terrain_probs: np.ndarray) -> np.ndarray:
        """Terrain input actually fed to the gain actor: classifier
        probabilities for the full variant, zeros for nc."""
        if self.cfg.uses_classifier:
            probs = np.asarray(terrain_probs, dtype=float)
            sums = np.sum(probs, axis=-1)
            if not np.all(np.abs(sums - 1.0) < 1e-6):
                raise ValueError("terrain probabilities must sum to 1")
            return probs
        shape = np.shape(terrain_probs)
        return np.zeros(shape if shape else (N_TERRAIN,))

    def joint_input(self, obs: np.ndarray, latent: np.ndarray) -> np.ndarray:
        return np.concatenate([obs, latent], axis=-1)

    def gain_input(self, obs: np.ndarray, latent: np.ndarray, terrain_probs: np.ndarray) -> np.ndarray:
        return np.concatenate([obs, latent, self.terrain_slot(terrain_probs)], axis=-1)

    # -- acting ---------------------------------------------------------------

    def distributions(self, obs: np.ndarray, latent: np.ndarray,
                      terrain_probs: np.ndarray) -> tuple[DiagonalGaussian, DiagonalGaussian | None]:
        mu_j, _ = self.joint_actor.forward(self.joint_input(obs, latent))
        joint = DiagonalGaussian(mu_j, self.joint_log_std)
        if self.gain_actor is None:
            return joint, None
        mu_g, _ = self.gain_actor.forward(self.gain_input(obs, latent, terrain_probs))
        return joint, DiagonalGaussian(mu_g, self.gain_log_std)

    def act(self, obs: np.ndarray, latent: np.ndarray, terrain_probs: np.ndarray,
            mode: str = "sample", rng: np.random.Generator | None = None) -> tuple[np.ndarray, float]:
        """One action (packed 36-vector) and its total log-probability."""
        a, lp = self.act_batch(np.asarray(obs, dtype=float)[None, :],
                               np.asarray(latent, dtype=float)[None, :],
                               np.asarray(terrain_probs, dtype=float)[None, :],
                               mode=mode, rng=rng)
        return a[0], float(lp[0])

    def act_batch(self, obs: np.ndarray, latent: np.ndarray, terrain_probs: np.ndarray,
                  mode: str = "sample", rng: np.random.Generator | None = None
                  ) -> tuple[np.ndarray, np.ndarray]:
        if mode not in ("sample", "mean"):
            raise ValueError(f"mode must be 'sample' or 'mean', got {mode!r}")
        if mode == "sample" and rng is None:
            raise ValueError("sampling requires an rng")
        n = obs.shape[0]
        mu_j, _ = self.joint_actor.forward(self.joint_input(obs, latent))
        if not np.all(np.isfinite(mu_j)):
            raise FloatingPointError("non-finite joint actor output")
        if mode == "sample":
            a_j = mu_j + np.exp(self.joint_log_std) * rng.standard_normal(mu_j.shape)
        else:
            a_j = mu_j
        a_j = np.clip(a_j, -ACTION_CLIP, ACTION_CLIP)
        log_prob = gaussian_log_prob(mu_j, self.joint_log_std, a_j)

        actions = np.zeros((n, ACTION_DIM))
        actions[:, :JOINT_ACTION_DIM] = a_j
        if self.gain_actor is not None:
            mu_g, _ = self.gain_actor.forward(self.gain_input(obs, latent, terrain_probs))
            if not np.all(np.isfinite(mu_g)):
                raise FloatingPointError("non-finite gain actor output")
            if mode == "sample":
                a_g = mu_g + np.exp(self.gain_log_std) * rng.standard_normal(mu_g.shape)
            else:
                a_g = mu_g
            a_g = np.clip(a_g, -ACTION_CLIP, ACTION_CLIP)
            log_prob = log_prob + gaussian_log_prob(mu_g, self.gain_log_std, a_g)
            actions[:, JOINT_ACTION_DIM:] = a_g
        return actions, np.atleast_1d(log_prob)

    def log_prob_of(self, obs: np.ndarray, latent: np.ndarray, terrain_probs: np.ndarray,
                    actions: np.ndarray) -> np.ndarray:
        """Log-probability of stored packed actions under the current policy."""
        mu_j, _ = self.joint_actor.forward(self.joint_input(obs, latent))
        lp = gaussian_log_prob(mu_j, self.joint_log_std, actions[..., :JOINT_ACTION_DIM])
        if self.gain_actor is not None:
            mu_g, _ = self.gain_actor.forward(self.gain_input(obs, latent, terrain_probs))
            lp = lp + gaussian_log_prob(mu_g, self.gain_log_std, actions[..., JOINT_ACTION_DIM:])
        return np.atleast_1d(lp)

    def entropy(self) -> float:
        """Total policy entropy: the sum of the per-actor entropies."""
        h = gaussian_entropy(self.joint_log_std)
        if self.gain_log_std is not None:
            h += gaussian_entropy(self.gain_log_std)
        return h

    # -- parameters -------------------------------------------------------------

    def params(self) -> list[np.ndarray]:
        out = self.joint_actor.params() + [self.joint_log_std]
        if self.gain_actor is not None:
            out += self.gain_actor.params() + [self.gain_log_std]
        return out

    def clamp_log_stds(self) -> None:
        clamp_log_std(self.joint_log_std)
        if self.gain_log_std is not None:
            clamp_log_std(self.gain_log_std)

    def checkpoint_entries(self) -> list[CheckpointEntry]:
        entries = [
            CheckpointEntry("joint_actor", self.joint_actor.params(),
                            tuple(self.joint_actor.widths)),
            CheckpointEntry("joint_log_std", [self.joint_log_std]),
        ]
        if self.gain_actor is not None:
            entries.append(CheckpointEntry("gain_actor", self.gain_actor.params(),
                                           tuple(self.gain_actor.widths)))
            entries.append(CheckpointEntry("gain_log_std", [self.gain_log_std]))
        return entries

    def load_entries(self, ckpt: Checkpoint) -> None:
        self.joint_actor.set_params(ckpt.entry("joint_actor").arrays)
        self.joint_log_std = ckpt.entry("joint_log_std").arrays[0].copy()
        if self.gain_actor is not None:
            self.gain_actor.set_params(ckpt.entry("gain_actor").arrays)
            self.gain_log_std = ckpt.entry("gain_log_std").arrays[0].copy()


class Critic:
    """Scalar state-value network over (observation, privileged observation)."""

    def __init__(self, cfg: PolicyConfig, rng: np.random.Generator | None = None,
                 priv_dim: int = PRIV_DIM):
        rng = rng if rng is not None else np.random.default_rng(1)
        self.mlp = Mlp([cfg.obs_dim + priv_dim, *cfg.critic_hidden, 1], rng, out_gain=1.0)

    def value(self, obs: np.ndarray, priv: np.ndarray) -> float:
        y, _ = self.mlp.forward(np.concatenate([obs, priv], axis=-1))
        return float(y[0])

    def value_batch(self, obs: np.ndarray, priv: np.ndarray) -> np.ndarray:
        y, _ = self.mlp.forward(np.concatenate([obs, priv], axis=-1))
        return y[:, 0]

    def params(self) -> list[np.ndarray]:
        return self.mlp.params()

    def checkpoint_entries(self) -> list[CheckpointEntry]:
        return [CheckpointEntry("critic", self.mlp.params(), tuple(self.mlp.widths))]

    def load_entries(self, ckpt: Checkpoint) -> None:
        self.mlp.set_params(ckpt.entry("critic").arrays)


def make_policy(variant: str, preset: str = "desk", rng: np.random.Generator | None = None,
                obs_dim: int = OBS_DIM, latent_dim: int = 16) -> DualActorPolicy:
    return DualActorPolicy(variant_factory(variant, preset, obs_dim, latent_dim), rng)
