"""Rollout collection, generalized advantage estimation and the clipped
surrogate policy update, plus the interleaved supervised updates for the
terrain classifier and state estimator.

One Adam instance spans both actors and the critic (single combined loss:
-surrogate + value_coef * value MSE - entropy_coef * entropy); the classifier
and estimator each own a separate Adam. Estimator outputs are treated as
constants by the actors (no gradient flows across that boundary).
"""

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .env import ACTION_DIM, OBS_DIM, PRIV_DIM, REWARD_TERMS, EnvConfig
from .estimators import EstimatorConfig, NormalizationStats, StateEstimator, TerrainClassifier, vae_loss
from .nets import (AdamState, adam_step, clip_global_norm, gaussian_log_prob,
                   softmax_cross_entropy)
from .policy import (Critic, DualActorPolicy, JOINT_ACTION_DIM, N_TERRAIN, PRESET_WIDTHS,
                     VariantError, variant_factory)
from .vecenv import VecEnv


@dataclass
class TrainConfig:
    lr: float = 1e-3
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    entropy_coef: float = 0.01
    value_coef: float = 1.0
    epochs: int = 5
    minibatches: int = 4
    n_envs: int = 64
    n_steps: int = 24
    iterations: int = 300
    checkpoint_every: int = 500
    max_grad_norm: float = 1.0
    obs_mode: str = "oracle"          # "oracle" | "estimated"
    strict_deterministic: bool = True  # sequential collection (the only implementation)

    def __post_init__(self):
        if not 0.0 < self.clip < 1.0:
            raise ValueError(f"clip must be in (0, 1), got {self.clip}")
        for name in ("lr", "gamma", "lam", "entropy_coef", "value_coef", "epochs",
                     "minibatches", "n_envs", "n_steps", "iterations", "max_grad_norm"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.obs_mode not in ("oracle", "estimated"):
            raise ValueError(f"obs_mode must be 'oracle' or 'estimated', got {self.obs_mode!r}")


# probability-ratio log clamp: ratios never overflow exp and extreme
# excursions contribute bounded gradients
RATIO_LOG_CLAMP = 20.0


class RolloutBuffer:
    """Fixed-size storage for one rollout: n_steps x n_envs transitions."""

    def __init__(self, n_steps: int, n_envs: int, hist_dim: int, latent_dim: int):
        t, n = int(n_steps), int(n_envs)
        self.n_steps, self.n_envs = t, n
        self.obs = np.zeros((t, n, OBS_DIM))
        self.priv = np.zeros((t, n, PRIV_DIM))
        self.hist = np.zeros((t, n, hist_dim))
        self.latent = np.zeros((t, n, latent_dim))
        self.terrain_probs = np.zeros((t, n, N_TERRAIN))
        self.actions = np.zeros((t, n, ACTION_DIM))
        self.log_probs = np.zeros((t, n))
        self.values = np.zeros((t, n))
        self.rewards = np.zeros((t, n))
        self.dones = np.zeros((t, n), dtype=bool)
        self.terrain_labels = np.zeros((t, n), dtype=int)
        self.true_velocity = np.zeros((t, n, 3))
        self.last_values = np.zeros(n)
        self.advantages = np.zeros((t, n))
        self.returns = np.zeros((t, n))
        self.gae_computed = False

    @property
    def size(self) -> int:
        return self.n_steps * self.n_envs

    def flat(self, arr: np.ndarray) -> np.ndarray:
        return arr.reshape(self.size, *arr.shape[2:])


def compute_gae(buffer: RolloutBuffer, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Fills buffer.advantages (normalized over the whole batch) and
    buffer.returns (raw advantage + value); also returns them."""
    t = buffer.n_steps
    adv = np.zeros((t, buffer.n_envs))
    next_adv = np.zeros(buffer.n_envs)
    next_value = buffer.last_values
    for step in range(t - 1, -1, -1):
        not_done = 1.0 - buffer.dones[step]
        delta = buffer.rewards[step] + gamma * next_value * not_done - buffer.values[step]
        next_adv = delta + gamma * lam * not_done * next_adv
        adv[step] = next_adv
        next_value = buffer.values[step]
    buffer.returns = adv + buffer.values
    mean, std = adv.mean(), adv.std()
    buffer.advantages = (adv - mean) / (std + 1e-8)
    buffer.gae_computed = True
    return buffer.advantages, buffer.returns


# ---------------------------------------------------------------------------
# PPO loss and gradients

@dataclass
class Minibatch:
    obs: np.ndarray
    priv: np.ndarray
    latent: np.ndarray
    terrain_probs: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray


def minibatch_from_buffer(buffer: RolloutBuffer, idx: np.ndarray) -> Minibatch:
    return Minibatch(
        obs=buffer.flat(buffer.obs)[idx],
        priv=buffer.flat(buffer.priv)[idx],
        latent=buffer.flat(buffer.latent)[idx],
        terrain_probs=buffer.flat(buffer.terrain_probs)[idx],
        actions=buffer.flat(buffer.actions)[idx],
        old_log_probs=buffer.flat(buffer.log_probs)[idx],
        advantages=buffer.flat(buffer.advantages)[idx],
        returns=buffer.flat(buffer.returns)[idx],
    )


def ppo_minibatch_loss(policy: DualActorPolicy, critic: Critic, mb: Minibatch,
                       cfg: TrainConfig) -> float:
    """Scalar PPO loss of a minibatch under the current parameters. Pure
    evaluation; the finite-difference oracle probes this."""
    new_lp = policy.log_prob_of(mb.obs, mb.latent, mb.terrain_probs, mb.actions)
    ratio = np.exp(np.clip(new_lp - mb.old_log_probs, -RATIO_LOG_CLAMP, RATIO_LOG_CLAMP))
    surr1 = ratio * mb.advantages
    surr2 = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * mb.advantages
    policy_loss = -float(np.minimum(surr1, surr2).mean())
    values = critic.value_batch(mb.obs, mb.priv)
    value_loss = float(np.mean((values - mb.returns) ** 2))
    return policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * policy.entropy()


def ppo_minibatch_grads(policy: DualActorPolicy, critic: Critic, mb: Minibatch,
                        cfg: TrainConfig) -> tuple[float, list[np.ndarray], dict]:
    """Loss, gradients (ordered policy.params() + critic.params()) and stats."""
    n = mb.obs.shape[0]

    joint_in = policy.joint_input(mb.obs, mb.latent)
    mu_j, cache_j = policy.joint_actor.forward(joint_in)
    a_j = mb.actions[:, :JOINT_ACTION_DIM]
    new_lp = gaussian_log_prob(mu_j, policy.joint_log_std, a_j)
    if policy.gain_actor is not None:
        gain_in = policy.gain_input(mb.obs, mb.latent, mb.terrain_probs)
        mu_g, cache_g = policy.gain_actor.forward(gain_in)
        a_g = mb.actions[:, JOINT_ACTION_DIM:]
        new_lp = new_lp + gaussian_log_prob(mu_g, policy.gain_log_std, a_g)

    log_gap = new_lp - mb.old_log_probs
    in_range = np.abs(log_gap) < RATIO_LOG_CLAMP
    ratio = np.exp(np.clip(log_gap, -RATIO_LOG_CLAMP, RATIO_LOG_CLAMP))
    surr1 = ratio * mb.advantages
    surr2 = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * mb.advantages
    policy_loss = -float(np.minimum(surr1, surr2).mean())
    # gradient flows through the unclipped branch where it attains the min;
    # beyond the log clamp the ratio is constant and contributes none
    use_unclipped = (surr1 <= surr2) & in_range
    dlp = -(mb.advantages * ratio * use_unclipped) / n

    critic_in = np.concatenate([mb.obs, mb.priv], axis=-1)
    v_out, cache_v = critic.mlp.forward(critic_in)
    values = v_out[:, 0]
    verr = values - mb.returns
    value_loss = float(np.mean(verr ** 2))
    dv = (cfg.value_coef * 2.0 * verr / n)[:, None]

    entropy = policy.entropy()
    loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy

    # joint actor gradients
    std2_j = np.exp(2.0 * policy.joint_log_std)
    z_j = (a_j - mu_j) / np.exp(policy.joint_log_std)
    dmu_j = dlp[:, None] * (a_j - mu_j) / std2_j
    grads_j, _ = policy.joint_actor.backward(cache_j, dmu_j)
    dlogstd_j = (dlp[:, None] * (z_j * z_j - 1.0)).sum(axis=0) - cfg.entropy_coef

    grads = grads_j + [dlogstd_j]
    if policy.gain_actor is not None:
        std2_g = np.exp(2.0 * policy.gain_log_std)
        z_g = (a_g - mu_g) / np.exp(policy.gain_log_std)
        dmu_g = dlp[:, None] * (a_g - mu_g) / std2_g
        grads_g, _ = policy.gain_actor.backward(cache_g, dmu_g)
        dlogstd_g = (dlp[:, None] * (z_g * z_g - 1.0)).sum(axis=0) - cfg.entropy_coef
        grads += grads_g + [dlogstd_g]

    grads_v, _ = critic.mlp.backward(cache_v, dv)
    grads += grads_v

    stats = {
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": entropy,
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > cfg.clip)),
        "approx_kl": float(np.mean(mb.old_log_probs - new_lp)),
    }
    return loss, grads, stats


def ppo_update(policy: DualActorPolicy, critic: Critic, buffer: RolloutBuffer,
               cfg: TrainConfig, adam: AdamState, rng: np.random.Generator) -> dict:
    """Epochs of minibatch Adam steps on the combined actor-critic loss."""
    if not buffer.gae_computed:
        raise RuntimeError("compute_gae must run before ppo_update")
    params = policy.params() + critic.params()
    agg: dict[str, float] = {}
    count = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(buffer.size)
        for chunk in np.array_split(perm, cfg.minibatches):
            mb = minibatch_from_buffer(buffer, chunk)
            loss, grads, stats = ppo_minibatch_grads(policy, critic, mb, cfg)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite PPO loss {loss}")
            clip_global_norm(grads, cfg.max_grad_norm)
            adam_step(params, grads, adam)
            policy.clamp_log_stds()
            for key, val in stats.items():
                agg[key] = agg.get(key, 0.0) + val
            count += 1
    return {key: val / count for key, val in agg.items()}


def supervised_update(classifier: TerrainClassifier | None, estimator: StateEstimator,
                      clf_adam: AdamState | None, est_adam: AdamState,
                      buffer: RolloutBuffer, cfg: TrainConfig,
                      rng: np.random.Generator, beta: float) -> dict:
    """One pass of minibatch Adam updates on rollout histories: cross-entropy
    for the classifier, velocity MSE + beta * KL for the estimator."""
    hist = buffer.flat(buffer.hist)
    labels = buffer.flat(buffer.terrain_labels)
    v_true = buffer.flat(buffer.true_velocity)
    out = {"classifier_loss": 0.0, "vae_loss": 0.0, "vae_mse": 0.0, "vae_kl": 0.0}
    perm = rng.permutation(buffer.size)
    chunks = np.array_split(perm, cfg.minibatches)
    for chunk in chunks:
        h = hist[chunk]
        if classifier is not None:
            logits, cache = classifier.logits(h)
            clf_loss, dlogits = softmax_cross_entropy(logits, labels[chunk])
            grads, _ = classifier.mlp.backward(cache, dlogits)
            clip_global_norm(grads, cfg.max_grad_norm)
            adam_step(classifier.params(), grads, clf_adam)
            out["classifier_loss"] += clf_loss
        y, cache = estimator.mlp.forward(h)
        v_hat, mu, log_sigma = estimator.split_outputs(y)
        total, mse, kl = vae_loss(v_hat, v_true[chunk], mu, log_sigma, beta)
        n = h.shape[0]
        dy = np.empty_like(y)
        dy[:, :3] = 2.0 * (v_hat - v_true[chunk]) / 3.0 / n
        dy[:, 3:3 + estimator.cfg.latent_dim] = beta * mu / n
        dy[:, 3 + estimator.cfg.latent_dim:] = beta * (np.exp(2.0 * log_sigma) - 1.0) / n
        grads, _ = estimator.mlp.backward(cache, dy)
        clip_global_norm(grads, cfg.max_grad_norm)
        adam_step(estimator.params(), grads, est_adam)
        out["vae_loss"] += total
        out["vae_mse"] += mse
        out["vae_kl"] += kl
    return {key: val / len(chunks) for key, val in out.items()}


# ---------------------------------------------------------------------------
# trainer

METRIC_COLUMNS = (
    ["iteration", "mean_step_reward", "mean_episode_return", "episodes_done",
     "mean_eff_p", "mean_eff_d"]
    + [f"rew_{name}" for name in REWARD_TERMS]
    + ["policy_loss", "value_loss", "entropy", "clip_fraction", "approx_kl",
       "classifier_loss", "vae_loss", "vae_mse", "vae_kl"]
)


@dataclass
class TrainResult:
    run_dir: Path
    metrics_path: Path
    checkpoint_path: Path
    iterations: int
    final_mean_reward: float


class Trainer:
    def __init__(self, train_cfg: TrainConfig, env_cfg: EnvConfig, est_cfg: EstimatorConfig,
                 variant: str = "full", preset: str = "desk", seed: int = 0):
        if preset not in PRESET_WIDTHS:
            raise VariantError(f"unknown preset {preset!r}")
        widths = PRESET_WIDTHS[preset]
        est_cfg = replace(est_cfg, estimator_hidden=widths["estimator"],
                          classifier_hidden=widths["classifier"],
                          history_length=env_cfg.history_length)
        self.train_cfg = train_cfg
        self.env_cfg = env_cfg
        self.est_cfg = est_cfg
        self.variant = variant
        self.preset = preset
        self.seed = seed

        root = np.random.SeedSequence(seed)
        seeds = root.spawn(5)
        self.vec = VecEnv(env_cfg, train_cfg.n_envs, seed=seed)
        self.policy = DualActorPolicy(variant_factory(variant, preset, latent_dim=est_cfg.latent_dim),
                                      np.random.default_rng(seeds[0]))
        self.critic = Critic(self.policy.cfg, np.random.default_rng(seeds[1]))
        self.estimator = StateEstimator(est_cfg, np.random.default_rng(seeds[2]))
        self.classifier = (TerrainClassifier(est_cfg, np.random.default_rng(seeds[3]))
                           if self.policy.cfg.uses_classifier else None)
        self.stats = NormalizationStats(OBS_DIM)
        self.rng = np.random.default_rng(seeds[4])

        self.adam = AdamState.for_params(self.policy.params() + self.critic.params(),
                                         lr=train_cfg.lr)
        self.est_adam = AdamState.for_params(self.estimator.params(), lr=train_cfg.lr)
        self.clf_adam = (AdamState.for_params(self.classifier.params(), lr=train_cfg.lr)
                         if self.classifier is not None else None)

        h = env_cfg.history_length
        self.hist_buf = np.zeros((train_cfg.n_envs, h, OBS_DIM))
        self.buffer = RolloutBuffer(train_cfg.n_steps, train_cfg.n_envs,
                                    hist_dim=h * OBS_DIM, latent_dim=est_cfg.latent_dim)
        self._last_obs = self.vec.observations()
        self._last_priv = self.vec.privileged()

    # -- rollout ---------------------------------------------------------------

    def _actor_obs(self, obs: np.ndarray, v_hat: np.ndarray) -> np.ndarray:
        if self.train_cfg.obs_mode == "estimated":
            obs = obs.copy()
            obs[:, 27:29] = v_hat[:, :2]
        return obs

    def collect_rollouts(self) -> dict:
        cfg = self.train_cfg
        buf = self.buffer
        buf.gae_computed = False
        eff_p_sum = 0.0
        eff_d_sum = 0.0
        term_sums = np.zeros(len(REWARD_TERMS))
        ep_returns: list[float] = []
        n = cfg.n_envs

        for t in range(cfg.n_steps):
            obs = self._last_obs
            priv = self._last_priv
            self.stats.update_batch(obs)
            norm = self.stats.normalize(obs)
            self.hist_buf[:, :-1] = self.hist_buf[:, 1:]
            self.hist_buf[:, -1] = norm
            hist = self.hist_buf.reshape(n, -1)

            if self.classifier is not None:
                probs = self.classifier.classify(hist)
            else:
                probs = np.zeros((n, N_TERRAIN))
            v_hat, z, _, _ = self.estimator.estimate(hist, rng=self.rng)
            actor_obs = self._actor_obs(obs, v_hat)

            actions, log_probs = self.policy.act_batch(actor_obs, z, probs,
                                                       mode="sample", rng=self.rng)
            values = self.critic.value_batch(actor_obs, priv)

            labels = self.vec.kind_idx.copy()
            true_vel = self.vec.true_base_velocity()
            res = self.vec.step(actions)

            buf.obs[t] = actor_obs
            buf.priv[t] = priv
            buf.hist[t] = hist
            buf.latent[t] = z
            buf.terrain_probs[t] = probs
            buf.actions[t] = actions
            buf.log_probs[t] = log_probs
            buf.values[t] = values
            buf.rewards[t] = res.reward_total
            buf.dones[t] = res.done
            buf.terrain_labels[t] = labels
            buf.true_velocity[t] = true_vel

            eff_p_sum += float(res.effective_p.mean())
            eff_d_sum += float(res.effective_d.mean())
            term_sums += res.reward_terms.mean(axis=0)
            ep_returns.extend(res.episode_return[res.done].tolist())
            self.hist_buf[res.done] = 0.0
            self._last_obs = res.obs
            self._last_priv = res.priv

        buf.last_values = self.critic.value_batch(self._last_obs, self._last_priv)
        return {
            "mean_step_reward": float(buf.rewards.mean()),
            "mean_episode_return": float(np.mean(ep_returns)) if ep_returns else 0.0,
            "episodes_done": float(len(ep_returns)),
            "mean_eff_p": eff_p_sum / cfg.n_steps,
            "mean_eff_d": eff_d_sum / cfg.n_steps,
            "reward_terms": term_sums / cfg.n_steps,
        }

    # -- persistence -------------------------------------------------------------

    def checkpoint_meta(self) -> dict[str, str]:
        return {
            "variant": self.variant,
            "preset": self.preset,
            "seed": str(self.seed),
            "obs_dim": str(OBS_DIM),
            "latent_dim": str(self.est_cfg.latent_dim),
            "history_length": str(self.env_cfg.history_length),
            "obs_mode": self.train_cfg.obs_mode,
            "version": __version__,
        }

    def save_checkpoint(self, path: str | Path) -> None:
        entries = (self.policy.checkpoint_entries() + self.critic.checkpoint_entries()
                   + self.estimator.checkpoint_entries()
                   + [self.stats.checkpoint_entry()])
        if self.classifier is not None:
            entries += self.classifier.checkpoint_entries()
        save_checkpoint(path, Checkpoint(entries=entries, meta=self.checkpoint_meta()))

    # -- main loop -----------------------------------------------------------------

    def train(self, out_dir: str | Path, log=print) -> TrainResult:
        cfg = self.train_cfg
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.csv"
        final_path = out_dir / "checkpoint_final.bin"
        mean_reward = 0.0
        with metrics_path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRIC_COLUMNS)
            for it in range(1, cfg.iterations + 1):
                roll = self.collect_rollouts()
                compute_gae(self.buffer, cfg.gamma, cfg.lam)
                upd = ppo_update(self.policy, self.critic, self.buffer, cfg, self.adam, self.rng)
                sup = supervised_update(self.classifier, self.estimator, self.clf_adam,
                                        self.est_adam, self.buffer, cfg, self.rng,
                                        self.est_cfg.beta)
                mean_reward = roll["mean_step_reward"]
                row = ([it, roll["mean_step_reward"], roll["mean_episode_return"],
                        roll["episodes_done"], roll["mean_eff_p"], roll["mean_eff_d"]]
                       + list(roll["reward_terms"])
                       + [upd["policy_loss"], upd["value_loss"], upd["entropy"],
                          upd["clip_fraction"], upd["approx_kl"],
                          sup["classifier_loss"], sup["vae_loss"], sup["vae_mse"], sup["vae_kl"]])
                writer.writerow([repr(float(v)) if isinstance(v, float) else str(v) for v in row])
                if it % cfg.checkpoint_every == 0 and it < cfg.iterations:
                    self.save_checkpoint(out_dir / f"checkpoint_{it:06d}.bin")
                if log is not None and (it % 50 == 0 or it == 1):
                    log(f"iter {it:5d}  reward/step {mean_reward:8.4f}  "
                        f"eff_P {roll['mean_eff_p']:6.2f}  eff_D {roll['mean_eff_d']:5.3f}  "
                        f"entropy {upd['entropy']:6.2f}")
        self.save_checkpoint(final_path)
        return TrainResult(run_dir=out_dir, metrics_path=metrics_path,
                           checkpoint_path=final_path, iterations=cfg.iterations,
                           final_mean_reward=mean_reward)


# ---------------------------------------------------------------------------
# checkpoint loading for evaluation

@dataclass
class PolicyBundle:
    policy: DualActorPolicy
    estimator: StateEstimator
    classifier: TerrainClassifier | None
    stats: NormalizationStats
    meta: dict[str, str]

    @property
    def variant(self) -> str:
        return self.meta["variant"]


def load_policy_bundle(path: str | Path) -> PolicyBundle:
    ckpt = load_checkpoint(path)
    meta = ckpt.meta
    try:
        variant = meta["variant"]
        preset = meta["preset"]
        latent = int(meta["latent_dim"])
        history = int(meta["history_length"])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint {path} missing metadata key {exc}") from exc
    widths = PRESET_WIDTHS[preset]
    est_cfg = EstimatorConfig(latent_dim=latent, history_length=history,
                              estimator_hidden=widths["estimator"],
                              classifier_hidden=widths["classifier"])
    policy = DualActorPolicy(variant_factory(variant, preset, latent_dim=latent))
    policy.load_entries(ckpt)
    estimator = StateEstimator(est_cfg)
    estimator.load_entries(ckpt)
    classifier = None
    if policy.cfg.uses_classifier:
        classifier = TerrainClassifier(est_cfg)
        classifier.load_entries(ckpt)
    stats = NormalizationStats(OBS_DIM)
    stats.load_entry(ckpt)
    return PolicyBundle(policy=policy, estimator=estimator, classifier=classifier,
                        stats=stats, meta=meta)
