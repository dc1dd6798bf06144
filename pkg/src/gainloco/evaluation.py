"""Metric suite and ablation harness.

Every metric is a pure function of an episode trace (the per-step CSV the
environment exports), so any report can be recomputed from trace files alone.
Evaluation episodes run the deterministic mean action with frozen
normalization stats and the estimator's mean latent; base velocity entering
the actors comes from the estimator ("estimated" mode) unless overridden.
"""

import csv
import dataclasses
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .env import (Env, EnvConfig, ObservationHistory, TraceRecorder, OBS_DIM,
                  build_observation)
from .estimators import N_CLASSES, NormalizationStats, TerrainClassifier, classifier_loss
from .nets import AdamState, adam_step, clip_global_norm
from .policy import N_TERRAIN
from .ppo import PolicyBundle, load_policy_bundle
from .sim import N_JOINTS, N_LEGS
from .terrain import TerrainKind
from .vecenv import VecEnv


class EvalError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# trace metrics

def _require_steps(trace: dict) -> int:
    n = len(trace["time"])
    if n == 0:
        raise EvalError("empty trace")
    return n


def velocity_rmse(trace: dict, cmd: tuple[float, float] | None = None) -> float:
    """RMS of the planar velocity-tracking error norm over the trace. When
    cmd is None the per-step command columns are used."""
    _require_steps(trace)
    if cmd is None:
        cx, cy = trace["cmd_vx"], trace["cmd_vy"]
    else:
        cx, cy = float(cmd[0]), float(cmd[1])
    err2 = (cx - trace["vx"]) ** 2 + (cy - trace["vy"]) ** 2
    return float(np.sqrt(np.mean(err2)))


def _tau_matrix(trace: dict) -> np.ndarray:
    return np.stack([trace[f"tau_{i}"] for i in range(N_JOINTS)], axis=1)


def _qd_matrix(trace: dict) -> np.ndarray:
    return np.stack([trace[f"qd_{i}"] for i in range(N_JOINTS)], axis=1)


def mean_power(trace: dict) -> float:
    """Average over steps of the per-step mean over the 12 joints of
    |torque * joint velocity|."""
    _require_steps(trace)
    tau = _tau_matrix(trace)
    qd = _qd_matrix(trace)
    return float(np.mean(np.abs(tau * qd).mean(axis=1)))


def mean_torque(trace: dict) -> float:
    _require_steps(trace)
    return float(np.mean(np.abs(_tau_matrix(trace))))


def torque_variance(trace: dict) -> float:
    """Population variance of the per-joint mean |torque| across the 12 joints."""
    _require_steps(trace)
    per_joint = np.abs(_tau_matrix(trace)).mean(axis=0)
    return float(np.var(per_joint))


def mean_effective_gains(trace: dict) -> tuple[float, float]:
    _require_steps(trace)
    p = np.mean([trace[f"p_gain_{i}"] for i in range(N_JOINTS)])
    d = np.mean([trace[f"d_gain_{i}"] for i in range(N_JOINTS)])
    return float(p), float(d)


def per_leg_gains(trace: dict) -> tuple[np.ndarray, np.ndarray]:
    """Mean effective P and D per leg (each leg aggregates its 3 joints
    by the mean), order FL/FR/RL/RR."""
    _require_steps(trace)
    p = np.array([np.mean([trace[f"p_gain_{3 * leg + j}"] for j in range(3)])
                  for leg in range(4)])
    d = np.array([np.mean([trace[f"d_gain_{3 * leg + j}"] for j in range(3)])
                  for leg in range(4)])
    return p, d


def gain_trajectory(trace: dict) -> dict[str, np.ndarray]:
    """Per-step mean effective P and D gains, for gain-progression plots."""
    _require_steps(trace)
    p = np.mean([trace[f"p_gain_{i}"] for i in range(N_JOINTS)], axis=0)
    d = np.mean([trace[f"d_gain_{i}"] for i in range(N_JOINTS)], axis=0)
    return {"time": trace["time"], "mean_p": p, "mean_d": d}


def write_gain_trajectory_csv(trace: dict, path: str | Path) -> None:
    traj = gain_trajectory(trace)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "mean_p", "mean_d"])
        for t, p, d in zip(traj["time"], traj["mean_p"], traj["mean_d"]):
            writer.writerow([repr(float(t)), repr(float(p)), repr(float(d))])


def episode_success(trace: dict, max_steps: int) -> bool:
    """An episode succeeds when it was never terminated early."""
    n = _require_steps(trace)
    ended_early = trace["done"][-1] > 0.5 and n < max_steps
    return not ended_early


# ---------------------------------------------------------------------------
# classifier evaluation

@dataclass
class ClassifierReport:
    confusion: np.ndarray                   # (4, 4) rows true, cols predicted
    per_class: dict[str, np.ndarray]        # accuracy/precision/recall/f1 per class
    overall: dict[str, float]               # macro averages + overall accuracy
    undefined: list[str] = dc_field(default_factory=list)

    CLASS_NAMES = tuple(k.name for k in TerrainKind)
    METRICS = ("accuracy", "precision", "recall", "f1")

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["confusion_row_true_col_pred"] + list(self.CLASS_NAMES))
            for i, name in enumerate(self.CLASS_NAMES):
                writer.writerow([name] + [int(v) for v in self.confusion[i]])
            writer.writerow([])
            writer.writerow(["class"] + list(self.METRICS))
            for i, name in enumerate(self.CLASS_NAMES):
                writer.writerow([name] + [repr(float(self.per_class[m][i])) for m in self.METRICS])
            writer.writerow(["overall"] + [repr(float(self.overall[m])) for m in self.METRICS])

    def format_text(self) -> str:
        lines = ["terrain class    accuracy  precision  recall    f1"]
        for i, name in enumerate(self.CLASS_NAMES):
            vals = [self.per_class[m][i] for m in self.METRICS]
            lines.append(f"{name:<16s} " + "  ".join(f"{100 * v:7.1f}%" for v in vals))
        vals = [self.overall[m] for m in self.METRICS]
        lines.append(f"{'overall avg':<16s} " + "  ".join(f"{100 * v:7.1f}%" for v in vals))
        return "\n".join(lines)


def classifier_report(clf: TerrainClassifier, histories: np.ndarray,
                      labels: np.ndarray) -> ClassifierReport:
    """One-vs-rest accuracy/precision/recall/F1 per class from a labeled
    evaluation set, with macro-averaged overall row."""
    labels = np.asarray(labels, dtype=int)
    if len(labels) == 0:
        raise EvalError("empty evaluation set")
    preds = np.argmax(clf.classify(histories), axis=-1)
    confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=int)
    for t, p in zip(labels, preds):
        confusion[t, p] += 1
    total = confusion.sum()
    per_class = {m: np.zeros(N_CLASSES) for m in ClassifierReport.METRICS}
    undefined = []
    for c in range(N_CLASSES):
        tp = confusion[c, c]
        fn = confusion[c].sum() - tp
        fp = confusion[:, c].sum() - tp
        tn = total - tp - fn - fp
        if confusion[c].sum() == 0:
            undefined.append(ClassifierReport.CLASS_NAMES[c])
        per_class["accuracy"][c] = (tp + tn) / total
        per_class["precision"][c] = tp / (tp + fp) if tp + fp > 0 else 0.0
        per_class["recall"][c] = tp / (tp + fn) if tp + fn > 0 else 0.0
        pr, rc = per_class["precision"][c], per_class["recall"][c]
        per_class["f1"][c] = 2 * pr * rc / (pr + rc) if pr + rc > 0 else 0.0
    overall = {m: float(per_class[m].mean()) for m in ClassifierReport.METRICS}
    overall["overall_accuracy"] = float(np.trace(confusion) / total)
    return ClassifierReport(confusion=confusion, per_class=per_class, overall=overall,
                            undefined=undefined)


# ---------------------------------------------------------------------------
# synthetic labeled rollouts for classifier training/evaluation

# trot phase offsets per leg FL/FR/RL/RR (diagonal pairs in phase)
_TROT_PHASE = np.array([0.0, np.pi, np.pi, 0.0])

# terrain sampling for labeled rollouts is biased toward clearly separable
# instances: strong roughness, non-trivial stair rises
SYNTHETIC_ENV_OVERRIDES = {"rough_amplitude_range": (0.05, 0.08),
                           "stair_rise_range": (0.05, 0.12)}


def scripted_trot_actions(t_sec: float, rng: np.random.Generator, freqs: np.ndarray,
                          noise: float = 0.02, hip_amp: float = 0.5,
                          knee_amp: float = 1.3) -> np.ndarray:
    """Open-loop trot over the position-action slice: the hips swing
    sinusoidally and the knees fold during the swing phase. Gain actions stay
    zero; a small dither keeps contacts varied."""
    n = len(freqs)
    ph = 2.0 * np.pi * freqs[:, None] * t_sec + _TROT_PHASE[None, :]
    swing = np.sin(ph) > 0
    a_pos = np.zeros((n, N_LEGS, 3))
    a_pos[:, :, 1] = hip_amp * np.cos(ph)
    a_pos[:, :, 2] = np.where(swing, knee_amp * np.sin(ph), 0.0)
    actions = np.zeros((n, 3 * N_JOINTS))
    actions[:, :N_JOINTS] = a_pos.reshape(n, N_JOINTS)
    actions += rng.normal(size=actions.shape) * noise
    return actions


def gather_labeled_histories(env_cfg: EnvConfig, seed: int, rounds: int,
                             stats: NormalizationStats, update_stats: bool,
                             steps_per_round: int = 76, n_envs: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Trot-driven rollouts over freshly sampled terrains of all configured
    kinds; returns (normalized history matrix, terrain labels). Each round
    uses new terrain instances so classes are sampled with instance variety."""
    cfg = dataclasses.replace(env_cfg, **SYNTHETIC_ENV_OVERRIDES)
    h = cfg.history_length
    hists, labels = [], []
    for r in range(rounds):
        vec = VecEnv(cfg, n_envs=n_envs, seed=seed + r)
        rng = np.random.default_rng(seed + 5000 + r)
        freqs = rng.uniform(2.0, 3.0, size=n_envs)
        hist_buf = np.zeros((n_envs, h, OBS_DIM))
        obs = vec.observations()
        for t in range(steps_per_round):
            if update_stats:
                stats.update_batch(obs)
            norm = stats.normalize(obs)
            hist_buf[:, :-1] = hist_buf[:, 1:]
            hist_buf[:, -1] = norm
            if t >= 2 * h:  # history warmed up
                hists.append(hist_buf.reshape(n_envs, -1).copy())
                labels.append(vec.kind_idx.copy())
            res = vec.step(scripted_trot_actions(t * cfg.control_dt, rng, freqs))
            hist_buf[res.done] = 0.0
            obs = res.obs
    return np.concatenate(hists), np.concatenate(labels)


def balanced_subset(histories: np.ndarray, labels: np.ndarray,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Equal per-class subsample (shuffled)."""
    counts = np.bincount(labels, minlength=N_CLASSES)
    m = counts[counts > 0].min()
    keep = np.concatenate([rng.permutation(np.where(labels == c)[0])[:m]
                           for c in range(N_CLASSES) if counts[c] > 0])
    keep = rng.permutation(keep)
    return histories[keep], labels[keep]


def train_classifier_supervised(clf: TerrainClassifier, histories: np.ndarray,
                                labels: np.ndarray, rng: np.random.Generator,
                                epochs: int = 24, lr: float = 1e-3,
                                minibatch: int = 512, augment_noise: float = 0.06,
                                max_grad_norm: float = 1.0) -> TerrainClassifier:
    """Plain supervised cross-entropy training on a labeled history set,
    with Gaussian input-noise augmentation."""
    adam = AdamState.for_params(clf.params(), lr=lr)
    n = len(histories)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for chunk in np.array_split(perm, max(1, n // minibatch)):
            x = histories[chunk]
            if augment_noise > 0:
                x = x + rng.normal(size=x.shape) * augment_noise
            logits, cache = clf.logits(x)
            _, dlogits = classifier_loss(logits, labels[chunk])
            grads, _ = clf.mlp.backward(cache, dlogits)
            clip_global_norm(grads, max_grad_norm)
            adam_step(clf.params(), grads, adam)
    return clf


# ---------------------------------------------------------------------------
# policy rollout driver

def rollout_episode(bundle: PolicyBundle, env_cfg: EnvConfig, kind: TerrainKind,
                    command: tuple[float, float, float], seed: int, n_steps: int = 1000,
                    obs_mode: str = "estimated") -> tuple[dict, TraceRecorder, bool]:
    """One deterministic evaluation episode; returns (trace dict, recorder,
    success flag)."""
    env = Env(env_cfg, seed=seed)
    env.reset(seed=seed, kind=kind,
              cmd_ranges=((command[0], command[0]), (command[1], command[1]),
                          (command[2], command[2])))
    history = ObservationHistory(env_cfg.history_length, OBS_DIM)
    recorder = TraceRecorder()
    policy = bundle.policy
    obs = None
    success = True
    for _ in range(n_steps):
        raw = (obs.vector() if obs is not None
               else build_observation(env.state, env.cmd, env.prev_action, env_cfg).vector())
        history.push(bundle.stats.normalize(raw))
        hist = history.vector()
        if bundle.classifier is not None:
            probs = bundle.classifier.classify(hist)
        else:
            probs = np.zeros(N_TERRAIN)
        v_hat, z, _, _ = bundle.estimator.estimate(hist, deterministic=True)
        actor_obs = raw
        if obs_mode == "estimated":
            actor_obs = raw.copy()
            actor_obs[27:29] = v_hat[:2]
        action, _ = policy.act(actor_obs, z, probs, mode="mean")
        obs, _, reward, done, info = env.step(action)
        recorder.record(env, reward, info, done)
        if done:
            success = info["reason"] == "timeout"
            break
    return recorder.as_dict(), recorder, success


# ---------------------------------------------------------------------------
# ablation harness

LEG_NAMES = ("fl", "fr", "rl", "rr")
ABLATION_COLUMNS = (("variant", "terrain", "command_vx", "seed", "episodes", "rmse",
                     "mean_torque", "mean_power", "torque_variance", "mean_eff_p",
                     "mean_eff_d", "success_rate")
                    + tuple(f"p_gain_{leg}" for leg in LEG_NAMES)
                    + tuple(f"d_gain_{leg}" for leg in LEG_NAMES))


@dataclass
class AblationRow:
    variant: str
    terrain: str
    command_vx: float
    seed: int
    episodes: int
    rmse: float
    mean_torque: float
    mean_power: float
    torque_variance: float
    mean_eff_p: float
    mean_eff_d: float
    success_rate: float
    # per-leg means of the effective gains (each leg aggregates its 3 joints)
    p_per_leg: tuple = (0.0, 0.0, 0.0, 0.0)
    d_per_leg: tuple = (0.0, 0.0, 0.0, 0.0)


def evaluate_checkpoint(bundle: PolicyBundle, env_cfg: EnvConfig, kind: TerrainKind,
                        command_vx: float, seed: int, episodes: int = 3,
                        n_steps: int = 1000, obs_mode: str = "estimated",
                        trace_dir: Path | None = None) -> AblationRow:
    metrics = {"rmse": [], "tq": [], "pw": [], "tv": [], "p": [], "d": [], "ok": [],
               "p_leg": [], "d_leg": []}
    for ep in range(episodes):
        trace, recorder, success = rollout_episode(
            bundle, env_cfg, kind, (command_vx, 0.0, 0.0),
            seed=seed * 1000 + ep, n_steps=n_steps, obs_mode=obs_mode)
        metrics["rmse"].append(velocity_rmse(trace))
        metrics["tq"].append(mean_torque(trace))
        metrics["pw"].append(mean_power(trace))
        metrics["tv"].append(torque_variance(trace))
        p, d = mean_effective_gains(trace)
        metrics["p"].append(p)
        metrics["d"].append(d)
        p_leg, d_leg = per_leg_gains(trace)
        metrics["p_leg"].append(p_leg)
        metrics["d_leg"].append(d_leg)
        metrics["ok"].append(1.0 if success else 0.0)
        if trace_dir is not None:
            trace_dir.mkdir(parents=True, exist_ok=True)
            name = f"trace_{bundle.variant}_{kind.name.lower()}_v{command_vx}_s{seed}_e{ep}.csv"
            recorder.write(trace_dir / name)
    return AblationRow(
        variant=bundle.variant, terrain=kind.name.lower(), command_vx=command_vx,
        seed=seed, episodes=episodes,
        rmse=float(np.mean(metrics["rmse"])), mean_torque=float(np.mean(metrics["tq"])),
        mean_power=float(np.mean(metrics["pw"])), torque_variance=float(np.mean(metrics["tv"])),
        mean_eff_p=float(np.mean(metrics["p"])), mean_eff_d=float(np.mean(metrics["d"])),
        success_rate=float(np.mean(metrics["ok"])),
        p_per_leg=tuple(np.mean(metrics["p_leg"], axis=0)),
        d_per_leg=tuple(np.mean(metrics["d_leg"], axis=0)),
    )


def run_ablation(checkpoints: dict[str, list], terrains: list[TerrainKind],
                 commands: list[float], env_cfg: EnvConfig,
                 episodes: int = 3, n_steps: int = 1000, obs_mode: str = "estimated",
                 trace_dir: Path | None = None) -> list[AblationRow]:
    """Evaluate checkpoints per variant over a (terrain, command) grid.

    ``checkpoints`` maps variant name -> list of checkpoint paths (one per
    seed). A checkpoint whose stored variant differs from its requested
    variant is refused.
    """
    rows: list[AblationRow] = []
    for variant, paths in checkpoints.items():
        for seed_idx, path in enumerate(paths):
            bundle = load_policy_bundle(path)
            if bundle.variant != variant:
                raise EvalError(f"checkpoint {path} holds variant {bundle.variant!r}, "
                                f"requested {variant!r}")
            for kind in terrains:
                for cmd in commands:
                    rows.append(evaluate_checkpoint(bundle, env_cfg, kind, cmd, seed_idx,
                                                    episodes=episodes, n_steps=n_steps,
                                                    obs_mode=obs_mode, trace_dir=trace_dir))
    return rows


def write_ablation_csv(rows: list[AblationRow], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ABLATION_COLUMNS)
        for r in rows:
            writer.writerow([r.variant, r.terrain, repr(r.command_vx), r.seed, r.episodes,
                             repr(r.rmse), repr(r.mean_torque), repr(r.mean_power),
                             repr(r.torque_variance), repr(r.mean_eff_p), repr(r.mean_eff_d),
                             repr(r.success_rate)]
                            + [repr(float(v)) for v in r.p_per_leg]
                            + [repr(float(v)) for v in r.d_per_leg])


def format_ablation_table(rows: list[AblationRow]) -> str:
    """Aggregated text table: per (terrain, command, variant) mean +- std
    over seeds for RMSE, torque and power."""
    groups: dict[tuple, list[AblationRow]] = {}
    for r in rows:
        groups.setdefault((r.terrain, r.command_vx, r.variant), []).append(r)
    lines = [f"{'terrain':<10s} {'cmd':>5s} {'variant':<9s} {'RMSE (m/s)':>16s} "
             f"{'torque (Nm)':>16s} {'power (W)':>16s} {'P':>7s} {'D':>6s}"]
    for key in sorted(groups):
        terrain, cmd, variant = key
        rs = groups[key]
        def ms(vals):
            vals = np.asarray(vals)
            return f"{vals.mean():7.4f} ± {vals.std():5.4f}"
        lines.append(f"{terrain:<10s} {cmd:5.1f} {variant:<9s} {ms([r.rmse for r in rs]):>16s} "
                     f"{ms([r.mean_torque for r in rs]):>16s} {ms([r.mean_power for r in rs]):>16s} "
                     f"{np.mean([r.mean_eff_p for r in rs]):7.2f} {np.mean([r.mean_eff_d for r in rs]):6.3f}")
    return "\n".join(lines)
