"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line. The learning-based criteria train real policies at desk
scale inside session fixtures, so a full run takes on the order of an hour
of CPU time.
"""

import csv
import dataclasses

import numpy as np
import pytest

from gainloco.env import ACTION_DIM, Env, EnvConfig, OBS_DIM, REWARD_TERMS, REWARD_WEIGHTS
from gainloco.estimators import EstimatorConfig, NormalizationStats, TerrainClassifier, vae_loss
from gainloco.evaluation import (balanced_subset, evaluate_checkpoint,
                                 gather_labeled_histories, train_classifier_supervised)
from gainloco.nets import (Mlp, finite_difference_gradient, gaussian_entropy,
                           gaussian_kl_to_standard, gaussian_log_prob, softmax_cross_entropy)
from gainloco.policy import Critic, DualActorPolicy, PolicyConfig, PRESET_WIDTHS
from gainloco.ppo import (Minibatch, RolloutBuffer, TrainConfig, Trainer, compute_gae,
                          load_policy_bundle, ppo_minibatch_grads, ppo_minibatch_loss)
from gainloco.sim import GainState, pd_torque, reference_position
from gainloco.terrain import TerrainKind
from gainloco.verify import gae_brute_force

TOL_EXACT = 1e-9

# training lengths for the learning criteria (desk preset)
STANDSTILL_ITERS = 300
TRACKING_ITERS = 1500
ABLATION_ITERS = 500
ABLATION_SEEDS = 5


def report(num: int, desc: str, passed: bool, detail: str = ""):
    status = "PASS" if passed else "FAIL"
    print(f"\n[CRITERION {num:02d}] {status}: {desc}" + (f" ({detail})" if detail else ""))
    assert passed, f"criterion {num} failed: {desc} {detail}"


def desk_env_cfg(terrains, zero_cmd=False):
    kw = dict(terrain_kinds=terrains,
              cmd_vx_range=(-0.5, 1.0), cmd_vy_range=(-0.3, 0.3), cmd_wz_range=(-0.6, 0.6))
    if zero_cmd:
        kw.update(cmd_vx_range=(0.0, 0.0), cmd_vy_range=(0.0, 0.0), cmd_wz_range=(0.0, 0.0))
    return EnvConfig(**kw)


def desk_train_cfg(iterations, **kw):
    # mirror the desk preset's training overrides
    kw.setdefault("n_steps", 48)
    return TrainConfig(iterations=iterations, entropy_coef=0.001, lr=5e-4, **kw)


def read_metrics(path):
    return list(csv.DictReader(open(path)))


# ---------------------------------------------------------------------------
# session fixtures running the expensive training protocols

@pytest.fixture(scope="session")
def standstill_metrics(tmp_path_factory):
    out = tmp_path_factory.mktemp("standstill")
    trainer = Trainer(desk_train_cfg(STANDSTILL_ITERS), desk_env_cfg((TerrainKind.LEVEL,), zero_cmd=True),
                      EstimatorConfig(), variant="full", preset="desk", seed=0)
    result = trainer.train(out, log=None)
    return read_metrics(result.metrics_path)


@pytest.fixture(scope="session")
def tracking_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tracking")
    trainer = Trainer(desk_train_cfg(TRACKING_ITERS), desk_env_cfg((TerrainKind.LEVEL,)),
                      EstimatorConfig(), variant="full", preset="desk", seed=0)
    result = trainer.train(out, log=None)
    bundle = load_policy_bundle(result.checkpoint_path)
    row = evaluate_checkpoint(bundle, desk_env_cfg((TerrainKind.LEVEL,)), TerrainKind.LEVEL,
                              command_vx=0.5, seed=0, episodes=3, n_steps=1000,
                              obs_mode="estimated")
    return {"metrics": read_metrics(result.metrics_path), "eval": row}


@pytest.fixture(scope="session")
def ablation_powers(tmp_path_factory):
    out = tmp_path_factory.mktemp("ablation")
    rows = {}
    for variant in ("full", "sa"):
        for seed in range(ABLATION_SEEDS):
            trainer = Trainer(desk_train_cfg(ABLATION_ITERS),
                              desk_env_cfg((TerrainKind.ROUGH,)), EstimatorConfig(),
                              variant=variant, preset="desk", seed=seed)
            result = trainer.train(out / f"{variant}_{seed}", log=None)
            bundle = load_policy_bundle(result.checkpoint_path)
            row = evaluate_checkpoint(bundle, desk_env_cfg((TerrainKind.ROUGH,)),
                                      TerrainKind.ROUGH, command_vx=0.5, seed=seed,
                                      episodes=2, n_steps=1000, obs_mode="estimated")
            rows[(variant, seed)] = row
    return rows


# ---------------------------------------------------------------------------
# criteria

def test_criterion_01_equation_exactness():
    ok = True
    detail = []
    # reference-position law
    q_def = np.asarray(EnvConfig().sim.q_def)
    a = np.random.default_rng(0).normal(size=12)
    ok &= bool(np.all(np.abs(reference_position(a, q_def) - (q_def + 0.25 * a)) < TOL_EXACT))
    # PD torque hand cases
    q_des = np.zeros(12)
    q_des[2] = 0.1
    ok &= abs(pd_torque(q_des, np.zeros(12), np.zeros(12), GainState.zero())[2] - 2.8) < TOL_EXACT
    g2 = GainState.from_action(np.full(12, -10.0), np.zeros(12))
    ok &= abs(pd_torque(q_des, np.zeros(12), np.zeros(12), g2)[2] - 2.3) < TOL_EXACT
    # log-prob / entropy additivity over the two actor slices
    rng = np.random.default_rng(1)
    mu, ls, x = rng.normal(size=36), rng.normal(size=36) * 0.4, rng.normal(size=36)
    lp_split = gaussian_log_prob(mu[:12], ls[:12], x[:12]) + gaussian_log_prob(mu[12:], ls[12:], x[12:])
    ok &= abs(gaussian_log_prob(mu, ls, x) - lp_split) < TOL_EXACT
    ok &= abs(gaussian_entropy(ls) - gaussian_entropy(ls[:12]) - gaussian_entropy(ls[12:])) < TOL_EXACT
    # cross-entropy uniform case
    loss_u, _ = softmax_cross_entropy(np.zeros(4), 3)
    ok &= abs(loss_u - np.log(4.0)) < TOL_EXACT
    # estimator loss zero case
    v = np.array([0.2, -0.1, 0.4])
    total, _, _ = vae_loss(v, v, np.zeros(16), np.zeros(16), beta=0.2)
    ok &= abs(total) < TOL_EXACT
    ok &= abs(gaussian_kl_to_standard(np.ones(1), np.zeros(1)) - 0.5) < TOL_EXACT
    # mean-power hand case
    tau, qd = np.zeros(12), np.zeros(12)
    tau[4], qd[4] = 2.0, 3.0
    ok &= abs(float(np.mean(np.abs(tau * qd))) - 0.5) < TOL_EXACT
    report(1, "equation closed forms exact to 1e-9", bool(ok))


def test_criterion_02_gradient_oracle():
    worst_overall = 0.0

    def probe(params, loss_fn, analytic, n, seed):
        nonlocal worst_overall
        prng = np.random.default_rng(seed)
        probes = []
        for _ in range(n):
            pi = int(prng.integers(len(params)))
            probes.append((pi, tuple(int(prng.integers(s)) for s in params[pi].shape)))
        fd = finite_difference_gradient(loss_fn, params, probes)
        for (pi, idx), g in zip(probes, fd):
            a = analytic[pi][idx]
            worst_overall = max(worst_overall, abs(a - g) / max(abs(a), abs(g), 1e-4))

    rng = np.random.default_rng(2)
    # PPO combined loss over both actors and the critic
    pcfg = PolicyConfig(variant="full", obs_dim=9, latent_dim=3,
                        actor_hidden=(10,), critic_hidden=(8,))
    policy = DualActorPolicy(pcfg, rng)
    policy.joint_log_std[:] = rng.normal(size=12) * 0.2
    policy.gain_log_std[:] = rng.normal(size=24) * 0.2
    critic = Critic(pcfg, rng, priv_dim=6)
    n = 5
    mb = Minibatch(obs=rng.normal(size=(n, 9)), priv=rng.normal(size=(n, 6)),
                   latent=rng.normal(size=(n, 3)), terrain_probs=rng.dirichlet(np.ones(4), n),
                   actions=rng.normal(size=(n, 36)), old_log_probs=np.zeros(n),
                   advantages=rng.normal(size=n), returns=rng.normal(size=n))
    mb.old_log_probs = policy.log_prob_of(mb.obs, mb.latent, mb.terrain_probs, mb.actions) \
        + rng.normal(size=n) * 0.3
    tcfg = TrainConfig()
    _, grads, _ = ppo_minibatch_grads(policy, critic, mb, tcfg)
    probe(policy.params() + critic.params(),
          lambda: ppo_minibatch_loss(policy, critic, mb, tcfg), grads, 120, seed=3)

    # classifier cross-entropy loss
    ecfg = EstimatorConfig(obs_dim=6, history_length=2, latent_dim=4,
                           estimator_hidden=(10,), classifier_hidden=(10,))
    clf = TerrainClassifier(ecfg, rng)
    h = rng.normal(size=(6, ecfg.input_dim))
    labels = rng.integers(0, 4, size=6)
    logits, cache = clf.logits(h)
    _, dlogits = softmax_cross_entropy(logits, labels)
    clf_grads, _ = clf.mlp.backward(cache, dlogits)
    probe(clf.params(),
          lambda: softmax_cross_entropy(clf.logits(h)[0], labels)[0], clf_grads, 120, seed=4)

    # estimator loss (velocity MSE + beta KL)
    from gainloco.estimators import StateEstimator
    est = StateEstimator(ecfg, rng)
    v_true = rng.normal(size=(6, 3))
    beta = 0.2
    y, cache = est.mlp.forward(h)
    v_hat, mu, log_sigma = est.split_outputs(y)
    dy = np.empty_like(y)
    dy[:, :3] = 2.0 * (v_hat - v_true) / 3.0 / 6
    dy[:, 3:3 + ecfg.latent_dim] = beta * mu / 6
    dy[:, 3 + ecfg.latent_dim:] = beta * (np.exp(2.0 * log_sigma) - 1.0) / 6
    est_grads, _ = est.mlp.backward(cache, dy)

    def est_loss():
        out, _ = est.mlp.forward(h)
        vh, m, ls = est.split_outputs(out)
        return vae_loss(vh, v_true, m, ls, beta)[0]

    probe(est.params(), est_loss, est_grads, 120, seed=5)
    report(2, "trainable losses match finite differences (rel err < 1e-4, 120 probes each)",
           worst_overall < 1e-4, f"worst rel err {worst_overall:.2e}")


def test_criterion_03_gae_oracle():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(200):
        t = 20
        rewards = rng.normal(size=t)
        values = rng.normal(size=t)
        dones = rng.random(t) < 0.2
        last = float(rng.normal())
        buf = RolloutBuffer(t, 1, 1, 1)
        buf.rewards[:, 0] = rewards
        buf.values[:, 0] = values
        buf.dones[:, 0] = dones
        buf.last_values[0] = last
        compute_gae(buf, 0.99, 0.95)
        raw = buf.returns[:, 0] - values
        ref = gae_brute_force(rewards, values, dones, last, 0.99, 0.95)
        worst = max(worst, float(np.max(np.abs(raw - ref))))
    report(3, "GAE matches brute-force lambda mixture on 200 random sequences",
           worst < TOL_EXACT, f"worst abs err {worst:.2e}")


def test_criterion_04_pd_regulation():
    cfg = EnvConfig()
    env = Env(cfg, seed=0)
    env.reset(seed=0, kind=TerrainKind.LEVEL, cmd_ranges=((0, 0), (0, 0), (0, 0)))
    q_def = np.asarray(cfg.sim.q_def)
    for _ in range(int(round(1.0 / cfg.control_dt))):
        env.step(np.zeros(ACTION_DIM))
    err = float(np.max(np.abs(env.state.joint_positions - q_def)))
    report(4, "zero-action policy holds posture after 1 s (max joint error < 0.15 rad)",
           err < 0.15, f"max error {err:.4f} rad")


def test_criterion_05_learning_progress(standstill_metrics):
    r10 = float(standstill_metrics[9]["mean_step_reward"])
    r_final = float(standstill_metrics[STANDSTILL_ITERS - 1]["mean_step_reward"])
    ratio = r_final / r10
    report(5, f"stand-still mean return grows 1.5x between iterations 10 and {STANDSTILL_ITERS}",
           ratio >= 1.5, f"r10={r10:.3f} r{STANDSTILL_ITERS}={r_final:.3f} ratio={ratio:.2f}")


def test_criterion_06_velocity_tracking(tracking_run):
    rmse = tracking_run["eval"].rmse
    report(6, "trained full variant tracks 0.5 m/s on level ground (RMSE < 0.25 m/s)",
           rmse < 0.25, f"RMSE {rmse:.4f} m/s over 3 episodes")


def test_criterion_07_gain_adaptation_direction(tracking_run):
    row = tracking_run["eval"]
    ok = row.mean_eff_p < 28.0 and row.mean_eff_d > 0.7
    report(7, "trained gains move in the published direction (P < 28, D > 0.7)",
           ok, f"mean effective P {row.mean_eff_p:.3f}, D {row.mean_eff_d:.3f}")


def test_criterion_08_ablation_power_trend(ablation_powers):
    wins = 0
    details = []
    for seed in range(ABLATION_SEEDS):
        p_full = ablation_powers[("full", seed)].mean_power
        p_sa = ablation_powers[("sa", seed)].mean_power
        wins += p_full <= p_sa
        details.append(f"seed{seed}: full {p_full:.3f} vs sa {p_sa:.3f}")
    report(8, f"full-variant mean power <= single-actor power on rough terrain in >= 4/{ABLATION_SEEDS} seeds",
           wins >= 4, f"wins {wins}/{ABLATION_SEEDS}; " + "; ".join(details))


def test_criterion_09_terrain_classifier():
    env_cfg = EnvConfig()
    stats = NormalizationStats(OBS_DIM)
    x_train, y_train = gather_labeled_histories(env_cfg, seed=100, rounds=28, stats=stats,
                                                update_stats=True)
    x_train, y_train = balanced_subset(x_train, y_train, np.random.default_rng(2))
    stats.frozen = True
    x_test, y_test = gather_labeled_histories(env_cfg, seed=7700, rounds=6, stats=stats,
                                              update_stats=False)
    x_test, y_test = balanced_subset(x_test, y_test, np.random.default_rng(3))
    est_cfg = EstimatorConfig(history_length=env_cfg.history_length,
                              estimator_hidden=PRESET_WIDTHS["desk"]["estimator"],
                              classifier_hidden=PRESET_WIDTHS["desk"]["classifier"])
    clf = TerrainClassifier(est_cfg, np.random.default_rng(0))
    train_classifier_supervised(clf, x_train, y_train, np.random.default_rng(1))
    acc = float(np.mean(np.argmax(clf.classify(x_test), axis=1) == y_test))
    report(9, "terrain classifier reaches 90% held-out accuracy on labeled rollouts",
           acc >= 0.90, f"held-out accuracy {100 * acc:.1f}% on {len(y_test)} samples")


def test_criterion_10_determinism(tmp_path):
    def run(name):
        tcfg = desk_train_cfg(5, n_envs=8, n_steps=12, strict_deterministic=True)
        trainer = Trainer(tcfg, desk_env_cfg(tuple(TerrainKind)), EstimatorConfig(),
                          variant="full", preset="desk", seed=123)
        return trainer.train(tmp_path / name, log=None).metrics_path.read_bytes()

    identical = run("a") == run("b")
    report(10, "identical config and seed give bit-identical metrics CSVs", identical)


def test_criterion_11_reward_recomputation(tmp_path):
    # 1000-step deterministic trace from an untrained policy (stable stand)
    tcfg = TrainConfig(n_envs=2, n_steps=4, iterations=1)
    trainer = Trainer(tcfg, desk_env_cfg((TerrainKind.LEVEL,), zero_cmd=True),
                      EstimatorConfig(), variant="full", preset="desk", seed=0)
    trainer.stats.update_batch(np.random.default_rng(0).normal(size=(32, OBS_DIM)))
    ckpt = tmp_path / "untrained.bin"
    trainer.save_checkpoint(ckpt)
    bundle = load_policy_bundle(ckpt)
    from gainloco.evaluation import rollout_episode
    trace, _, _ = rollout_episode(bundle, desk_env_cfg((TerrainKind.LEVEL,), zero_cmd=True),
                                  TerrainKind.LEVEL, (0.0, 0.0, 0.0), seed=0, n_steps=1000)
    n = len(trace["time"])
    recomputed = sum(REWARD_WEIGHTS[name] * trace[f"rew_{name}"] for name in REWARD_TERMS)
    worst = float(np.max(np.abs(trace["rew_total"] - recomputed)))
    report(11, "1000-step trace reward totals equal independent recomputation (1e-9)",
           n == 1000 and worst < TOL_EXACT, f"steps {n}, worst abs err {worst:.2e}")
