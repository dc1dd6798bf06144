"""Self-check suite: closed-form cases, independent oracles and
finite-difference gradient checks over every trainable loss. Run via
``gainloco verify``; exits nonzero if any check fails.
"""

from dataclasses import dataclass

import numpy as np

from .env import Env, EnvConfig, REWARD_TERMS, REWARD_WEIGHTS, TraceRecorder
from .estimators import EstimatorConfig, StateEstimator, TerrainClassifier, vae_loss
from .nets import (AdamState, Mlp, adam_step, finite_difference_gradient, gaussian_entropy,
                   gaussian_kl_to_standard, gaussian_log_prob, softmax_cross_entropy)
from .policy import Critic, DualActorPolicy, PolicyConfig
from .ppo import Minibatch, RolloutBuffer, TrainConfig, compute_gae, ppo_minibatch_grads, ppo_minibatch_loss
from .sim import GainState, pd_torque, reference_position
from .terrain import TerrainKind

TOL_EXACT = 1e-9
TOL_GRAD = 1e-4
FD_STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _grad_probe(params: list[np.ndarray], loss_fn, analytic: list[np.ndarray],
                n_probes: int, rng: np.random.Generator) -> float:
    """Worst relative error between analytic and central-difference gradients."""
    probes = []
    for _ in range(n_probes):
        pi = int(rng.integers(len(params)))
        idx = tuple(int(rng.integers(s)) for s in params[pi].shape)
        probes.append((pi, idx))
    fd = finite_difference_gradient(loss_fn, params, probes, h=FD_STEP)
    worst = 0.0
    for (pi, idx), g_fd in zip(probes, fd):
        g_an = analytic[pi][idx]
        worst = max(worst, abs(g_an - g_fd) / max(abs(g_an), abs(g_fd), 1e-4))
    return worst


def gae_brute_force(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                    last_value: float, gamma: float, lam: float) -> np.ndarray:
    """Direct forward-sum evaluation of the lambda-mixture advantage,
    independent of the recursive implementation."""
    t_total = len(rewards)
    v_next = np.concatenate([values[1:], [last_value]])
    not_done = 1.0 - dones.astype(float)
    deltas = rewards + gamma * v_next * not_done - values
    adv = np.zeros(t_total)
    for t in range(t_total):
        acc = 0.0
        weight = 1.0
        for l in range(t, t_total):
            acc += weight * deltas[l]
            weight *= gamma * lam * not_done[l]
            if weight == 0.0:
                break
        adv[t] = acc
    return adv


# ---------------------------------------------------------------------------
# individual checks

def check_reference_position() -> CheckResult:
    q_def = np.arange(12) * 0.1
    cases = [
        np.allclose(reference_position(np.zeros(12), q_def), q_def, atol=TOL_EXACT),
        abs(reference_position(np.eye(12)[0], np.zeros(12))[0] - 0.25) < TOL_EXACT,
    ]
    rng = np.random.default_rng(0)
    a = rng.normal(size=12)
    cases.append(np.allclose(reference_position(a, q_def), q_def + 0.25 * a, atol=1e-12))
    return CheckResult("reference_position closed forms", all(cases))


def check_pd_torque() -> CheckResult:
    gains = GainState.zero()
    q = np.zeros(12)
    ok = np.allclose(pd_torque(q, q, np.zeros(12), gains), 0.0, atol=TOL_EXACT)
    q_des = np.zeros(12)
    q_des[3] = 0.1
    tau = pd_torque(q_des, np.zeros(12), np.zeros(12), gains)
    ok &= abs(tau[3] - 2.8) < TOL_EXACT
    gains2 = GainState.from_action(np.full(12, -10.0), np.zeros(12))
    tau2 = pd_torque(q_des, np.zeros(12), np.zeros(12), gains2)
    ok &= abs(gains2.effective_p()[0] - 23.0) < TOL_EXACT
    ok &= abs(tau2[3] - 2.3) < TOL_EXACT
    return CheckResult("pd torque closed forms", bool(ok),
                       f"tau={tau[3]:.6f}, reduced={tau2[3]:.6f}")


def check_logprob_entropy_additivity() -> CheckResult:
    rng = np.random.default_rng(1)
    mu = rng.normal(size=36)
    log_std = rng.normal(size=36) * 0.5
    x = rng.normal(size=36)
    total = gaussian_log_prob(mu, log_std, x)
    split = (gaussian_log_prob(mu[:12], log_std[:12], x[:12])
             + gaussian_log_prob(mu[12:], log_std[12:], x[12:]))
    ok = abs(total - split) < TOL_EXACT
    h_total = gaussian_entropy(log_std)
    h_split = gaussian_entropy(log_std[:12]) + gaussian_entropy(log_std[12:])
    ok &= abs(h_total - h_split) < TOL_EXACT
    std_case = gaussian_log_prob(np.zeros(1), np.zeros(1), np.zeros(1))
    ok &= abs(std_case + 0.5 * np.log(2 * np.pi)) < TOL_EXACT
    return CheckResult("log-prob/entropy additivity", bool(ok))


def check_cross_entropy() -> CheckResult:
    loss, grad = softmax_cross_entropy(np.zeros(4), 2)
    ok = abs(loss - np.log(4.0)) < TOL_EXACT
    ok &= abs(grad.sum()) < TOL_EXACT
    loss2, _ = softmax_cross_entropy(np.array([1.0, 0.0, 0.0, 0.0]), 0)
    ok &= abs(loss2 - (-np.log(np.e / (np.e + 3.0)))) < TOL_EXACT
    loss3, _ = softmax_cross_entropy(np.array([500.0, 0.0, 0.0, 0.0]), 0)
    ok &= loss3 < 1e-9
    return CheckResult("cross-entropy closed forms", bool(ok))


def check_kl() -> CheckResult:
    ok = abs(gaussian_kl_to_standard(np.zeros(4), np.zeros(4))) < TOL_EXACT
    ok &= abs(gaussian_kl_to_standard(np.ones(1), np.zeros(1)) - 0.5) < TOL_EXACT
    rng = np.random.default_rng(2)
    for _ in range(20):
        kl = gaussian_kl_to_standard(rng.normal(size=8), rng.normal(size=8))
        ok &= kl >= 0.0
    return CheckResult("KL-divergence closed forms", bool(ok))


def check_mean_power_formula() -> CheckResult:
    tau = np.zeros(12)
    qd = np.zeros(12)
    tau[4], qd[4] = 2.0, 3.0
    p = float(np.mean(np.abs(tau * qd)))
    ok = abs(p - 0.5) < TOL_EXACT
    p2 = float(np.mean(np.abs((-tau) * (-qd))))
    ok &= abs(p2 - p) < TOL_EXACT
    return CheckResult("mean-power hand case", bool(ok), f"P={p}")


def check_vae_loss_cases() -> CheckResult:
    v = np.array([0.3, -0.2, 0.5])
    total, mse, kl = vae_loss(v, v, np.zeros(16), np.zeros(16), beta=0.2)
    ok = abs(total) < TOL_EXACT
    total2, mse2, _ = vae_loss(np.array([1.0, 0.0, 0.0]), np.zeros(3),
                               np.zeros(16), np.zeros(16), beta=0.0)
    ok &= abs(total2 - 1.0 / 3.0) < TOL_EXACT
    mu, ls = np.ones(16) * 0.3, np.ones(16) * -0.2
    t_b1, _, kl1 = vae_loss(v, v, mu, ls, beta=0.1)
    t_b2, _, kl2 = vae_loss(v, v, mu, ls, beta=0.2)
    ok &= abs(t_b2 - 2.0 * t_b1) < TOL_EXACT and abs(kl1 - kl2) < TOL_EXACT
    return CheckResult("estimator loss closed forms", bool(ok))


def check_adam_first_step() -> CheckResult:
    p = [np.array([1.0, -2.0])]
    g = [np.array([0.5, -0.25])]
    state = AdamState.for_params(p, lr=1e-3)
    adam_step(p, g, state)
    # bias-corrected first step is -lr * g / (|g| + eps') ~= -lr * sign(g)
    expected = np.array([1.0, -2.0]) - 1e-3 * np.sign([0.5, -0.25]) \
        * (np.abs([0.5, -0.25]) / (np.abs([0.5, -0.25]) + 1e-8 * np.sqrt(1 - 0.999)))
    ok = np.allclose(p[0], expected, atol=1e-9)
    p2 = [np.array([3.0])]
    state2 = AdamState.for_params(p2, lr=1e-3)
    adam_step(p2, [np.zeros(1)], state2)
    ok &= abs(p2[0][0] - 3.0) < TOL_EXACT
    return CheckResult("adam first-step algebra", bool(ok))


def check_mlp_gradient(corrupt: bool = False) -> CheckResult:
    rng = np.random.default_rng(3)
    net = Mlp([5, 8, 4], rng)
    x = rng.normal(size=(6, 5))
    target = rng.normal(size=(6, 4))

    def loss_fn():
        y, _ = net.forward(x)
        return float(np.sum((y - target) ** 2))

    y, cache = net.forward(x)
    grads, _ = net.backward(cache, 2.0 * (y - target))
    if corrupt:
        grads[0] = grads[0] + 0.05
    worst = _grad_probe(net.params(), loss_fn, grads, 60, np.random.default_rng(4))
    return CheckResult("mlp gradient vs finite differences", worst < TOL_GRAD,
                       f"worst rel err {worst:.2e}")


def check_ppo_gradient() -> CheckResult:
    rng = np.random.default_rng(5)
    pcfg = PolicyConfig(variant="full", obs_dim=8, latent_dim=3,
                        actor_hidden=(8,), critic_hidden=(6,))
    policy = DualActorPolicy(pcfg, rng)
    policy.joint_log_std[:] = rng.normal(size=12) * 0.2
    policy.gain_log_std[:] = rng.normal(size=24) * 0.2
    critic = Critic(pcfg, rng, priv_dim=5)
    n = 4
    mb = Minibatch(
        obs=rng.normal(size=(n, 8)), priv=rng.normal(size=(n, 5)),
        latent=rng.normal(size=(n, 3)), terrain_probs=rng.dirichlet(np.ones(4), size=n),
        actions=rng.normal(size=(n, 36)), old_log_probs=np.zeros(n),
        advantages=rng.normal(size=n), returns=rng.normal(size=n))
    mb.old_log_probs = policy.log_prob_of(mb.obs, mb.latent, mb.terrain_probs, mb.actions) \
        + rng.normal(size=n) * 0.3
    cfg = TrainConfig()
    _, grads, _ = ppo_minibatch_grads(policy, critic, mb, cfg)
    params = policy.params() + critic.params()
    worst = _grad_probe(params, lambda: ppo_minibatch_loss(policy, critic, mb, cfg),
                        grads, 120, np.random.default_rng(6))
    return CheckResult("ppo loss gradient vs finite differences", worst < TOL_GRAD,
                       f"worst rel err {worst:.2e}")


def check_classifier_gradient() -> CheckResult:
    rng = np.random.default_rng(7)
    cfg = EstimatorConfig(obs_dim=6, history_length=2, estimator_hidden=(8,),
                          classifier_hidden=(8,), latent_dim=4)
    clf = TerrainClassifier(cfg, rng)
    h = rng.normal(size=(5, cfg.input_dim))
    labels = rng.integers(0, 4, size=5)

    def loss_fn():
        logits, _ = clf.logits(h)
        return softmax_cross_entropy(logits, labels)[0]

    logits, cache = clf.logits(h)
    _, dlogits = softmax_cross_entropy(logits, labels)
    grads, _ = clf.mlp.backward(cache, dlogits)
    worst = _grad_probe(clf.params(), loss_fn, grads, 60, np.random.default_rng(8))
    return CheckResult("classifier loss gradient vs finite differences", worst < TOL_GRAD,
                       f"worst rel err {worst:.2e}")


def check_vae_gradient() -> CheckResult:
    rng = np.random.default_rng(9)
    cfg = EstimatorConfig(obs_dim=6, history_length=2, estimator_hidden=(8,),
                          classifier_hidden=(8,), latent_dim=4)
    est = StateEstimator(cfg, rng)
    h = rng.normal(size=(5, cfg.input_dim))
    v_true = rng.normal(size=(5, 3))
    beta = 0.2

    def loss_fn():
        y, _ = est.mlp.forward(h)
        v_hat, mu, log_sigma = est.split_outputs(y)
        return vae_loss(v_hat, v_true, mu, log_sigma, beta)[0]

    y, cache = est.mlp.forward(h)
    v_hat, mu, log_sigma = est.split_outputs(y)
    n = h.shape[0]
    dy = np.empty_like(y)
    dy[:, :3] = 2.0 * (v_hat - v_true) / 3.0 / n
    dy[:, 3:3 + cfg.latent_dim] = beta * mu / n
    dy[:, 3 + cfg.latent_dim:] = beta * (np.exp(2.0 * log_sigma) - 1.0) / n
    grads, _ = est.mlp.backward(cache, dy)
    worst = _grad_probe(est.params(), loss_fn, grads, 60, np.random.default_rng(10))
    return CheckResult("estimator loss gradient vs finite differences", worst < TOL_GRAD,
                       f"worst rel err {worst:.2e}")


def check_gae_oracle() -> CheckResult:
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(50):
        t = 20
        rewards = rng.normal(size=t)
        values = rng.normal(size=t)
        dones = rng.random(t) < 0.15
        last_value = float(rng.normal())
        gamma, lam = 0.99, 0.95
        buf = RolloutBuffer(t, 1, hist_dim=1, latent_dim=1)
        buf.rewards[:, 0] = rewards
        buf.values[:, 0] = values
        buf.dones[:, 0] = dones
        buf.last_values[0] = last_value
        compute_gae(buf, gamma, lam)
        raw = buf.returns[:, 0] - values
        ref = gae_brute_force(rewards, values, dones, last_value, gamma, lam)
        worst = max(worst, float(np.max(np.abs(raw - ref))))
    return CheckResult("gae vs brute-force oracle", worst < TOL_EXACT,
                       f"worst abs err {worst:.2e}")


def check_reward_recomputation() -> CheckResult:
    cfg = EnvConfig()
    env = Env(cfg, seed=21)
    env.reset(seed=21, kind=TerrainKind.LEVEL)
    rng = np.random.default_rng(22)
    recorder = TraceRecorder()
    for _ in range(40):
        obs, priv, reward, done, info = env.step(rng.normal(size=36) * 0.3)
        recorder.record(env, reward, info, done)
        if done:
            break
    trace = recorder.as_dict()
    totals = trace["rew_total"]
    recomputed = sum(REWARD_WEIGHTS[name] * trace[f"rew_{name}"] for name in REWARD_TERMS)
    worst = float(np.max(np.abs(totals - recomputed)))
    track = np.exp(-4.0 * ((trace["cmd_vx"] - trace["vx"]) ** 2
                           + (trace["cmd_vy"] - trace["vy"]) ** 2))
    worst = max(worst, float(np.max(np.abs(track - trace["rew_track_xy"]))))
    return CheckResult("reward totals vs recomputation", worst < TOL_EXACT,
                       f"worst abs err {worst:.2e}")


ALL_CHECKS = (
    check_reference_position,
    check_pd_torque,
    check_logprob_entropy_additivity,
    check_cross_entropy,
    check_kl,
    check_mean_power_formula,
    check_vae_loss_cases,
    check_adam_first_step,
    check_mlp_gradient,
    check_ppo_gradient,
    check_classifier_gradient,
    check_vae_gradient,
    check_gae_oracle,
    check_reward_recomputation,
)


def run_verification(corrupt_gradient: bool = False, log=print) -> tuple[bool, list[CheckResult]]:
    """Run every check; ``corrupt_gradient`` is a test hook that injects a
    broken gradient into the MLP check to prove failures are detected."""
    results = []
    for check in ALL_CHECKS:
        if check is check_mlp_gradient:
            result = check(corrupt=corrupt_gradient)
        else:
            result = check()
        results.append(result)
        if log is not None:
            status = "PASS" if result.passed else "FAIL"
            detail = f"  ({result.detail})" if result.detail else ""
            log(f"[{status}] {result.name}{detail}")
    return all(r.passed for r in results), results
