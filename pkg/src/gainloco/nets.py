"""Minimal neural-network core: MLPs with hand-written reverse-mode gradients,
Adam, and the Gaussian / categorical distribution math used by the policy,
critic and estimator networks.

Everything is float64 numpy. Forward passes accept a single vector ``(n,)`` or
a batch ``(B, n)``; gradients mirror parameter shapes exactly.
"""

from dataclasses import dataclass

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))

# Learned policy log-stds are projected into this range after every update.
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


def elu(x: np.ndarray) -> np.ndarray:
    # max(x, 0) + expm1(min(x, 0)) equals the usual piecewise definition
    return np.maximum(x, 0.0) + np.expm1(np.minimum(x, 0.0))


def elu_grad(x: np.ndarray) -> np.ndarray:
    # d/dx elu(x) = 1 for x > 0, exp(x) otherwise
    return np.where(x > 0.0, 1.0, np.exp(np.minimum(x, 0.0)))


def elu_grad_from_output(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # for x <= 0, y = exp(x) - 1 so the derivative exp(x) is just y + 1
    return np.where(x > 0.0, 1.0, y + 1.0)


def orthogonal_init(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    """Orthogonal weight matrix (n_in, n_out), scaled by ``gain``."""
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))  # make decomposition unique
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


class Mlp:
    """Fully connected net: affine layers with ELU on hidden, identity output.

    Parameters live in ``weights[i]`` of shape ``(fan_in, fan_out)`` and
    ``biases[i]`` of shape ``(fan_out,)``. ``params()`` exposes them as the
    flat list [W0, b0, W1, b1, ...] shared by the optimizer.
    """

    def __init__(self, widths: list[int], rng: np.random.Generator | None = None,
                 out_gain: float = 0.01):
        if len(widths) < 2:
            raise ValueError(f"need at least input and output widths, got {widths}")
        self.widths = list(int(w) for w in widths)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        n_layers = len(self.widths) - 1
        for i in range(n_layers):
            n_in, n_out = self.widths[i], self.widths[i + 1]
            gain = out_gain if i == n_layers - 1 else np.sqrt(2.0)
            self.weights.append(orthogonal_init(rng, n_in, n_out, gain))
            self.biases.append(np.zeros(n_out))

    @property
    def input_width(self) -> int:
        return self.widths[0]

    @property
    def output_width(self) -> int:
        return self.widths[-1]

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def set_params(self, params: list[np.ndarray]) -> None:
        if len(params) != 2 * len(self.weights):
            raise ValueError("parameter list length mismatch")
        for i in range(len(self.weights)):
            self.weights[i] = np.asarray(params[2 * i], dtype=float)
            self.biases[i] = np.asarray(params[2 * i + 1], dtype=float)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, dict]:
        """Returns (output, cache); the cache feeds backward()."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        a = x[None, :] if single else x
        if a.shape[1] != self.input_width:
            raise ValueError(f"input width {a.shape[1]} != expected {self.input_width}")
        inputs = [a]       # activations entering each layer
        pre = []           # pre-activation of each layer
        n_layers = len(self.weights)
        for i in range(n_layers):
            z = a @ self.weights[i] + self.biases[i]
            pre.append(z)
            a = elu(z) if i < n_layers - 1 else z
            if i < n_layers - 1:
                inputs.append(a)
        y = a[0] if single else a
        cache = {"inputs": inputs, "pre": pre, "single": single}
        return y, cache

    def backward(self, cache: dict, dy: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Exact gradients of the cached forward pass.

        ``dy`` is dLoss/doutput with the same shape the forward returned.
        Returns (grads, dx) with grads ordered like params().
        """
        if "inputs" not in cache or "pre" not in cache:
            raise ValueError("stale or invalid forward cache")
        dy = np.asarray(dy, dtype=float)
        single = cache["single"]
        dz = dy[None, :] if single else dy
        inputs, pre = cache["inputs"], cache["pre"]
        if dz.shape != pre[-1].shape:
            raise ValueError(f"dy shape {dz.shape} does not match cached output {pre[-1].shape}")
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            grads[2 * i] = inputs[i].T @ dz
            grads[2 * i + 1] = dz.sum(axis=0)
            da = dz @ self.weights[i].T
            dz = da * elu_grad_from_output(pre[i - 1], inputs[i]) if i > 0 else da
        dx = dz[0] if single else dz
        return grads, dx


@dataclass
class AdamState:
    """Adam moment accumulators; shapes mirror the parameter list."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = 1e-3) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params], lr=lr)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> list[np.ndarray]:
    """One Adam update with bias correction. Updates params in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state length mismatch")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


@dataclass
class DiagonalGaussian:
    """Factorized Gaussian with state-independent learned log-std."""

    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.log_std = np.asarray(self.log_std, dtype=float)

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal(self.mean.shape)

    def log_prob(self, x: np.ndarray) -> float | np.ndarray:
        return gaussian_log_prob(self.mean, self.log_std, x)

    def entropy(self) -> float:
        return gaussian_entropy(self.log_std)


def gaussian_log_prob(mean: np.ndarray, log_std: np.ndarray, x: np.ndarray) -> float | np.ndarray:
    """Sum over dimensions of the per-dimension Gaussian log density.

    Batched means/x of shape (B, n) give a (B,) result.
    """
    mean = np.asarray(mean, dtype=float)
    x = np.asarray(x, dtype=float)
    z = (x - mean) * np.exp(-log_std)
    per_dim = -0.5 * z * z - log_std - 0.5 * LOG_2PI
    total = per_dim.sum(axis=-1)
    return float(total) if total.ndim == 0 else total


def gaussian_entropy(log_std: np.ndarray) -> float:
    """Differential entropy of the factorized Gaussian: sum of per-dim terms."""
    log_std = np.asarray(log_std, dtype=float)
    return float(np.sum(0.5 + 0.5 * LOG_2PI + log_std))


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=float)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, target: int | np.ndarray) -> tuple[float, np.ndarray]:
    """Cross-entropy of softmax(logits) against an integer class target.

    Batched logits (B, K) with targets (B,) return the mean loss and the
    gradient of that mean. grad = (softmax - onehot) / B.
    """
    logits = np.asarray(logits, dtype=float)
    if logits.ndim == 1:
        p = softmax(logits)
        t = int(target)
        if not 0 <= t < logits.shape[0]:
            raise ValueError(f"target class {t} out of range for {logits.shape[0]} logits")
        loss = -float(np.log(p[t]))
        grad = p.copy()
        grad[t] -= 1.0
        return loss, grad
    targets = np.asarray(target, dtype=int)
    p = softmax(logits)
    n = logits.shape[0]
    idx = np.arange(n)
    loss = float(-np.log(p[idx, targets]).mean())
    grad = p.copy()
    grad[idx, targets] -= 1.0
    grad /= n
    return loss, grad


def gaussian_kl_to_standard(mu: np.ndarray, log_sigma: np.ndarray) -> float | np.ndarray:
    """KL( N(mu, diag(sigma^2)) || N(0, I) ), summed over dimensions."""
    mu = np.asarray(mu, dtype=float)
    log_sigma = np.asarray(log_sigma, dtype=float)
    var = np.exp(2.0 * log_sigma)
    per_dim = 0.5 * (mu * mu + var - 1.0 - 2.0 * log_sigma)
    total = per_dim.sum(axis=-1)
    return float(total) if total.ndim == 0 else total


def clamp_log_std(log_std: np.ndarray) -> None:
    """In-place projection of a learned log-std parameter into its legal range."""
    np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX, out=log_std)


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale the gradient list in place so its global L2 norm is at most
    max_norm; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


def finite_difference_gradient(loss_fn, params: list[np.ndarray], probes: list[tuple[int, tuple]],
                               h: float = 1e-5) -> list[float]:
    """Central finite differences of ``loss_fn()`` wrt selected parameter entries.

    ``probes`` is a list of (param_index, element_index_tuple). The function
    perturbs the live arrays, so loss_fn must read them by reference.
    """
    out = []
    for pi, idx in probes:
        p = params[pi]
        orig = p[idx]
        p[idx] = orig + h
        up = loss_fn()
        p[idx] = orig - h
        down = loss_fn()
        p[idx] = orig
        out.append((up - down) / (2.0 * h))
    return out
