"""Dense float64 numeric core: linear layers, spectral normalization via power
iteration, softmax / cross-entropy, a gradient tape for manual backprop, and
small optimizers (SGD-momentum, Adam).

Everything here is deterministic given a seed. Random state uses numpy's
PCG64 generator throughout.
"""

import numpy as np

LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    """Raised when operand dimensions do not line up."""


class StateError(RuntimeError):
    """Raised on out-of-order use of stateful objects (e.g. backward before forward)."""


def leaky_relu(x):
    return np.where(x >= 0.0, x, LEAKY_SLOPE * x)


def leaky_relu_grad(pre):
    return np.where(pre >= 0.0, 1.0, LEAKY_SLOPE)


def softmax(logits):
    """Row-wise softmax with max-subtraction for stability."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(logits, labels):
    """Mean cross-entropy over rows plus its gradient wrt the logits.

    Returns (loss, grad) with grad = (softmax - onehot) / n.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError("label out of range [0, %d)" % k)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_z[:, None]
    loss = -log_probs[np.arange(n), labels].mean()
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad


class SpectralState:
    """Persistent power-iteration vectors for one weight matrix."""

    def __init__(self, out_dim, in_dim, rng):
        u = rng.standard_normal(out_dim)
        v = rng.standard_normal(in_dim)
        self.u = u / np.linalg.norm(u)
        self.v = v / np.linalg.norm(v)
        self.sigma_hat = 0.0


def power_iteration(weight, state, iters=1):
    """Estimate the top singular value of `weight` by alternating power steps.

    Updates state.u / state.v in place and returns sigma_hat = u^T W v.
    An all-zero matrix returns 0 with the state untouched.
    """
    weight = np.asarray(weight, dtype=np.float64)
    if not np.any(weight):
        state.sigma_hat = 0.0
        return 0.0
    u, v = state.u, state.v
    for _ in range(iters):
        v = weight.T @ u
        v_norm = np.linalg.norm(v)
        if v_norm == 0.0:
            break
        v = v / v_norm
        u = weight @ v
        u_norm = np.linalg.norm(u)
        if u_norm == 0.0:
            break
        u = u / u_norm
    state.u, state.v = u, v
    state.sigma_hat = float(u @ weight @ v)
    return state.sigma_hat


class LinearLayer:
    """Dense layer y = x W^T + b with optional spectral normalization.

    The raw weight is what the optimizer updates; the effective weight used
    in the forward pass is W * min(1, c / sigma_hat) when SN is enabled.
    """

    def __init__(self, out_dim, in_dim, rng, sn_enabled=False, sn_coefficient=1.0):
        self.weight = rng.standard_normal((out_dim, in_dim)) * np.sqrt(2.0 / in_dim)
        self.bias = np.zeros(out_dim)
        self.sn_enabled = sn_enabled
        self.sn_coefficient = float(sn_coefficient)
        self.sn_state = SpectralState(out_dim, in_dim, rng)

    @property
    def out_dim(self):
        return self.weight.shape[0]

    @property
    def in_dim(self):
        return self.weight.shape[1]

    def apply_spectral_norm(self, iters=1, update_state=True):
        """Return the SN-effective weight W * min(1, c / sigma_hat).

        One power-iteration step per call during training; pass a large
        `iters` for a converged estimate at evaluation time.
        """
        if not self.sn_enabled:
            return self.weight
        if update_state:
            sigma = power_iteration(self.weight, self.sn_state, iters)
        else:
            sigma = float(self.sn_state.u @ self.weight @ self.sn_state.v)
        if sigma <= self.sn_coefficient or sigma == 0.0:
            return self.weight
        return self.weight * (self.sn_coefficient / sigma)

    def effective_weight_and_cache(self, update_state=True, iters=1):
        """Forward-pass weight plus the quantities backward needs.

        Returns (w_eff, cache) where cache holds the SN scale, sigma and the
        u/v snapshot used, so the backward pass can differentiate through
        sigma_hat = u^T W v with u, v held fixed.
        """
        if not self.sn_enabled:
            return self.weight, {"scale": 1.0, "clipped": False}
        if update_state:
            power_iteration(self.weight, self.sn_state, iters)
        u = self.sn_state.u.copy()
        v = self.sn_state.v.copy()
        sigma = float(u @ self.weight @ v)
        c = self.sn_coefficient
        if sigma <= c or sigma == 0.0:
            return self.weight, {"scale": 1.0, "clipped": False, "u": u, "v": v, "sigma": sigma}
        w_eff = self.weight * (c / sigma)
        return w_eff, {"scale": c / sigma, "clipped": True, "u": u, "v": v, "sigma": sigma}

    def raw_weight_grad(self, grad_eff, cache):
        """Map a gradient wrt the effective weight back to the raw weight.

        When the SN rescale was active, W_eff = c W / (u^T W v), so the
        product rule contributes a rank-one correction along u v^T.
        """
        if not cache.get("clipped", False):
            return grad_eff
        scale = cache["scale"]
        sigma = cache["sigma"]
        inner = float(np.sum(grad_eff * self.weight))
        return scale * grad_eff - (scale / sigma) * inner * np.outer(cache["u"], cache["v"])


def linear_forward(layer, x, tape=None, update_sn=True, sn_iters=1):
    """y = x W_eff^T + b, caching activations on the tape when given."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise ShapeError(
            "linear_forward: input has %s columns, layer expects %d"
            % (x.shape[1] if x.ndim == 2 else "?", layer.in_dim)
        )
    w_eff, sn_cache = layer.effective_weight_and_cache(update_state=update_sn, iters=sn_iters)
    y = x @ w_eff.T + layer.bias
    if tape is not None:
        tape.push("linear", {"layer": layer, "x": x, "w_eff": w_eff, "sn": sn_cache})
    return y


class GradTape:
    """Ordered record of forward ops; backward must consume it in reverse."""

    def __init__(self):
        self._entries = []
        self._consumed = False

    def push(self, op, cache):
        self._entries.append((op, cache))
        self._consumed = False

    def reversed_entries(self):
        if not self._entries:
            raise StateError("backward called without a completed forward pass")
        entries = list(reversed(self._entries))
        self.clear()
        return entries

    def clear(self):
        self._entries = []
        self._consumed = True

    def __len__(self):
        return len(self._entries)


class OptimizerState:
    """SGD-with-momentum or Adam over a dict of named parameter arrays."""

    def __init__(self, kind="adam", lr=1e-3, momentum=0.9, beta1=0.9, beta2=0.999, eps=1e-8):
        if kind not in ("sgd", "adam"):
            raise ValueError("unknown optimizer kind: %r" % kind)
        self.kind = kind
        self.lr = lr
        self.momentum = momentum
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._slots = {}

    def _slot(self, name, shape):
        if name not in self._slots:
            if self.kind == "sgd":
                self._slots[name] = np.zeros(shape)
            else:
                self._slots[name] = (np.zeros(shape), np.zeros(shape))
        return self._slots[name]

    def step(self, params, grads):
        """In-place update of every parameter in `params` from `grads`."""
        self.step_count += 1
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError("gradient shape %s != parameter shape %s for %s"
                                 % (g.shape, p.shape, name))
            if self.kind == "sgd":
                vel = self._slot(name, p.shape)
                vel *= self.momentum
                vel -= self.lr * g
                p += vel
            else:
                m, v = self._slot(name, p.shape)
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                m_hat = m / (1.0 - self.beta1 ** self.step_count)
                v_hat = v / (1.0 - self.beta2 ** self.step_count)
                p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
