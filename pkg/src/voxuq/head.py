"""Uncertainty-aware prediction head: residual MLP blocks with optional skip
connections and spectral normalization, a classifier layer, manual backprop,
a minibatch training loop, and Lipschitz-ratio probing.
"""

from dataclasses import dataclass, field

import numpy as np

from .nn_core import (
    GradTape,
    LinearLayer,
    OptimizerState,
    ShapeError,
    cross_entropy_loss,
    leaky_relu,
    leaky_relu_grad,
    linear_forward,
    power_iteration,
    softmax,
)


@dataclass
class HeadConfig:
    input_dim: int = 32
    hidden_width: int = 32
    num_layers: int = 3          # hidden linear layers, classifier excluded
    skip: bool = True
    sn_enabled: bool = True
    sn_coefficient: float = 1.0
    num_classes: int = 17

    def __post_init__(self):
        if self.num_layers < 2:
            raise ValueError("num_layers must be >= 2")
        if self.sn_coefficient <= 0:
            raise ValueError("sn_coefficient must be positive")

    @property
    def penultimate_dim(self):
        return self.hidden_width


@dataclass
class HeadOutput:
    logits: np.ndarray
    penultimate_features: np.ndarray


@dataclass
class LipschitzEstimate:
    lower_ratio: float
    upper_ratio: float
    sample_count: int
    skipped_pairs: int = 0


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    accuracies: list = field(default_factory=list)


class ResidualMlpHead:
    """MLP head g: blocks compute x + act(x W^T + b) when skip is enabled and
    the block is square; the first layer projects input_dim -> hidden_width
    without a skip when the dimensions differ. Penultimate features are the
    output of the last hidden block, before the classifier.
    """

    def __init__(self, config, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.layers = []
        in_dim = config.input_dim
        for _ in range(config.num_layers):
            self.layers.append(
                LinearLayer(config.hidden_width, in_dim, rng,
                            sn_enabled=config.sn_enabled,
                            sn_coefficient=config.sn_coefficient)
            )
            in_dim = config.hidden_width
        self.classifier = LinearLayer(config.num_classes, config.hidden_width, rng,
                                      sn_enabled=False)

    # -- parameter plumbing ------------------------------------------------

    def parameters(self):
        """Named views of every trainable array (mutating them mutates the head)."""
        params = {}
        for i, layer in enumerate(self.layers):
            params["layer%d.weight" % i] = layer.weight
            params["layer%d.bias" % i] = layer.bias
        params["classifier.weight"] = self.classifier.weight
        params["classifier.bias"] = self.classifier.bias
        return params

    def param_count(self):
        return sum(p.size for p in self.parameters().values())

    def _block_has_skip(self, i):
        return self.config.skip and self.layers[i].in_dim == self.layers[i].out_dim

    # -- forward / backward ------------------------------------------------

    def forward(self, features, tape=None, update_sn=False, sn_iters=1,
                dropout_p=0.0, dropout_rng=None):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.config.input_dim:
            raise ShapeError("head expects n x %d features" % self.config.input_dim)
        x = features
        for i, layer in enumerate(self.layers):
            pre = linear_forward(layer, x, tape=tape, update_sn=update_sn, sn_iters=sn_iters)
            act = leaky_relu(pre)
            if dropout_p > 0.0:
                keep = dropout_rng.random(act.shape) >= dropout_p
                act = act * keep / (1.0 - dropout_p)
            out = x + act if self._block_has_skip(i) else act
            if tape is not None:
                tape.push("block", {"pre": pre, "skip": self._block_has_skip(i)})
            x = out
        penultimate = x
        logits = linear_forward(self.classifier, x, tape=tape, update_sn=False)
        return HeadOutput(logits=logits, penultimate_features=penultimate)

    def backward(self, tape, logits_grad):
        """Walk the tape in reverse, returning a dict of parameter gradients."""
        grads = {name: np.zeros_like(p) for name, p in self.parameters().items()}
        layer_index = {id(layer): ("layer%d" % i) for i, layer in enumerate(self.layers)}
        layer_index[id(self.classifier)] = "classifier"
        g = np.asarray(logits_grad, dtype=np.float64)
        pending_skip = None
        for op, cache in tape.reversed_entries():
            if op == "linear":
                layer = cache["layer"]
                name = layer_index[id(layer)]
                d_w_eff = g.T @ cache["x"]
                grads[name + ".weight"] += layer.raw_weight_grad(d_w_eff, cache["sn"])
                grads[name + ".bias"] += g.sum(axis=0)
                g = g @ cache["w_eff"]
                if pending_skip is not None:
                    # identity path of the residual add rejoins the branch here
                    g = g + pending_skip
                    pending_skip = None
            elif op == "block":
                upstream = g
                g = upstream * leaky_relu_grad(cache["pre"])
                pending_skip = upstream if cache["skip"] else None
            else:
                raise RuntimeError("unknown tape op %r" % op)
        return grads

    def loss_and_grads(self, features, labels, update_sn=False):
        tape = GradTape()
        out = self.forward(features, tape=tape, update_sn=update_sn)
        loss, dlogits = cross_entropy_loss(out.logits, labels)
        grads = self.backward(tape, dlogits)
        return loss, grads, out

    def round_weights_to_f32(self):
        """Snap parameters to float32-representable values.

        The artifact format stores head weights as float32; rounding here
        makes save/load round-trips bit-exact for trained heads.
        """
        for p in self.parameters().values():
            p[...] = p.astype(np.float32).astype(np.float64)

    def finalize_spectral_norm(self, iters=200):
        """Bake converged SN rescaling into the raw weights (post-training)."""
        if not self.config.sn_enabled:
            return
        for layer in self.layers:
            sigma = power_iteration(layer.weight, layer.sn_state, iters)
            c = layer.sn_coefficient
            if sigma > c:
                layer.weight *= c / sigma
                layer.sn_state.sigma_hat = c


def head_forward(head, features):
    """Evaluation-mode forward pass."""
    return head.forward(features, update_sn=False)


def dropout_forward(head, features, p, seed):
    """Forward pass with inverted dropout after every hidden activation."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout p must be in [0, 1)")
    if p == 0.0:
        return head.forward(features, update_sn=False)
    rng = np.random.default_rng(seed)
    return head.forward(features, update_sn=False, dropout_p=p, dropout_rng=rng)


def train_head(head, features, labels, opt=None, epochs=10, batch_size=512, seed=0):
    """Minibatch cross-entropy training; SN re-applied every step when enabled.

    `features` is n x input_dim, `labels` length n. Returns a TrainLog with
    per-epoch mean loss and full-pass accuracy.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.shape[0] == 0:
        raise ValueError("empty training set")
    if labels.max(initial=0) >= head.config.num_classes:
        raise ValueError("label exceeds num_classes")
    if opt is None:
        opt = OptimizerState(kind="adam", lr=1e-3)
    rng = np.random.default_rng(seed)
    n = features.shape[0]
    log = TrainLog()
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grads, _ = head.loss_and_grads(features[idx], labels[idx], update_sn=True)
            opt.step(head.parameters(), grads)
            losses.append(loss)
        preds = predict_classes(head, features)
        acc = float((preds == labels).mean())
        log.epochs.append(epoch)
        log.losses.append(float(np.mean(losses)))
        log.accuracies.append(acc)
    head.finalize_spectral_norm()
    head.round_weights_to_f32()
    return log


def predict_classes(head, features, batch_size=65536):
    out = []
    for start in range(0, features.shape[0], batch_size):
        logits = head.forward(features[start:start + batch_size], update_sn=False).logits
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


def estimate_lipschitz(head, probe_pairs):
    """Min / max ratio of penultimate-feature distance to input distance.

    Coincident pairs are skipped and counted rather than raising.
    """
    if len(probe_pairs) == 0:
        raise ValueError("need at least one probe pair")
    ratios = []
    skipped = 0
    for x1, x2 in probe_pairs:
        x1 = np.asarray(x1, dtype=np.float64)
        x2 = np.asarray(x2, dtype=np.float64)
        d_in = np.linalg.norm(x1 - x2)
        if d_in == 0.0:
            skipped += 1
            continue
        f1 = head.forward(x1[None, :], update_sn=False).penultimate_features[0]
        f2 = head.forward(x2[None, :], update_sn=False).penultimate_features[0]
        ratios.append(np.linalg.norm(f1 - f2) / d_in)
    if not ratios:
        raise ValueError("all probe pairs were coincident")
    return LipschitzEstimate(lower_ratio=float(min(ratios)),
                             upper_ratio=float(max(ratios)),
                             sample_count=len(ratios),
                             skipped_pairs=skipped)


def lipschitz_upper_bound(config):
    """Product over hidden blocks of (1 + c): composition bound for SN blocks."""
    return (1.0 + config.sn_coefficient) ** config.num_layers


def head_probs(head, features, batch_size=65536):
    """Softmax probabilities in evaluation mode, batched."""
    chunks = []
    for start in range(0, features.shape[0], batch_size):
        logits = head.forward(features[start:start + batch_size], update_sn=False).logits
        chunks.append(softmax(logits))
    return np.concatenate(chunks) if chunks else np.empty((0, head.config.num_classes))
