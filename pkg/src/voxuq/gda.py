"""Per-class Gaussian density over penultimate features: reservoir-sampled
feature collection, full-covariance fitting with a jitter ladder, stabilized
mixture log-density, and the epistemic uncertainty score.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

DEFAULT_EPS_LADDER = (1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3)
DEFAULT_CAP_PER_CLASS = 20000


class FitError(RuntimeError):
    """Raised when the Gaussian model cannot be fitted."""


@dataclass
class FeatureBank:
    """Per-class reservoirs of feature vectors, capped per class."""

    num_classes: int
    cap_per_class: int
    vectors: dict = field(default_factory=dict)      # class id -> list of arrays
    seen_counts: dict = field(default_factory=dict)  # class id -> total seen

    def class_array(self, c):
        return np.array(self.vectors.get(c, []), dtype=np.float64)

    @property
    def missing_classes(self):
        return [c for c in range(self.num_classes) if not self.vectors.get(c)]


class GdaModel:
    """One full-covariance Gaussian per class plus class priors.

    Covariances are stored through their (regularized) Cholesky factors; the
    inverse factors are precomputed for fast batched queries. Instances are
    immutable after fitting and safe for concurrent reads.
    """

    def __init__(self, means, chols, log_dets, log_priors, eps_used, counts):
        self.means = means            # (K, d)
        self.chols = chols            # (K, d, d) lower triangular
        self.log_dets = log_dets      # (K,)
        self.log_priors = log_priors  # (K,)
        self.eps_used = eps_used
        self.counts = counts          # (K,) samples used per class
        self.dim = means.shape[1]
        self.num_classes = means.shape[0]
        self.inv_chols = np.stack([
            solve_triangular(chols[c], np.eye(self.dim), lower=True)
            for c in range(self.num_classes)
        ])

    def log_density(self, z):
        """Mixture log-density log sum_c pi_c N(z; mu_c, Sigma_c), log-sum-exp
        stabilized. Accepts one vector or an n x d batch; returns a scalar or
        a length-n vector accordingly.
        """
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        if single:
            z = z[None, :]
        if z.shape[1] != self.dim:
            raise ValueError("query dim %d != model dim %d" % (z.shape[1], self.dim))
        const = self.dim * np.log(2.0 * np.pi)
        comp = np.empty((z.shape[0], self.num_classes))
        for c in range(self.num_classes):
            y = (z - self.means[c]) @ self.inv_chols[c].T
            quad = np.einsum("ij,ij->i", y, y)
            comp[:, c] = self.log_priors[c] - 0.5 * (const + self.log_dets[c] + quad)
        m = comp.max(axis=1)
        out = m + np.log(np.exp(comp - m[:, None]).sum(axis=1))
        return float(out[0]) if single else out


def collect_features(head, scenes, cap_per_class, seed, num_classes=None):
    """One deterministic pass over `scenes`, reservoir-sampling penultimate
    feature vectors per ground-truth class (Algorithm R).

    `scenes` yields (features, labels) pairs with features n x d_in and
    integer labels of length n.
    """
    if num_classes is None:
        num_classes = head.config.num_classes
    rng = np.random.default_rng(seed)
    bank = FeatureBank(num_classes=num_classes, cap_per_class=cap_per_class)
    for c in range(num_classes):
        bank.vectors[c] = []
        bank.seen_counts[c] = 0
    for features, labels in scenes:
        feats = head.forward(np.asarray(features, dtype=np.float64),
                             update_sn=False).penultimate_features
        labels = np.asarray(labels).ravel()
        for c in np.unique(labels):
            rows = feats[labels == c]
            res = bank.vectors[int(c)]
            seen = bank.seen_counts[int(c)]
            for row in rows:
                if len(res) < cap_per_class:
                    res.append(row.copy())
                else:
                    j = int(rng.integers(0, seen + 1))
                    if j < cap_per_class:
                        res[j] = row.copy()
                seen += 1
            bank.seen_counts[int(c)] = seen
    return bank


def fit_gda(bank, eps_ladder=DEFAULT_EPS_LADDER):
    """Fit means, covariances (denominator n-1) and priors from the bank.

    The smallest ladder entry eps for which Sigma_c + eps*scale*I is
    Cholesky-factorizable for every class is applied, where scale is the mean
    covariance diagonal across non-degenerate classes (1.0 if none).
    """
    missing = bank.missing_classes
    if missing:
        raise FitError("no feature vectors for class(es): %s" % missing)
    k = bank.num_classes
    arrays = [bank.class_array(c) for c in range(k)]
    dim = arrays[0].shape[1]
    means = np.stack([a.mean(axis=0) for a in arrays])
    covs = []
    for a, mu in zip(arrays, means):
        if a.shape[0] == 1:
            covs.append(np.zeros((dim, dim)))
        else:
            d = a - mu
            covs.append(d.T @ d / (a.shape[0] - 1))
    covs = np.stack(covs)
    diag_means = [np.trace(cov) / dim for a, cov in zip(arrays, covs) if a.shape[0] > 1]
    scale = float(np.mean(diag_means)) if diag_means else 1.0
    if scale <= 0.0:
        scale = 1.0

    chols = None
    eps_used = None
    for eps in eps_ladder:
        try:
            cand = np.stack([np.linalg.cholesky(cov + eps * scale * np.eye(dim))
                             for cov in covs])
        except np.linalg.LinAlgError:
            continue
        chols, eps_used = cand, eps * scale
        break
    if chols is None:
        raise FitError("no ladder epsilon produced SPD covariances")

    log_dets = 2.0 * np.sum(np.log(np.diagonal(chols, axis1=1, axis2=2)), axis=1)
    counts = np.array([a.shape[0] for a in arrays], dtype=np.int64)
    log_priors = np.log(counts / counts.sum())
    return GdaModel(means=means, chols=chols, log_dets=log_dets,
                    log_priors=log_priors, eps_used=eps_used, counts=counts)


def log_density(model, z):
    return model.log_density(z)


def epistemic_score(model, features):
    """Negative mixture log-density per row; larger means more uncertain."""
    features = np.asarray(features, dtype=np.float64)
    return -model.log_density(features)


def gmm_param_count(dim, k):
    """Mean plus full covariance parameters per class: K * (d + d^2)."""
    if dim < 1 or k < 1:
        raise ValueError("dim and k must be >= 1")
    return k * (dim + dim * dim)
