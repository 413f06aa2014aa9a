"""Frechet distance and Inception-style score on frozen desk-scale evaluators.

Inception-v3 is not available here, so two fixed stand-ins are used: a
random-projection feature network (for the Frechet distance) and a softmax
classifier trained once on real data (for the inception score). Both are
seeded independently of training, so numbers are comparable across runs of
the same dataset but not with published image benchmarks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InsufficientSamplesError, PreconditionError
from .nn import AdamState, Linear, adam_step, glorot_uniform
from .numerics import GaussianStats, fit_gaussian, make_rng, softmax, sqrtm_psd, sym_eig

REG_EPS = 1e-6
REG_TRIGGER = 1e-10


def fid(a: GaussianStats, b: GaussianStats):
    """Squared Frechet distance between two Gaussians.

    Uses tr sqrtm(S_a^1/2 S_b S_a^1/2), which equals tr (S_a S_b)^1/2 but
    only needs symmetric square roots.
    """
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise DimensionError(f"stats dimensions differ: {a.mu.shape} vs {b.mu.shape}")
    diff = a.mu - b.mu
    root_a = sqrtm_psd(a.sigma)
    inner = root_a @ b.sigma @ root_a
    cross = sqrtm_psd(0.5 * (inner + inner.T))
    d = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * np.trace(cross))
    return max(d, 0.0)


def regularize(stats: GaussianStats):
    """Add 1e-6 I to a covariance whose smallest eigenvalue is below 1e-10.

    Returns ``(stats, was_regularized)``.
    """
    w, _ = sym_eig(stats.sigma)
    if w.size and w[0] < REG_TRIGGER:
        return GaussianStats(stats.mu, stats.sigma + REG_EPS * np.eye(stats.dim)), True
    return stats, False


def inception_score(probs):
    """exp(mean_i KL(p(y|x_i) || p(y))) with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise DimensionError("expected a non-empty [n x K] probability matrix")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise PreconditionError("rows must be non-negative and sum to 1")
    marginal = np.maximum(p.mean(axis=0), 1e-12)
    safe = np.where(p > 0, p, 1.0)
    kl = np.sum(np.where(p > 0, p * (np.log(safe) - np.log(marginal)), 0.0), axis=1)
    return float(np.exp(kl.mean()))


class EvalNets:
    """Frozen feature extractor and evaluation classifier.

    The feature net is ``W2 tanh(W1 x + b1)`` with random weights from
    ``eval_seed``. The classifier is multinomial logistic regression fitted
    on ``(x_train, labels)`` with full-batch Adam.
    """

    def __init__(self, data_dim, n_labels, x_train, labels, eval_seed=1234, feat_dim=16, hidden=64,
                 fit_steps=300, fit_lr=0.05):
        rng = make_rng([eval_seed, 0xFE])
        self.data_dim, self.n_labels, self.feat_dim = data_dim, n_labels, feat_dim
        self._W1 = glorot_uniform(rng, hidden, data_dim)
        self._b1 = rng.uniform(-0.5, 0.5, size=hidden)
        self._W2 = glorot_uniform(rng, feat_dim, hidden)
        x_train = np.asarray(x_train, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        self._mean = x_train.mean(axis=0)
        self._scale = x_train.std(axis=0) + 1e-6
        clf = Linear(data_dim, n_labels, rng)
        state = AdamState()
        xs = (x_train - self._mean) / self._scale
        onehot = np.eye(n_labels)[labels]
        for _ in range(fit_steps):
            p = softmax(clf.forward(xs))
            _, gW, gb = clf.backward((p - onehot) / xs.shape[0])
            adam_step(clf.params(), {"W": gW, "b": gb}, state, fit_lr)
        self._clf_W = clf.W.copy()
        self._clf_b = clf.b.copy()
        for arr in (self._W1, self._b1, self._W2, self._clf_W, self._clf_b, self._mean, self._scale):
            arr.setflags(write=False)

    @classmethod
    def from_dataset(cls, dataset, eval_seed=1234, **kw):
        return cls(dataset.dim, dataset.n_labels, dataset.x, dataset.labels, eval_seed=eval_seed, **kw)

    def features(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.data_dim:
            raise DimensionError(f"expected samples of dimension {self.data_dim}, got {x.shape}")
        return np.tanh(x @ self._W1.T + self._b1) @ self._W2.T

    def class_probs(self, x):
        xs = (np.asarray(x, dtype=np.float64) - self._mean) / self._scale
        return softmax(xs @ self._clf_W.T + self._clf_b)

    def accuracy(self, x, labels):
        return float(np.mean(np.argmax(self.class_probs(x), axis=1) == labels))


@dataclass(frozen=True)
class MetricsReport:
    fid: float
    inception_score: float
    noise_floor_fid: float
    n_real: int
    n_generated: int
    regularized: bool

    def as_row(self):
        return {
            "fid": self.fid,
            "is": self.inception_score,
            "noise_floor_fid": self.noise_floor_fid,
            "n_real": self.n_real,
            "n_generated": self.n_generated,
            "regularized": int(self.regularized),
        }


def evaluate(generator, dataset, eval_nets: EvalNets, n_samples=2000, rng=None, caption_dim=32):
    """Score ``generator`` against ``dataset`` with frozen evaluators.

    ``generator`` needs a ``sample(captions, labels, rng)`` method. Captions
    for generation are taken from uniformly drawn dataset rows. The real
    reference set is the dataset (subsampled to ``n_samples`` rows when
    larger); the noise floor is the distance between two disjoint halves of
    that reference set.
    """
    rng = rng if rng is not None else make_rng(0)
    need = eval_nets.feat_dim + 2
    if n_samples < need or len(dataset) < 2 * need:
        raise InsufficientSamplesError(
            f"need n_samples >= {need} and at least {2 * need} real rows "
            f"(got {n_samples} and {len(dataset)})"
        )
    if dataset.dim != eval_nets.data_dim:
        raise DimensionError(f"dataset dimension {dataset.dim} != evaluator dimension {eval_nets.data_dim}")
    ref_rows = np.arange(len(dataset))
    if len(dataset) > n_samples:
        ref_rows = np.sort(rng.choice(len(dataset), n_samples, replace=False))
    real_feats = eval_nets.features(dataset.x[ref_rows])
    caps = dataset.caption_vectors(caption_dim)
    labels = dataset.labels
    pick = rng.integers(0, len(dataset), size=n_samples)
    fake = generator.sample(caps[pick], labels[pick], rng)
    fake_feats = eval_nets.features(fake)

    real_stats, reg_r = regularize(fit_gaussian(real_feats))
    fake_stats, reg_f = regularize(fit_gaussian(fake_feats))
    score = fid(real_stats, fake_stats)

    perm = rng.permutation(real_feats.shape[0])
    half = real_feats.shape[0] // 2
    floor = fid(fit_gaussian(real_feats[perm[:half]]), fit_gaussian(real_feats[perm[half : 2 * half]]))
    is_score = inception_score(eval_nets.class_probs(fake))
    return MetricsReport(score, is_score, floor, int(real_feats.shape[0]), int(n_samples), reg_r or reg_f)
