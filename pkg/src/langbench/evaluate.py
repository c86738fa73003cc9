"""Posterior-averaged prediction, FGSM attack and OOD confidence histogram.

An ensemble is a list of parameter snapshots captured after burn-in; the
predictive distribution is the arithmetic mean of the per-snapshot
softmax outputs. Adversarial gradients are taken through that averaged
predictive, so the attack targets the same object the accuracy is
measured on.
"""

from dataclasses import dataclass

import numpy as np

from .net import softmax


class SnapshotEnsemble:
    """Layout-congruent parameter snapshots with capture metadata."""

    def __init__(self, dim):
        self.dim = dim
        self.thetas = []
        self.steps = []
        self.lambdas = []

    def __len__(self):
        return len(self.thetas)

    def append(self, theta, step, lam):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.dim,):
            raise ValueError(f"snapshot shape {theta.shape} != ({self.dim},)")
        self.thetas.append(theta.copy())
        self.steps.append(int(step))
        self.lambdas.append(float(lam))

    @classmethod
    def from_arrays(cls, thetas, steps, lambdas):
        ens = cls(thetas.shape[1])
        for theta, step, lam in zip(thetas, steps, lambdas):
            ens.append(theta, step, lam)
        return ens

    def as_arrays(self):
        return (np.asarray(self.thetas).reshape(len(self), self.dim),
                np.asarray(self.steps, dtype=np.int64),
                np.asarray(self.lambdas))


@dataclass
class PredictionSummary:
    probabilities: np.ndarray  # (n, classes) averaged over snapshots
    predictions: np.ndarray    # argmax, ties toward the lower class index
    max_prob: np.ndarray
    accuracy: float | None

    def write_csv(self, path, labels=None):
        n = len(self.predictions)
        labels = np.full(n, -1) if labels is None else labels
        with open(path, "w") as fh:
            fh.write("example,label,prediction,max_prob\n")
            for i in range(n):
                fh.write(f"{i},{int(labels[i])},{int(self.predictions[i])},"
                         f"{float(self.max_prob[i])!r}\n")


def _snapshot_list(ensemble):
    thetas = ensemble.thetas if isinstance(ensemble, SnapshotEnsemble) else list(ensemble)
    if not thetas:
        raise ValueError("ensemble is empty")
    dims = {t.shape for t in thetas}
    if len(dims) != 1:
        raise ValueError(f"snapshots disagree on layout: {sorted(dims)}")
    return thetas


def mean_probabilities(net, ensemble, x, batch_size=256):
    """Arithmetic mean of per-snapshot softmax outputs."""
    thetas = _snapshot_list(ensemble)
    chunks = []
    for start in range(0, x.shape[0], batch_size):
        xb = x[start:start + batch_size]
        acc = None
        for theta in thetas:
            p = softmax(net.forward(theta, xb)[0])
            acc = p if acc is None else acc + p
        chunks.append(acc / len(thetas))
    return np.concatenate(chunks, axis=0)


def posterior_predict(net, ensemble, x, labels=None, batch_size=256):
    probs = mean_probabilities(net, ensemble, x, batch_size)
    preds = probs.argmax(axis=1)
    acc = None if labels is None else float(np.mean(preds == np.asarray(labels)))
    return PredictionSummary(probabilities=probs, predictions=preds,
                             max_prob=probs.max(axis=1), accuracy=acc)


def ensemble_input_gradient(net, ensemble, x, labels):
    """(loss, d loss / d x) of the mean NLL of the averaged predictive."""
    thetas = _snapshot_list(ensemble)
    n = x.shape[0]
    labels = np.asarray(labels)
    per_model = []
    mean_p = None
    for theta in thetas:
        logits, cache = net.forward(theta, x)
        p = softmax(logits)
        per_model.append((theta, cache, p))
        mean_p = p if mean_p is None else mean_p + p
    mean_p /= len(thetas)
    picked = mean_p[np.arange(n), labels]
    loss = float(np.mean(-np.log(picked)))
    dmean = np.zeros_like(mean_p)
    dmean[np.arange(n), labels] = -1.0 / (picked * n)
    dx = np.zeros_like(x, dtype=np.float64)
    for theta, cache, p in per_model:
        dp = dmean / len(thetas)
        # softmax vector-Jacobian product
        dlogits = p * (dp - (dp * p).sum(axis=1, keepdims=True))
        _, dxi = net.backward(theta, cache, dlogits)
        dx += dxi
    return loss, dx


def fgsm(net, ensemble, x, labels, epsilon):
    """x + epsilon * sign(input gradient), clipped back into [0, 1]."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    if epsilon == 0:
        return np.array(x, dtype=np.float64)
    _, dx = ensemble_input_gradient(net, ensemble, x, labels)
    return np.clip(x + epsilon * np.sign(dx), 0.0, 1.0)


def adversarial_accuracy(net, ensemble, x, labels, epsilon, batch_size=256):
    """Accuracy of the averaged predictive on FGSM-perturbed inputs."""
    correct = 0
    for start in range(0, x.shape[0], batch_size):
        xb = x[start:start + batch_size]
        yb = labels[start:start + batch_size]
        x_adv = fgsm(net, ensemble, xb, yb, epsilon)
        preds = posterior_predict(net, ensemble, x_adv, batch_size=batch_size).predictions
        correct += int(np.sum(preds == yb))
    return correct / x.shape[0]


@dataclass
class OodReport:
    counts: np.ndarray
    edges: np.ndarray
    mean: float
    median: float
    max_prob: np.ndarray

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("bin_left,bin_right,count\n")
            for left, right, count in zip(self.edges[:-1], self.edges[1:], self.counts):
                fh.write(f"{float(left)!r},{float(right)!r},{int(count)}\n")


def ood_max_prob(net, ensemble, x, bins=50, batch_size=256):
    """Distribution of the per-example top class probability."""
    summary = posterior_predict(net, ensemble, x, batch_size=batch_size)
    counts, edges = np.histogram(summary.max_prob, bins=bins, range=(0.0, 1.0))
    return OodReport(counts=counts, edges=edges,
                     mean=float(summary.max_prob.mean()),
                     median=float(np.median(summary.max_prob)),
                     max_prob=summary.max_prob)
