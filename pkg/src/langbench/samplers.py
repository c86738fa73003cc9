"""The shared update rule behind all five samplers.

One step moves the flat parameter vector by

    theta' = theta + lambda_t * (ascent gradient) + G @ eps,
    eps ~ N(0, lambda_t * I),

where the ascent gradient is the full-dataset log-posterior gradient
(mini-batch likelihood gradient scaled by n/J, plus the prior gradient)
and G selects the sampler: 0 for SGD, identity for SGLD and FSGD (FSGD
with a constant rate), the diagonal RMSprop preconditioner for PSGLD, and
the block Kronecker-factored inverse curvature for KSGLD. The gradient
term is never preconditioned; only the noise is.
"""

from dataclasses import dataclass

import numpy as np

KINDS = ("SGD", "FSGD", "SGLD", "PSGLD", "KSGLD")


@dataclass(frozen=True)
class Schedule:
    """Step-size schedule lambda_t = a * (1 + t/b)^(-gamma), or a constant."""

    kind: str = "poly"
    a: float = 1e-5
    b: float = 100.0
    gamma: float = 0.55

    def __post_init__(self):
        if self.kind not in ("poly", "constant"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.a <= 0:
            raise ValueError("schedule: a must be positive")
        if self.kind == "poly":
            if self.b <= 0:
                raise ValueError("schedule: b must be positive")
            if not 0.5 < self.gamma <= 1.0:
                raise ValueError("schedule: gamma must lie in (0.5, 1]")

    def rate(self, t):
        if t < 0:
            raise ValueError("t must be non-negative")
        if self.kind == "constant":
            return self.a
        return self.a * (1.0 + t / self.b) ** (-self.gamma)


def schedule_rate(schedule, t):
    return schedule.rate(t)


def log_prior(theta, precision):
    """Gaussian log-prior up to its normalizing constant."""
    if precision < 0:
        raise ValueError("prior precision must be non-negative")
    return -0.5 * precision * float(theta @ theta)


def prior_grad(theta, precision):
    """Gradient of the Gaussian log-prior: -precision * theta."""
    if precision < 0:
        raise ValueError("prior precision must be non-negative")
    return -precision * np.asarray(theta, dtype=np.float64)


class RmspropState:
    """Running mean of squared gradients and the derived diagonal scaling."""

    def __init__(self, dim, alpha=0.99, epsilon=1e-5):
        if not 0.0 <= alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        self.V = np.zeros(dim)
        self.alpha = alpha
        self.epsilon = epsilon

    def update(self, grads):
        grads = np.asarray(grads, dtype=np.float64)
        if grads.shape != self.V.shape:
            raise ValueError(f"gradient shape {grads.shape} != state shape {self.V.shape}")
        self.V = self.alpha * self.V + (1.0 - self.alpha) * grads ** 2

    def preconditioner(self):
        """Per-coordinate noise scaling 1 / (sqrt(V) + epsilon)."""
        return 1.0 / (np.sqrt(self.V) + self.epsilon)

    def state_arrays(self):
        return {"V": self.V, "meta": np.array([self.alpha, self.epsilon])}

    def load_arrays(self, arrays):
        self.V = arrays["V"]
        self.alpha = float(arrays["meta"][0])
        self.epsilon = float(arrays["meta"][1])


def _noise(kind, eps, precond, noise_mode):
    if kind in ("SGLD", "FSGD"):
        return eps
    if kind == "PSGLD":
        if precond is None:
            raise ValueError("PSGLD needs an RmspropState")
        return precond.preconditioner() * eps
    if kind == "KSGLD":
        if precond is None:
            raise ValueError("KSGLD needs a KfacState")
        mode = {"literal": "inverse", "inverse-sqrt": "inverse-sqrt"}[noise_mode]
        return precond.kron_apply(eps, mode=mode)
    raise ValueError(f"unknown sampler kind {kind!r}")


def step(kind, theta, grads, schedule, t, rng, precond=None, noise_mode="literal"):
    """One sampler update; returns the new parameter vector.

    `grads` must already be the ascent-direction log-posterior gradient at
    the full-dataset scale. With the RNG stream forced to zero noise every
    kind reduces to the plain SGD step.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown sampler kind {kind!r}")
    theta = np.asarray(theta, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != theta.shape:
        raise ValueError(f"gradient shape {grads.shape} != parameter shape {theta.shape}")
    lam = schedule.rate(t)
    new = theta + lam * grads
    if kind != "SGD":
        eps = np.sqrt(lam) * rng.standard_normal(theta.size)
        new = new + _noise(kind, eps, precond, noise_mode)
    if not np.all(np.isfinite(new)):
        raise FloatingPointError(f"non-finite parameter update at step {t}")
    return new


def noise_covariance_probe(kind, lam, draws, rng, precond=None, noise_mode="literal", dim=None):
    """Empirical covariance of the injected noise G @ eps.

    Validates the per-kind noise contract on instances small enough to
    compare against dense oracles.
    """
    if kind == "SGD":
        raise ValueError("SGD injects no noise")
    if kind == "PSGLD":
        dim = precond.V.size
    elif kind == "KSGLD":
        dim = precond.net.num_params
    elif dim is None:
        raise ValueError("dim required for identity-noise kinds")
    if dim > 50:
        raise ValueError("probe is for small instances (dim <= 50)")
    eps = np.sqrt(lam) * rng.standard_normal((draws, dim))
    if kind in ("SGLD", "FSGD"):
        samples = eps
    elif kind == "PSGLD":
        samples = precond.preconditioner() * eps
    else:
        mode = {"literal": "inverse", "inverse-sqrt": "inverse-sqrt"}[noise_mode]
        samples = precond.kron_apply_batch(eps, mode=mode)
    return np.cov(samples, rowvar=False, bias=True)
