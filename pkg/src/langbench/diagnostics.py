"""Parameter-trace recording and effective-sample-size estimates.

ess_i = n / (1 + 2 * sum_k rho_k) per tracked coordinate, with the sum
truncated at the last lag before the first non-positive autocorrelation.
The multivariate ESS uses the diagonal approximation of the covariance
ratio, under which each diagonal term contributes ess_i/n and the result
collapses to the geometric mean of the per-coordinate values.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import rng as streams


class DegenerateSeriesError(ValueError):
    """A constant (zero-variance) trace has no autocorrelation structure."""


class Chain:
    """Subsampled parameter traces recorded at a fixed step stride."""

    def __init__(self, indices, stride, dim):
        indices = np.asarray(indices, dtype=np.int64)
        if len(np.unique(indices)) != len(indices):
            raise ValueError("tracked indices must be unique")
        if indices.size and (indices.min() < 0 or indices.max() >= dim):
            raise ValueError(f"tracked indices must lie in [0, {dim})")
        self.indices = indices
        self.stride = stride
        self.dim = dim
        self.steps = []
        self._rows = []

    def __len__(self):
        return len(self._rows)

    @property
    def values(self):
        """(n, tracked) array of recorded values."""
        if not self._rows:
            return np.zeros((0, self.indices.size))
        return np.asarray(self._rows)

    def record(self, theta, step):
        if step % self.stride != 0:
            raise ValueError(f"step {step} not aligned to stride {self.stride}")
        if self.steps and step <= self.steps[-1]:
            raise ValueError(f"step {step} not after last recorded step {self.steps[-1]}")
        theta = np.asarray(theta)
        if theta.shape != (self.dim,):
            raise ValueError(f"parameter layout changed mid-run: {theta.shape} != ({self.dim},)")
        self.steps.append(int(step))
        self._rows.append(theta[self.indices].copy())

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("step,coordinate,value\n")
            for step, row in zip(self.steps, self._rows):
                for coord, value in zip(self.indices, row):
                    fh.write(f"{step},{coord},{float(value)!r}\n")

    @classmethod
    def read_csv(cls, path, dim=None):
        steps, coords, values = [], [], []
        with open(path) as fh:
            header = fh.readline()
            if header.strip() != "step,coordinate,value":
                raise ValueError(f"{path}: unexpected chain header {header!r}")
            for line in fh:
                s, c, v = line.rstrip("\n").split(",")
                steps.append(int(s))
                coords.append(int(c))
                values.append(float(v))
        indices = np.unique(coords)
        uniq_steps = sorted(set(steps))
        stride = uniq_steps[1] - uniq_steps[0] if len(uniq_steps) > 1 else 1
        chain = cls(indices, stride, dim if dim is not None else int(indices.max()) + 1)
        grid = {(s, c): v for s, c, v in zip(steps, coords, values)}
        for s in uniq_steps:
            chain.steps.append(s)
            chain._rows.append(np.array([grid[(s, c)] for c in indices]))
        chain.stride = stride
        return chain


def tracked_indices(net, total, seed):
    """Coordinate subsample: per-layer allocation, uniform within layers."""
    gen = streams.stream(seed, "coords")
    spans = [net.layer_slice(i) for i in net.param_layers]
    sizes = np.array([stop - start for start, stop in spans])
    if net.num_params <= total:
        return np.arange(net.num_params)
    alloc = np.maximum(1, np.floor(total * sizes / sizes.sum()).astype(int))
    while alloc.sum() > total:
        alloc[np.argmax(alloc)] -= 1
    while alloc.sum() < total:
        alloc[np.argmax(sizes - alloc)] += 1
    picks = [start + gen.choice(stop - start, size=k, replace=False)
             for (start, stop), k in zip(spans, alloc)]
    return np.sort(np.concatenate(picks))


def _check_series(series):
    x = np.asarray(series, dtype=np.float64).reshape(-1)
    if np.var(x) == 0.0:
        raise DegenerateSeriesError("constant trace: zero variance")
    return x


def autocorr(series, k):
    """Sample autocorrelation at lag k with biased (1/n) normalization."""
    x = _check_series(series)
    n = x.size
    if not 0 <= k < n:
        raise ValueError(f"lag {k} outside [0, {n})")
    x = x - x.mean()
    return float((x[:n - k] @ x[k:]) / (x @ x))


def _acf(x):
    """All-lag autocorrelation via FFT, biased normalization, rho[0] = 1."""
    n = x.size
    x = x - x.mean()
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, m)
    acov = np.fft.irfft(f * np.conj(f), m)[:n]
    return acov / acov[0]


def ess_univariate(series):
    """(ess, truncation lag) for one trace.

    The lag sum stops at the last lag whose autocorrelation is positive
    before the first non-positive one appears.
    """
    x = _check_series(series)
    n = x.size
    if n < 10:
        raise ValueError(f"need at least 10 samples, got {n}")
    rho = _acf(x)
    nonpos = np.nonzero(rho[1:] <= 0.0)[0]
    k_trunc = int(nonpos[0]) if nonpos.size else n - 1
    tau = 1.0 + 2.0 * rho[1:k_trunc + 1].sum()
    ess = min(float(n), n / tau)
    if ess <= 0:
        ess = np.finfo(float).tiny  # tau can only reach here via pathological traces
    return ess, k_trunc


@dataclass
class EssReport:
    ess: np.ndarray             # per tracked, non-degenerate coordinate
    lags: np.ndarray
    coordinates: np.ndarray     # coordinate ids matching ess rows
    mess: float
    n: int
    skipped: list = field(default_factory=list)

    @property
    def p(self):
        return self.ess.size

    def write_csv(self, path):
        """Per-coordinate rows plus one trailing summary row."""
        with open(path, "w") as fh:
            fh.write("coordinate,ess,lag\n")
            for coord, e, lag in zip(self.coordinates, self.ess, self.lags):
                fh.write(f"{coord},{float(e)!r},{lag}\n")
            fh.write(f"mess,{float(self.mess)!r},{self.p}\n")


def mess(values, coordinates=None):
    """Multivariate ESS of a (n, p) trace block: geometric mean of ess_i.

    Degenerate coordinates are excluded with a warning; all-degenerate
    input is an error.
    """
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    n, p = values.shape
    if coordinates is None:
        coordinates = np.arange(p)
    ess_list, lag_list, coord_list, skipped = [], [], [], []
    for j in range(p):
        try:
            e, lag = ess_univariate(values[:, j])
        except DegenerateSeriesError:
            skipped.append(int(coordinates[j]))
            continue
        ess_list.append(e)
        lag_list.append(lag)
        coord_list.append(int(coordinates[j]))
    if skipped:
        warnings.warn(f"{len(skipped)} degenerate (constant) coordinates excluded from mESS")
    if not ess_list:
        raise DegenerateSeriesError("all tracked coordinates are constant")
    ess_arr = np.asarray(ess_list)
    value = float(np.exp(np.mean(np.log(ess_arr))))
    return EssReport(ess=ess_arr, lags=np.asarray(lag_list, dtype=np.int64),
                     coordinates=np.asarray(coord_list, dtype=np.int64),
                     mess=value, n=n, skipped=skipped)


def burnin_slice(n, fraction):
    """Start index of the post-burn-in segment."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("burn-in fraction must lie in [0, 1)")
    return int(round(n * fraction))
