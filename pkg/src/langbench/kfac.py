"""Per-layer Kronecker factors of the curvature and their damped inverses.

Each parameterized layer contributes a factor pair: A, the running
covariance of its (homogeneous) input activations, and G, the running
covariance of its pre-activation gradients. The block-diagonal curvature
approximation is diag(A_1 (x) G_1, ...) and is inverted factor-wise; the
dense Kronecker blocks are never materialized outside test oracles.

Conv layers contribute per-patch rows: the same patch matrix that the
forward lowering uses, with each spatial position treated as a sample.
Biases enter through a homogeneous coordinate appended to the
activations, so A has one extra row/column.
"""

import numpy as np

from . import _kernels as K
from .net import Conv2d, Dense


class StaleInverseError(RuntimeError):
    """Raised when kron_apply is asked to use missing or outdated inverses."""


def _symmetrize(m):
    return (m + m.T) / 2.0


class LayerFactor:
    """Running (A, G) estimates and their cached damped inverse forms."""

    def __init__(self, a_dim, g_dim, decay):
        self.A = np.zeros((a_dim, a_dim))
        self.G = np.zeros((g_dim, g_dim))
        self.decay = decay
        self.count = 0
        # Damped snapshots frozen at the last refresh, plus derived forms.
        self.A_damped = None
        self.G_damped = None
        self.A_inv = None
        self.G_inv = None
        self.A_inv_sqrt = None
        self.G_inv_sqrt = None

    def update(self, a_rows, g_rows):
        """Fold one batch of activation / gradient rows into the estimates."""
        a_outer = _symmetrize(a_rows.T @ a_rows / a_rows.shape[0])
        g_outer = _symmetrize(g_rows.T @ g_rows / g_rows.shape[0])
        if self.count == 0:
            self.A, self.G = a_outer, g_outer
        else:
            d = self.decay
            self.A = _symmetrize(d * self.A + (1 - d) * a_outer)
            self.G = _symmetrize(d * self.G + (1 - d) * g_outer)
        self.count += 1


def _psd_inverse(m, what):
    try:
        np.linalg.cholesky(m)  # PD certificate; failure means damping too small
        inv = np.linalg.inv(m)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"{what}: damped factor not positive definite "
                         f"(raise the damping)") from exc
    return _symmetrize(inv)


def _psd_inverse_sqrt(m, what, tol=-1e-10):
    w, q = np.linalg.eigh(m)
    if w.min() < tol:
        raise ValueError(f"{what}: eigenvalue {w.min():.3e} below tolerance {tol}")
    w = np.clip(w, 0.0, None)
    if (w == 0).any():
        raise ValueError(f"{what}: zero eigenvalue, inverse square root undefined")
    return _symmetrize((q * w ** -0.5) @ q.T)


class KfacState:
    """Factor pairs for every parameterized layer of a network.

    update_factors feeds statistics every step; invert_factors refreshes
    the cached inverses (typically every `refresh_every` steps since a
    dense inversion per step would dominate the loop). kron_apply rejects
    requests against inverses that were never computed or that have gone
    stale past `max_staleness` factor updates.
    """

    def __init__(self, net, damping=1e-3, decay=0.95, max_staleness=20):
        if damping <= 0:
            raise ValueError("damping must be positive")
        if not 0.0 < decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        self.net = net
        self.damping = damping
        self.max_staleness = max_staleness
        self.layer_indices = []
        self.factors = []
        for i in net.param_layers:
            layer = net.layers[i]
            if isinstance(layer, Conv2d):
                a_dim = layer.in_channels * layer.kh * layer.kw + 1
            elif isinstance(layer, Dense):
                a_dim = layer.fan_in + 1
            else:
                raise TypeError(f"layer {i}: no factor construction for {type(layer).__name__}")
            self.layer_indices.append(i)
            self.factors.append(LayerFactor(a_dim, layer.fan_out, decay))
        self.updates_since_refresh = None  # None until the first inversion

    def _rows(self, cache, i):
        """Activation and per-example pre-activation gradient rows of layer i."""
        layer = self.net.layers[i]
        entry = cache.layers[i]
        if "g" not in entry:
            raise ValueError(f"layer {i}: cache holds no pre-activation gradients; "
                             f"run backward first")
        batch = cache.batch_size
        if isinstance(layer, Conv2d):
            a = K.im2col(entry["x"], layer.kh, layer.kw, layer.stride, layer.pad)
            g = entry["g"].transpose(0, 2, 3, 1).reshape(-1, layer.fan_out) * batch
        else:
            a = entry["a"]
            g = entry["g"] * batch
        a_hom = np.concatenate([a, np.ones((a.shape[0], 1))], axis=1)
        return a_hom, g

    def update_factors(self, cache):
        """EMA update of every layer's (A, G) from one forward/backward pair."""
        rows = [self._rows(cache, i) for i in self.layer_indices]
        for factor, (a_rows, g_rows) in zip(self.factors, rows):
            if a_rows.shape[1] != factor.A.shape[0] or g_rows.shape[1] != factor.G.shape[0]:
                raise ValueError(f"factor dimensions {factor.A.shape[0]}x{factor.G.shape[0]} "
                                 f"do not match cache rows {a_rows.shape[1]}x{g_rows.shape[1]}")
            factor.update(a_rows, g_rows)
        if self.updates_since_refresh is not None:
            self.updates_since_refresh += 1

    def invert_factors(self, damping=None):
        """Refresh (A + sqrt(damping) I)^-1 and (G + sqrt(damping) I)^-1."""
        if damping is not None:
            if damping <= 0:
                raise ValueError("damping must be positive")
            self.damping = damping
        shift = np.sqrt(self.damping)
        for i, factor in zip(self.layer_indices, self.factors):
            factor.A_damped = factor.A + shift * np.eye(factor.A.shape[0])
            factor.G_damped = factor.G + shift * np.eye(factor.G.shape[0])
            factor.A_inv = _psd_inverse(factor.A_damped, f"layer {i} A")
            factor.G_inv = _psd_inverse(factor.G_damped, f"layer {i} G")
            factor.A_inv_sqrt = None
            factor.G_inv_sqrt = None
        self.updates_since_refresh = 0

    def factor_sqrt(self):
        """Cache symmetric PSD square roots of the damped inverse factors."""
        if self.updates_since_refresh is None:
            raise StaleInverseError("invert_factors must run before factor_sqrt")
        for i, factor in zip(self.layer_indices, self.factors):
            factor.A_inv_sqrt = _psd_inverse_sqrt(factor.A_damped, f"layer {i} A")
            factor.G_inv_sqrt = _psd_inverse_sqrt(factor.G_damped, f"layer {i} G")

    def _check_fresh(self, mode):
        if self.updates_since_refresh is None:
            raise StaleInverseError("no cached inverses; call invert_factors first")
        if self.updates_since_refresh > self.max_staleness:
            raise StaleInverseError(
                f"inverses {self.updates_since_refresh} updates old "
                f"(limit {self.max_staleness}); call invert_factors")
        if mode == "inverse-sqrt" and self.factors and self.factors[0].A_inv_sqrt is None:
            raise StaleInverseError("inverse-sqrt factors not cached; call factor_sqrt")

    def kron_apply_batch(self, vs, mode="inverse"):
        """Apply the block inverse (or its square root) to rows of `vs`.

        Per layer, each row's slice is reshaped to the [W | b] matrix V and
        mapped to G' V A' with (G', A') the requested inverse factors; this
        equals the dense block-diagonal mat-vec without forming any
        Kronecker product.
        """
        if mode not in ("inverse", "inverse-sqrt"):
            raise ValueError(f"unknown mode {mode!r}")
        self._check_fresh(mode)
        vs = np.atleast_2d(np.asarray(vs, dtype=np.float64))
        if vs.shape[1] != self.net.num_params:
            raise ValueError(f"expected vectors of length {self.net.num_params}")
        out = np.array(vs)
        for i, factor in zip(self.layer_indices, self.factors):
            start, stop = self.net.layer_slice(i)
            a_dim, g_dim = factor.A.shape[0], factor.G.shape[0]
            fan = a_dim - 1  # last column of V is the bias
            w = vs[:, start:start + g_dim * fan].reshape(-1, g_dim, fan)
            b = vs[:, start + g_dim * fan:stop].reshape(-1, g_dim, 1)
            v = np.concatenate([w, b], axis=2)
            if mode == "inverse":
                ga, ag = factor.G_inv, factor.A_inv
            else:
                ga, ag = factor.G_inv_sqrt, factor.A_inv_sqrt
            res = np.einsum("ij,njk,kl->nil", ga, v, ag)
            out[:, start:start + g_dim * fan] = res[:, :, :fan].reshape(vs.shape[0], -1)
            out[:, start + g_dim * fan:stop] = res[:, :, fan]
        return out

    def kron_apply(self, v, mode="inverse"):
        """Single-vector form of kron_apply_batch."""
        return self.kron_apply_batch(v[None], mode)[0]

    # -- checkpoint support -------------------------------------------------

    def state_arrays(self):
        """Canonical name -> array mapping for checkpointing."""
        out = {"meta": np.array([self.damping,
                                 -1.0 if self.updates_since_refresh is None
                                 else float(self.updates_since_refresh)])}
        for j, factor in enumerate(self.factors):
            out[f"f{j}.A"] = factor.A
            out[f"f{j}.G"] = factor.G
            out[f"f{j}.count"] = np.array([float(factor.count)])
            if factor.A_damped is not None:
                out[f"f{j}.A_damped"] = factor.A_damped
                out[f"f{j}.G_damped"] = factor.G_damped
                out[f"f{j}.A_inv"] = factor.A_inv
                out[f"f{j}.G_inv"] = factor.G_inv
        return out

    def load_arrays(self, arrays):
        meta = arrays["meta"]
        self.damping = float(meta[0])
        self.updates_since_refresh = None if meta[1] < 0 else int(meta[1])
        for j, factor in enumerate(self.factors):
            factor.A = arrays[f"f{j}.A"]
            factor.G = arrays[f"f{j}.G"]
            factor.count = int(arrays[f"f{j}.count"][0])
            if f"f{j}.A_damped" in arrays:
                factor.A_damped = arrays[f"f{j}.A_damped"]
                factor.G_damped = arrays[f"f{j}.G_damped"]
                factor.A_inv = arrays[f"f{j}.A_inv"]
                factor.G_inv = arrays[f"f{j}.G_inv"]
            factor.A_inv_sqrt = None
            factor.G_inv_sqrt = None
