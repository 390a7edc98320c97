"""Generative model: Poisson counts from gated, amplitude-modulated subnetworks.

    y[t, m] ~ Poisson(theta[0, m] e^{z[t, 0]} + sum_k theta[k, m] h[t, k] e^{z[t, k]})
    h[t, k] ~ BinConcrete(f_p(h[t-1], y[t-1]), phi)          k = 1..K
    z[t, c] ~ Normal(A[c] z[t-1, c], sigma_p^2)               c = 0..K

Row 0 of theta is the always-on background; its gate is fixed at one and
never stored. At t = 0 the previous gates, counts and amplitudes are zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import distributions as dist
from .nnet import NetParams, fp_locations


@dataclass
class SpikeCountMatrix:
    counts: np.ndarray                     # (T, M) non-negative integers
    bin_width_seconds: float = 1.0
    channel_labels: list = field(default=None)

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2:
            raise ValueError(f"counts must be 2-D (T, M), got shape {c.shape}")
        if c.size and not np.all(np.equal(np.mod(c, 1), 0)):
            raise ValueError("counts must be integers")
        if np.any(c < 0):
            raise ValueError("counts must be non-negative")
        self.counts = c.astype(np.int64)
        if self.channel_labels is None:
            self.channel_labels = [f"ch{m}" for m in range(c.shape[1])]
        self.channel_labels = [str(s) for s in self.channel_labels]
        if len(self.channel_labels) != c.shape[1]:
            raise ValueError(f"{len(self.channel_labels)} labels for {c.shape[1]} channels")
        if not self.bin_width_seconds > 0:
            raise ValueError("bin width must be positive")

    @property
    def T(self) -> int:
        return self.counts.shape[0]

    @property
    def M(self) -> int:
        return self.counts.shape[1]


@dataclass
class ModelParams:
    """Subnetwork loadings, stored unconstrained: theta = softplus(rho)."""
    rho: np.ndarray  # (K+1, M)

    @property
    def theta(self):
        return ad.softplus(self.rho)

    @property
    def K(self) -> int:
        return np.shape(ad.value(self.rho))[0] - 1

    @classmethod
    def from_theta(cls, theta, floor: float = 1e-12) -> "ModelParams":
        theta = np.asarray(theta, dtype=float)
        if np.any(theta < 0):
            raise ValueError("theta must be non-negative")
        t = np.maximum(theta, floor)
        # inverse softplus, stable for large t
        return cls(rho=t + np.log(-np.expm1(-t)))


@dataclass
class LatentTrajectory:
    h: np.ndarray  # (T, K) gates in (0, 1)
    z: np.ndarray  # (T, K+1) log-amplitudes

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=float)
        self.z = np.asarray(self.z, dtype=float)
        if self.h.ndim != 2 or self.z.ndim != 2 or self.h.shape[0] != self.z.shape[0]:
            raise ValueError(f"inconsistent trajectory shapes h{self.h.shape} z{self.z.shape}")
        if self.z.shape[1] != self.h.shape[1] + 1:
            raise ValueError("z needs one more channel than h (the background)")
        if not (np.all(np.isfinite(self.h)) and np.all(np.isfinite(self.z))):
            raise ValueError("trajectory contains non-finite values")

    @property
    def T(self) -> int:
        return self.h.shape[0]


def _counts(y) -> np.ndarray:
    return y.counts if isinstance(y, SpikeCountMatrix) else np.asarray(y)


def rate(theta, h_t, z_t):
    """Poisson rate per channel at one time step, floored at RATE_FLOOR."""
    tv = np.asarray(ad.value(theta))
    if np.any(tv < 0):
        raise ValueError("theta must be non-negative")
    C = tv.shape[0]
    if np.shape(ad.value(h_t)) != (C - 1,) or np.shape(ad.value(z_t)) != (C,):
        raise ad.ShapeError(f"rate: theta {tv.shape} needs h ({C - 1},) and z ({C},), "
                            f"got {np.shape(ad.value(h_t))} and {np.shape(ad.value(z_t))}")
    gates = ad.concatenate([np.ones(1), h_t])
    return ad.clamp_min((gates * ad.exp(z_t)) @ theta, dist.RATE_FLOOR)


def rates(theta, h, z) -> np.ndarray:
    """Rates for a whole trajectory, (T, M); plain numpy."""
    theta = np.asarray(theta, dtype=float)
    if np.any(theta < 0):
        raise ValueError("theta must be non-negative")
    h = np.asarray(h, dtype=float)
    gates = np.concatenate([np.ones((h.shape[0], 1)), h], axis=1)
    return np.maximum((gates * np.exp(z)) @ theta, dist.RATE_FLOOR)


def log_joint(params: ModelParams, nets: NetParams, traj: LatentTrajectory, y, phi: float):
    """log p(h, z, y) under the generative model."""
    Y = _counts(y)
    if Y.shape[0] != traj.T:
        raise ValueError(f"trajectory has T={traj.T} but counts have T={Y.shape[0]}")
    theta = params.theta
    K, M = traj.h.shape[1], Y.shape[1]
    s = np.zeros(nets.hidden_dim)
    h_prev, y_prev, z_prev = np.zeros(K), np.zeros(M), np.zeros(K + 1)
    total = 0.0
    for t in range(traj.T):
        loc, s = fp_locations(nets, h_prev, y_prev, s)
        total = total + dist.poisson_logpmf(Y[t], rate(theta, traj.h[t], traj.z[t]))
        if K:
            total = total + ad.sum(dist.binconcrete_logpdf(traj.h[t], loc, phi))
        total = total + dist.normal_logpdf(traj.z[t], nets.A_diag * z_prev, nets.sigma_p)
        h_prev, y_prev, z_prev = traj.h[t], Y[t], traj.z[t]
    return total


def simulate(params: ModelParams, nets: NetParams, T: int, phi: float, seed: int):
    """Ancestral sample of (trajectory, counts); deterministic in ``seed``."""
    if T < 1:
        raise ValueError("T must be at least 1")
    rng = np.random.default_rng(seed)
    theta = np.asarray(params.theta)
    K, M = params.K, theta.shape[1]
    sigma_p = float(np.exp(nets.log_sigma_p))
    s = np.zeros(nets.hidden_dim)
    h_prev, y_prev, z_prev = np.zeros(K), np.zeros(M), np.zeros(K + 1)
    H, Z = np.empty((T, K)), np.empty((T, K + 1))
    Y = np.empty((T, M), dtype=np.int64)
    for t in range(T):
        loc, s = fp_locations(nets, h_prev, y_prev, s)
        u = rng.uniform(np.nextafter(0.0, 1.0), 1.0, size=K)
        h = dist.binconcrete_sample(loc, phi, u)
        z = dist.normal_sample(nets.A_diag * z_prev, sigma_p, rng.standard_normal(K + 1))
        Y[t] = rng.poisson(rate(theta, h, z))
        H[t], Z[t] = h, z
        h_prev, y_prev, z_prev = h, Y[t], z
    return LatentTrajectory(H, Z), SpikeCountMatrix(Y)
