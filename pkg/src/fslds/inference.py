"""Variational fitting: reparametrized single-sample ELBO, Adam, restarts.

Variational family (filtering form):

    q(h[t, k]) = BinConcrete(f_q(h[t-1], y[t]), phi)
    q(z[t, c]) = Normal(f_z(z[t-1], y[t]), sigma_q^2)

The objective maximized is ``recon - kl_h - kl_z - l1`` where the KL terms are
single-sample log-density differences and ``l1 = lambda * sum(h)``.
"""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import TextIO

import numpy as np
from scipy.ndimage import uniform_filter1d
from sklearn.decomposition import NMF
from sklearn.exceptions import ConvergenceWarning

from . import autodiff as ad
from . import distributions as dist
from ._fused import TERMS, FusedElbo
from .model import LatentTrajectory, ModelParams, SpikeCountMatrix, rate
from .nnet import HIDDEN_DIM, NetParams, fq_locations, fp_locations, fz_means, init_params, net_layout

log = logging.getLogger(__name__)


class NonFiniteElbo(FloatingPointError):
    def __init__(self, t: int, term: str, epoch: int | None = None):
        self.t, self.term, self.epoch = t, term, epoch
        where = f"epoch {epoch}, " if epoch is not None else ""
        super().__init__(f"non-finite ELBO term {term!r} at {where}t={t}")


class AllRestartsFailed(RuntimeError):
    pass


@dataclass
class FitConfig:
    K: int = 6
    lambda_l1: float = 0.2
    phi_start: float = 1.0
    phi_end: float = 0.1
    phi_rate: float = 3e-5
    epochs: int = 3000
    lr_main: float = 0.01
    lr_theta_initial: float = 0.1
    lr_theta_switch_epoch: int = 200
    n_restarts: int = 75
    seed: int = 0
    hidden_dim: int = HIDDEN_DIM
    grad_clip: float = 100.0
    engine: str = "fused"

    def __post_init__(self):
        if self.K < 0:
            raise ValueError("K must be non-negative")
        if not (0 < self.phi_end <= self.phi_start):
            raise ValueError("need 0 < phi_end <= phi_start")
        for name in ("phi_rate", "lr_main", "lr_theta_initial"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.n_restarts < 1:
            raise ValueError("epochs must be >= 0 and n_restarts >= 1")
        if self.engine not in ("fused", "tape"):
            raise ValueError(f"unknown engine {self.engine!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown FitConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ElboEstimate:
    total: object
    recon: object
    kl_h: object
    kl_z: object
    l1_penalty: object

    @classmethod
    def from_terms(cls, recon, kl_h, kl_z, l1) -> "ElboEstimate":
        return cls(recon - kl_h - kl_z - l1, recon, kl_h, kl_z, l1)

    def floats(self) -> "ElboEstimate":
        return ElboEstimate(*(float(np.asarray(ad.value(v))) for v in
                              (self.total, self.recon, self.kl_h, self.kl_z, self.l1_penalty)))

    def as_row(self) -> list[float]:
        f = self.floats()
        return [f.total, f.recon, f.kl_h, f.kl_z, f.l1_penalty]


@dataclass
class ElboNoise:
    """Frozen reparametrization draws: one uniform per (t, gate) and one
    standard normal per (t, amplitude channel)."""
    u: np.ndarray    # (T, K)
    eps: np.ndarray  # (T, K+1)

    @classmethod
    def draw(cls, rng: np.random.Generator, T: int, K: int) -> "ElboNoise":
        u = rng.uniform(np.nextafter(0.0, 1.0), 1.0, size=(T, K))
        return cls(u, rng.standard_normal((T, K + 1)))

    @property
    def logit_u(self) -> np.ndarray:
        return dist.logit(self.u)


@dataclass
class FitResult:
    model: ModelParams
    nets: NetParams
    posterior_traj: LatentTrajectory
    elbo_trace: list
    seed: int
    config: FitConfig
    final_elbo: float
    phi_final: float
    failed: bool = False
    restarts: list = field(default_factory=list)

    @property
    def theta(self) -> np.ndarray:
        return np.asarray(self.model.theta)


# -- parameter vector --------------------------------------------------------

def param_layout(K: int, M: int, hidden_dim: int = HIDDEN_DIM) -> list[tuple[str, tuple]]:
    return [("theta.rho", (K + 1, M))] + net_layout(K, M, hidden_dim)


def param_size(K: int, M: int, hidden_dim: int = HIDDEN_DIM) -> int:
    return sum(int(np.prod(s)) for _, s in param_layout(K, M, hidden_dim))


def unpack(w, K: int, M: int, hidden_dim: int = HIDDEN_DIM) -> tuple[ModelParams, NetParams]:
    """Split a flat parameter vector (array -> views, Tensor -> tape slices)."""
    n = (K + 1) * M
    model = ModelParams(w[:n].reshape((K + 1, M)))
    return model, NetParams.from_flat(w[n:], K, M, hidden_dim)


def pack(model: ModelParams, nets: NetParams) -> np.ndarray:
    return np.concatenate([np.ravel(model.rho), nets.flat()])


def init_theta(counts: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """Background row at a low quantile of the lightly smoothed counts; feature
    rows from a randomly started Poisson (KL) NMF of what lies above it.

    The NMF start is what makes restarts differ. Raw-count quantiles are
    useless at rates near 1 (mostly zeros), hence the smoothing.
    """
    counts = np.asarray(counts, dtype=float)
    T, M = counts.shape
    smooth = uniform_filter1d(counts, size=min(10, T), axis=0, mode="nearest")
    base = np.maximum(np.quantile(smooth, 0.2, axis=0), 0.1)
    theta = np.empty((K + 1, M))
    theta[0] = base
    if K == 0:
        return theta
    resid = np.maximum(counts - base, 0.0)
    if not resid.any():
        theta[1:] = 0.1 * rng.uniform(0.2, 1.0, size=(K, M))
        return theta
    nmf = NMF(K, init="random", random_state=int(rng.integers(2**31 - 1)),
              beta_loss="kullback-leibler", solver="mu", max_iter=500, tol=1e-4)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        W = nmf.fit_transform(resid)
    # scale each component to its typical "on" level so that h ~ 1 fits
    theta[1:] = np.maximum(nmf.components_ * np.quantile(W, 0.9, axis=0)[:, None], 0.05)
    return theta


def init_flat(counts: np.ndarray, cfg: FitConfig, seed: int) -> np.ndarray:
    K, M = cfg.K, counts.shape[1]
    nets = init_params(seed, K, M, cfg.hidden_dim)
    rng = np.random.default_rng([seed, 2])
    model = ModelParams.from_theta(init_theta(counts, K, rng))
    return pack(model, nets)


# -- objective ---------------------------------------------------------------

def elbo_step(model: ModelParams, nets: NetParams, y, phi: float, lambda_l1: float,
              noise: ElboNoise) -> ElboEstimate:
    """Single-sample ELBO from composed autodiff operations.

    Differentiable when ``model``/``nets`` hold Tensors; otherwise a plain
    numeric evaluation. This is the reference route; fitting uses the fused
    evaluator, which must agree with it.
    """
    Y = y.counts if isinstance(y, SpikeCountMatrix) else np.asarray(y)
    T, M = Y.shape
    K = nets.K
    if noise.u.shape != (T, K) or noise.eps.shape != (T, K + 1):
        raise ValueError(f"noise shapes {noise.u.shape}, {noise.eps.shape} do not match "
                         f"T={T}, K={K}")
    theta = model.theta
    sigma_q, sigma_p = nets.sigma_q, nets.sigma_p
    H = nets.hidden_dim
    s_q, s_p, s_z = np.zeros(H), np.zeros(H), np.zeros(H)
    h_prev, z_prev, y_prev = np.zeros(K), np.zeros(K + 1), np.zeros(M)
    lu = noise.logit_u
    recon = kl_h = kl_z = gate_total = 0.0
    for t in range(T):
        a_q, s_q = fq_locations(nets, h_prev, Y[t], s_q)
        a_p, s_p = fp_locations(nets, h_prev, y_prev, s_p)
        # densities at the unclipped logit; the clip only guards h itself
        x = (a_q + lu[t]) / phi
        h = dist.gate_from_logit(x)
        klh_t = ad.sum(dist.binconcrete_logit_logpdf(x, a_q, phi)
                       - dist.binconcrete_logit_logpdf(x, a_p, phi))
        mu, s_z = fz_means(nets, z_prev, Y[t], s_z)
        z = dist.normal_sample(mu, sigma_q, noise.eps[t])
        klz_t = (dist.normal_logpdf(z, mu, sigma_q)
                 - dist.normal_logpdf(z, nets.A_diag * z_prev, sigma_p))
        rec_t = dist.poisson_logpmf(Y[t], rate(theta, h, z))
        gates_t = ad.sum(h)
        for name, term in zip(TERMS, (rec_t, klh_t, klz_t, gates_t)):
            if not np.isfinite(ad.value(term)):
                raise NonFiniteElbo(t, name)
        recon, kl_h, kl_z = recon + rec_t, kl_h + klh_t, kl_z + klz_t
        gate_total = gate_total + gates_t
        h_prev, z_prev, y_prev = h, z, Y[t]
    return ElboEstimate.from_terms(recon, kl_h, kl_z, lambda_l1 * gate_total)


class FusedObjective:
    """ELBO over a flat parameter Tensor, evaluated by the fused kernel and
    recorded on the tape as a single node."""

    def __init__(self, counts: np.ndarray, K: int, hidden_dim: int = HIDDEN_DIM):
        self.K, self.M, self.hidden_dim = K, counts.shape[1], hidden_dim
        self.kernel = FusedElbo(counts, K, hidden_dim)

    def __call__(self, w, phi: float, lambda_l1: float, noise: ElboNoise) -> ElboEstimate:
        wv = np.asarray(ad.value(w), dtype=np.float64)
        model, nets = unpack(wv, self.K, self.M, self.hidden_dim)
        terms = self.kernel.forward(model, nets, noise.logit_u, noise.eps, phi, lambda_l1)
        bad = ~np.isfinite(terms)
        if bad.any():
            t, j = np.argwhere(bad)[0]
            raise NonFiniteElbo(int(t), TERMS[j])
        parts = terms.sum(axis=0)
        parts[3] = lambda_l1 * parts[3]
        if not isinstance(w, ad.Tensor):
            return ElboEstimate.from_terms(*parts)
        kernel, K, M, Hd = self.kernel, self.K, self.M, self.hidden_dim

        def vjp(g):
            gw = np.zeros_like(wv)
            gm, gn = unpack(gw, K, M, Hd)
            kernel.backward(g, gm, gn)
            return (gw,)

        node = w.tape.record(parts, (w,), vjp)
        return ElboEstimate.from_terms(node[0], node[1], node[2], node[3])


class TapeObjective:
    """Same interface as :class:`FusedObjective`, built from composed ops."""

    def __init__(self, counts: np.ndarray, K: int, hidden_dim: int = HIDDEN_DIM):
        self.counts = np.asarray(counts)
        self.K, self.M, self.hidden_dim = K, counts.shape[1], hidden_dim

    def __call__(self, w, phi, lambda_l1, noise):
        model, nets = unpack(w, self.K, self.M, self.hidden_dim)
        return elbo_step(model, nets, self.counts, phi, lambda_l1, noise)


def make_objective(counts, K, hidden_dim=HIDDEN_DIM, engine="fused"):
    cls = FusedObjective if engine == "fused" else TapeObjective
    return cls(np.asarray(counts), K, hidden_dim)


def elbo_value_and_grad(objective, w: np.ndarray, phi, lambda_l1, noise):
    """(ElboEstimate of floats, gradient of the total w.r.t. ``w``)."""
    tape = ad.Tape()
    leaf = tape.leaf(w)
    est = objective(leaf, phi, lambda_l1, noise)
    grads = ad.backward(tape, est.total)
    return est.floats(), grads[leaf]


# -- schedules and optimizer -------------------------------------------------

def anneal_phi(step: int, cfg: FitConfig) -> float:
    """Exponential temperature decay per gradient update, floored at phi_end."""
    if step < 0:
        raise ValueError("step must be non-negative")
    return max(cfg.phi_end, cfg.phi_start * math.exp(-cfg.phi_rate * step))


class Adam:
    def __init__(self, size: int, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.b1, self.b2, self.eps = b1, b2, eps
        self.t = 0

    def step(self, w: np.ndarray, grad: np.ndarray, lr) -> None:
        """In-place descent step on ``w`` for the loss gradient ``grad``."""
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        w -= lr * mhat / (np.sqrt(vhat) + self.eps)


# -- posterior summary -------------------------------------------------------

def posterior_means(model: ModelParams, nets: NetParams, y, phi: float) -> LatentTrajectory:
    """Noise-free pass: gates at sigmoid(log_alpha / phi), amplitudes at the
    f_z means, each fed back as the next step's input."""
    Y = y.counts if isinstance(y, SpikeCountMatrix) else np.asarray(y)
    T = Y.shape[0]
    K, H = nets.K, nets.hidden_dim
    s_q, s_z = np.zeros(H), np.zeros(H)
    h_prev, z_prev = np.zeros(K), np.zeros(K + 1)
    hs, zs = np.empty((T, K)), np.empty((T, K + 1))
    for t in range(T):
        a_q, s_q = fq_locations(nets, h_prev, Y[t], s_q)
        mu, s_z = fz_means(nets, z_prev, Y[t], s_z)
        h_prev = dist.gate_from_logit(a_q / phi)
        z_prev = mu
        hs[t], zs[t] = h_prev, z_prev
    return LatentTrajectory(hs, zs)


# -- fitting -----------------------------------------------------------------

PROGRESS_HEADER = "epoch,phi,total,recon,kl_h,kl_z,l1"


def _counts_of(y) -> np.ndarray:
    Y = y.counts if isinstance(y, SpikeCountMatrix) else np.asarray(y)
    if Y.ndim != 2 or Y.shape[0] < 2:
        raise ValueError(f"need a (T, M) count matrix with T >= 2, got shape {Y.shape}")
    if np.any(Y < 0):
        raise ValueError("counts must be non-negative")
    return Y


def estimate_final_elbo(objective, w, phi, lambda_l1, rng, T, K, n_draws=8) -> float:
    vals = [objective(w, phi, lambda_l1, ElboNoise.draw(rng, T, K)).floats().total
            for _ in range(n_draws)]
    return float(np.mean(vals))


def fit_once(y, cfg: FitConfig, seed: int | None = None, progress: TextIO | None = None) -> FitResult:
    """One AEVB run (one epoch = one full-sequence Adam update)."""
    Y = _counts_of(y)
    seed = cfg.seed if seed is None else seed
    T, M = Y.shape
    K, Hd = cfg.K, cfg.hidden_dim
    w = init_flat(Y, cfg, seed)
    objective = make_objective(Y, K, Hd, cfg.engine)
    rng = np.random.default_rng([seed, 1])
    opt = Adam(w.size)
    n_theta = (K + 1) * M
    lr = np.full(w.size, cfg.lr_main)
    trace = []
    if progress is not None:
        print(PROGRESS_HEADER, file=progress)
    for epoch in range(cfg.epochs):
        phi = anneal_phi(epoch, cfg)
        noise = ElboNoise.draw(rng, T, K)
        try:
            est, grad = elbo_value_and_grad(objective, w, phi, cfg.lambda_l1, noise)
        except NonFiniteElbo as e:
            e.epoch = epoch
            raise NonFiniteElbo(e.t, e.term, epoch) from None
        trace.append(est)
        if progress is not None:
            print(f"{epoch},{phi:.8g}," + ",".join(f"{v:.10g}" for v in est.as_row()),
                  file=progress)
        loss_grad = -grad
        norm = float(np.sqrt(loss_grad @ loss_grad))
        if norm > cfg.grad_clip:
            loss_grad *= cfg.grad_clip / norm
        lr[:n_theta] = cfg.lr_theta_initial if epoch < cfg.lr_theta_switch_epoch else cfg.lr_main
        opt.step(w, loss_grad, lr)
    phi_final = anneal_phi(max(cfg.epochs - 1, 0), cfg)
    model, nets = unpack(w, K, M, Hd)
    traj = posterior_means(model, nets, Y, phi_final)
    final = estimate_final_elbo(objective, w, phi_final, cfg.lambda_l1,
                                np.random.default_rng([seed, 3]), T, K)
    return FitResult(model=model, nets=nets, posterior_traj=traj, elbo_trace=trace,
                     seed=seed, config=cfg, final_elbo=final, phi_final=phi_final)


def _run_restart(args):
    Y, cfg, seed = args
    try:
        return seed, fit_once(Y, cfg, seed), None
    except (NonFiniteElbo, FloatingPointError) as e:
        return seed, None, str(e)


def select_best(results: dict) -> int:
    """Seed of the highest final ELBO; ties go to the lowest seed."""
    ok = [(r.final_elbo, s) for s, r in results.items() if r is not None and np.isfinite(r.final_elbo)]
    if not ok:
        raise AllRestartsFailed("all restarts failed")
    best = max(e for e, _ in ok)
    return min(s for e, s in ok if e == best)


def fit_multi(y, cfg: FitConfig, jobs: int = 1) -> FitResult:
    """Best-of-``n_restarts`` fit with seeds ``cfg.seed + i``."""
    Y = _counts_of(y)
    seeds = [cfg.seed + i for i in range(cfg.n_restarts)]
    tasks = [(Y, cfg, s) for s in seeds]
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_restart, tasks))
    else:
        outcomes = [_run_restart(t) for t in tasks]
    results, table = {}, []
    for seed, res, err in outcomes:
        results[seed] = res
        if res is None:
            log.warning("restart seed=%d failed: %s", seed, err)
            table.append({"seed": seed, "status": "failed", "final_elbo": float("nan"), "error": err})
        else:
            log.info("restart seed=%d final_elbo=%.6f", seed, res.final_elbo)
            table.append({"seed": seed, "status": "ok", "final_elbo": res.final_elbo, "error": ""})
    best = results[select_best(results)]
    best.restarts = table
    return best
