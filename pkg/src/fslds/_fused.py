"""Fused ELBO unroll: numba forward pass plus hand-written adjoint.

Computes exactly the quantity of :func:`fslds.inference.elbo_step` (same
operation order where it matters) but as one tape node, so that a full
sequence costs a few dozen milliseconds instead of ~10^5 Python-level tape
nodes. Recurrent matvecs run in compiled loops; everything that is not
sequential in t (input projections, weight-gradient reductions) is batched
into BLAS calls outside the loop. The GRU step kernels allow floating-point
reassociation so their dot loops vectorize; this changes results at the
rounding level only.

Gate order inside the stacked GRU weights is [reset; update; candidate].
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit
from scipy.special import gammaln

from .distributions import LOGIT_MAX, RATE_FLOOR

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
TERMS = ("recon", "kl_h", "kl_z", "l1")


@njit(cache=True, fastmath=False)
def _sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True)
def _softplus(x):
    # log(1 + e^x), same branch structure as numpy's logaddexp(0, x)
    if x > 0.0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@njit(cache=True, fastmath={"reassoc", "contract"})
def _gru_forward(gx_y, W, n_in, x_in, U, s_prev, r, u, c, rs, s_new):
    """gx = gx_y + W[:, :n_in] @ x_in; writes gate activations and new state."""
    H = s_prev.shape[0]
    for i in range(3 * H):
        acc = gx_y[i]
        for j in range(n_in):
            acc += W[i, j] * x_in[j]
        if i < 2 * H:
            for j in range(H):
                acc += U[i, j] * s_prev[j]
            if i < H:
                r[i] = _sigmoid(acc)
            else:
                u[i - H] = _sigmoid(acc)
        else:
            c[i - 2 * H] = acc  # pre-activation, finished below
    for j in range(H):
        rs[j] = r[j] * s_prev[j]
    for i in range(H):
        acc = c[i]
        row = 2 * H + i
        for j in range(H):
            acc += U[row, j] * rs[j]
        c[i] = math.tanh(acc)
    for j in range(H):
        s_new[j] = (1.0 - u[j]) * s_prev[j] + u[j] * c[j]


@njit(cache=True, fastmath={"reassoc", "contract"})
def _gru_backward(ds, s_prev, r, u, c, U, W, n_in, dgx, ds_prev, dx_in):
    """Adjoint of one GRU step. ``dgx`` receives the pre-activation adjoints
    [reset; update; candidate]; ``dx_in`` accumulates W[:, :n_in]^T dgx."""
    H = s_prev.shape[0]
    for j in range(H):
        ds_prev[j] = ds[j] * (1.0 - u[j])
        dgx[H + j] = ds[j] * (c[j] - s_prev[j]) * u[j] * (1.0 - u[j])
        dgx[2 * H + j] = ds[j] * u[j] * (1.0 - c[j] * c[j])
    # drs = U_c^T dpc; reset gate and state adjoints
    drs = np.zeros(H)
    for i in range(H):
        d = dgx[2 * H + i]
        row = 2 * H + i
        for j in range(H):
            drs[j] += U[row, j] * d
    for j in range(H):
        ds_prev[j] += drs[j] * r[j]
        dgx[j] = drs[j] * s_prev[j] * r[j] * (1.0 - r[j])
    for i in range(2 * H):
        d = dgx[i]
        for j in range(H):
            ds_prev[j] += U[i, j] * d
    for i in range(3 * H):
        d = dgx[i]
        for j in range(n_in):
            dx_in[j] += W[i, j] * d


@njit(cache=True)
def _forward(Y, LU, EPS, LG, theta, phi, lam,
             GXq, Wq, Uq, HWq, hbq,
             GXp, Wp, Up, HWp, hbp,
             GXz, Wz, Uz, HWz, hbz,
             lsp, lsq, A,
             Sq, Rq, Zq, Cq, RSq,
             Sp, Rp, Zp, Cp, RSp,
             Sz, Rz, Zz, Cz, RSz,
             AQ, AP, XR, Hh, MU, Z, G, RATE, TERM):
    T, M = Y.shape
    K = LU.shape[1]
    C = K + 1
    sig_q = math.exp(lsq)
    sig_p = math.exp(lsp)
    log_phi = math.log(phi)
    h_prev = np.zeros(K)
    z_prev = np.zeros(C)
    for t in range(T):
        # posterior gates
        _gru_forward(GXq[t], Wq, K, h_prev, Uq, Sq[t], Rq[t], Zq[t], Cq[t], RSq[t], Sq[t + 1])
        _gru_forward(GXp[t], Wp, K, h_prev, Up, Sp[t], Rp[t], Zp[t], Cp[t], RSp[t], Sp[t + 1])
        klh = 0.0
        l1 = 0.0
        for k in range(K):
            aq = hbq[k]
            ap = hbp[k]
            for j in range(Sq.shape[1]):
                aq += HWq[k, j] * Sq[t + 1, j]
                ap += HWp[k, j] * Sp[t + 1, j]
            AQ[t, k] = aq
            AP[t, k] = ap
            xr = (aq + LU[t, k]) / phi
            XR[t, k] = xr
            xc = min(max(xr, -LOGIT_MAX), LOGIT_MAX)
            h = _sigmoid(xc)
            Hh[t, k] = h
            lq = log_phi - phi * xr + aq - 2.0 * _softplus(aq - phi * xr)
            lp = log_phi - phi * xr + ap - 2.0 * _softplus(ap - phi * xr)
            klh += lq - lp
            l1 += h
        # amplitudes
        _gru_forward(GXz[t], Wz, C, z_prev, Uz, Sz[t], Rz[t], Zz[t], Cz[t], RSz[t], Sz[t + 1])
        klz = 0.0
        for c in range(C):
            mu = hbz[c]
            for j in range(Sz.shape[1]):
                mu += HWz[c, j] * Sz[t + 1, j]
            MU[t, c] = mu
            z = mu + sig_q * EPS[t, c]
            Z[t, c] = z
            rq = (z - mu) / sig_q
            rp = (z - A[c] * z_prev[c]) / sig_p
            klz += (-HALF_LOG_2PI - lsq - 0.5 * rq * rq) - (-HALF_LOG_2PI - lsp - 0.5 * rp * rp)
            gate = 1.0 if c == 0 else Hh[t, c - 1]
            G[t, c] = gate * math.exp(z)
        rec = 0.0
        for m in range(M):
            lam_m = 0.0
            for c in range(C):
                lam_m += G[t, c] * theta[c, m]
            RATE[t, m] = lam_m
            lam_m = max(lam_m, RATE_FLOOR)
            rec += Y[t, m] * math.log(lam_m) - lam_m
        TERM[t, 0] = rec - LG[t]
        TERM[t, 1] = klh
        TERM[t, 2] = klz
        TERM[t, 3] = l1  # the caller applies lambda once, to the total
        for k in range(K):
            h_prev[k] = Hh[t, k]
        for c in range(C):
            z_prev[c] = Z[t, c]


@njit(cache=True)
def _backward(cot, Y, LU, EPS, theta, phi, lam,
              Wq, Uq, HWq, Wp, Up, HWp, Wz, Uz, HWz,
              lsp, lsq, A,
              Sq, Rq, Zq, Cq, Sp, Rp, Zp, Cp, Sz, Rz, Zz, Cz,
              AQ, AP, XR, Hh, MU, Z, G, RATE,
              DGXq, DGXp, DGXz, DAQ, DAP, DMU, DRATE, dscal, dA):
    """Reverse sweep. Fills per-step adjoints (DGX*, DAQ, DAP, DMU, DRATE)
    for the batched weight reductions done by the caller, and accumulates
    scalar adjoints dscal = [d lsp, d lsq] and dA."""
    T, M = Y.shape
    K = LU.shape[1]
    C = K + 1
    H = Sq.shape[1]
    g_rec, g_klh, g_klz, g_l1 = cot[0], cot[1], cot[2], cot[3]
    sig_q = math.exp(lsq)
    sig_p = math.exp(lsp)
    dsq_n = np.zeros(H)
    dsp_n = np.zeros(H)
    dsz_n = np.zeros(H)
    dh_n = np.zeros(K)
    dz_n = np.zeros(C)
    dh = np.zeros(K)
    dz = np.zeros(C)
    dg = np.zeros(C)
    ds = np.zeros(H)
    ds_prev = np.zeros(H)
    dh_in = np.zeros(K)
    dz_in = np.zeros(C)
    for t in range(T - 1, -1, -1):
        # Poisson term
        for c in range(C):
            dg[c] = 0.0
        for m in range(M):
            if RATE[t, m] > RATE_FLOOR:
                d = g_rec * (Y[t, m] / RATE[t, m] - 1.0)
            else:
                d = 0.0
            DRATE[t, m] = d
            for c in range(C):
                dg[c] += theta[c, m] * d
        for k in range(K):
            dh[k] = dh_n[k] + g_l1 * lam + dg[k + 1] * math.exp(Z[t, k + 1])
        for c in range(C):
            dz[c] = dz_n[c] + dg[c] * G[t, c]
        # amplitude KL at step t
        for c in range(C):
            zp = Z[t - 1, c] if t > 0 else 0.0
            rq = (Z[t, c] - MU[t, c]) / sig_q
            delta = Z[t, c] - A[c] * zp
            rp = delta / sig_p
            dz[c] += g_klz * (-rq / sig_q + rp / sig_p)
            dmu = g_klz * (rq / sig_q)
            dscal[1] += g_klz * (-1.0 + rq * rq)
            dscal[0] += -g_klz * (-1.0 + rp * rp)
            dA[c] += -g_klz * (rp / sig_p) * zp
            dz_n[c] = -g_klz * (rp / sig_p) * A[c]  # into z[t-1]
            # reparametrization z = mu + sig_q * eps
            dmu += dz[c]
            dscal[1] += dz[c] * sig_q * EPS[t, c]
            DMU[t, c] = dmu
        # z head and GRU
        for j in range(H):
            acc = dsz_n[j]
            for c in range(C):
                acc += HWz[c, j] * DMU[t, c]
            ds[j] = acc
        for c in range(C):
            dz_in[c] = 0.0
        _gru_backward(ds, Sz[t], Rz[t], Zz[t], Cz[t], Uz, Wz, C, DGXz[t], ds_prev, dz_in)
        for j in range(H):
            dsz_n[j] = ds_prev[j]
        for c in range(C):
            dz_n[c] += dz_in[c]
        # gates
        for k in range(K):
            xr = XR[t, k]
            h = Hh[t, k]
            inside = 1.0 if (xr > -LOGIT_MAX and xr < LOGIT_MAX) else 0.0
            dxr = dh[k] * h * (1.0 - h) * inside
            sq_ = _sigmoid(AQ[t, k] - phi * xr)
            sp_ = _sigmoid(AP[t, k] - phi * xr)
            dxr += g_klh * ((-phi + 2.0 * phi * sq_) - (-phi + 2.0 * phi * sp_))
            DAQ[t, k] = g_klh * (1.0 - 2.0 * sq_) + dxr / phi
            DAP[t, k] = -g_klh * (1.0 - 2.0 * sp_)
        for k in range(K):
            dh_in[k] = 0.0
        for j in range(H):
            acc = dsq_n[j]
            for k in range(K):
                acc += HWq[k, j] * DAQ[t, k]
            ds[j] = acc
        _gru_backward(ds, Sq[t], Rq[t], Zq[t], Cq[t], Uq, Wq, K, DGXq[t], ds_prev, dh_in)
        for j in range(H):
            dsq_n[j] = ds_prev[j]
        for j in range(H):
            acc = dsp_n[j]
            for k in range(K):
                acc += HWp[k, j] * DAP[t, k]
            ds[j] = acc
        _gru_backward(ds, Sp[t], Rp[t], Zp[t], Cp[t], Up, Wp, K, DGXp[t], ds_prev, dh_in)
        for j in range(H):
            dsp_n[j] = ds_prev[j]
        for k in range(K):
            dh_n[k] = dh_in[k]


class FusedElbo:
    """Workspace-owning evaluator of the ELBO and its parameter gradient for
    one data set. ``forward`` must precede ``backward``."""

    def __init__(self, counts: np.ndarray, K: int, hidden_dim: int):
        Y = np.ascontiguousarray(counts, dtype=np.float64)
        self.Y = Y
        self.T, self.M = Y.shape
        self.K, self.C, self.H = K, K + 1, hidden_dim
        self.YL = np.log1p(Y)
        self.YLprev = np.vstack([np.zeros((1, self.M)), self.YL[:-1]])
        self.LG = gammaln(Y + 1.0).sum(axis=1)
        T, H, K, C, M = self.T, self.H, self.K, self.C, self.M
        z = lambda *s: np.zeros(s)
        self.states = {n: z(T + 1, H) for n in ("Sq", "Sp", "Sz")}
        self.gates = {n: z(T, H) for n in
                      ("Rq", "Zq", "Cq", "RSq", "Rp", "Zp", "Cp", "RSp", "Rz", "Zz", "Cz", "RSz")}
        self.AQ, self.AP, self.XR, self.Hh = z(T, K), z(T, K), z(T, K), z(T, K)
        self.MU, self.Z, self.G = z(T, C), z(T, C), z(T, C)
        self.RATE, self.TERM = z(T, M), z(T, 4)
        self.DGXq, self.DGXp, self.DGXz = z(T, 3 * H), z(T, 3 * H), z(T, 3 * H)
        self.DAQ, self.DAP, self.DMU, self.DRATE = z(T, K), z(T, K), z(T, C), z(T, M)
        self._ctx = None

    def forward(self, model, nets, LU: np.ndarray, EPS: np.ndarray, phi: float, lam: float) -> np.ndarray:
        """Returns per-step terms (T, 4): recon, kl_h, kl_z, sum of gates."""
        K = self.K
        theta = np.logaddexp(0.0, model.rho)
        f_q, f_p, f_z = nets.f_q, nets.f_p, nets.f_z
        GXq = self.YL @ f_q.cell.W[:, K:].T + f_q.cell.b
        GXp = self.YLprev @ f_p.cell.W[:, K:].T + f_p.cell.b
        GXz = self.YL @ f_z.cell.W[:, self.C:].T + f_z.cell.b
        st, ga = self.states, self.gates
        LU = np.ascontiguousarray(LU, dtype=np.float64)
        EPS = np.ascontiguousarray(EPS, dtype=np.float64)
        _forward(self.Y, LU, EPS, self.LG, theta, float(phi), float(lam),
                 GXq, f_q.cell.W, f_q.cell.U, f_q.head_W, f_q.head_b,
                 GXp, f_p.cell.W, f_p.cell.U, f_p.head_W, f_p.head_b,
                 GXz, f_z.cell.W, f_z.cell.U, f_z.head_W, f_z.head_b,
                 float(nets.log_sigma_p), float(nets.log_sigma_q), nets.A_diag,
                 st["Sq"], ga["Rq"], ga["Zq"], ga["Cq"], ga["RSq"],
                 st["Sp"], ga["Rp"], ga["Zp"], ga["Cp"], ga["RSp"],
                 st["Sz"], ga["Rz"], ga["Zz"], ga["Cz"], ga["RSz"],
                 self.AQ, self.AP, self.XR, self.Hh, self.MU, self.Z, self.G,
                 self.RATE, self.TERM)
        self._ctx = (model, nets, LU, EPS, float(phi), float(lam), theta)
        return self.TERM

    def backward(self, cot, model_grad, net_grad):
        """Accumulate d(cot . [recon, kl_h, kl_z, l1]) into the gradient
        containers (same structure as the parameters, arrays written in place)."""
        model, nets, LU, EPS, phi, lam, theta = self._ctx
        K, C, H = self.K, self.C, self.H
        st, ga = self.states, self.gates
        f_q, f_p, f_z = nets.f_q, nets.f_p, nets.f_z
        dscal, dA = np.zeros(2), np.zeros(C)
        _backward(np.asarray(cot, dtype=np.float64), self.Y, LU, EPS, theta, phi, lam,
                  f_q.cell.W, f_q.cell.U, f_q.head_W,
                  f_p.cell.W, f_p.cell.U, f_p.head_W,
                  f_z.cell.W, f_z.cell.U, f_z.head_W,
                  float(nets.log_sigma_p), float(nets.log_sigma_q), nets.A_diag,
                  st["Sq"], ga["Rq"], ga["Zq"], ga["Cq"],
                  st["Sp"], ga["Rp"], ga["Zp"], ga["Cp"],
                  st["Sz"], ga["Rz"], ga["Zz"], ga["Cz"],
                  self.AQ, self.AP, self.XR, self.Hh, self.MU, self.Z, self.G, self.RATE,
                  self.DGXq, self.DGXp, self.DGXz, self.DAQ, self.DAP, self.DMU, self.DRATE,
                  dscal, dA)
        dtheta = self.G.T @ self.DRATE
        model_grad.rho[...] += dtheta * _sigmoid_np(model.rho)
        zeros_row = np.zeros((1, K))
        Hprev = np.vstack([zeros_row, self.Hh[:-1]])
        Zprev = np.vstack([np.zeros((1, C)), self.Z[:-1]])
        inputs = {"f_q": np.hstack([Hprev, self.YL]),
                  "f_p": np.hstack([Hprev, self.YLprev]),
                  "f_z": np.hstack([Zprev, self.YL])}
        heads = {"f_q": (self.DAQ, st["Sq"]), "f_p": (self.DAP, st["Sp"]), "f_z": (self.DMU, st["Sz"])}
        dgxs = {"f_q": self.DGXq, "f_p": self.DGXp, "f_z": self.DGXz}
        rs = {"f_q": ga["RSq"], "f_p": ga["RSp"], "f_z": ga["RSz"]}
        for name in ("f_q", "f_p", "f_z"):
            g = getattr(net_grad, name)
            dgx = dgxs[name]
            dout, S = heads[name]
            g.head_W[...] += dout.T @ S[1:]
            g.head_b[...] += dout.sum(axis=0)
            g.cell.W[...] += dgx.T @ inputs[name]
            g.cell.b[...] += dgx.sum(axis=0)
            g.cell.U[:2 * H] += dgx[:, :2 * H].T @ S[:-1]
            g.cell.U[2 * H:] += dgx[:, 2 * H:].T @ rs[name]
        net_grad.log_sigma_p[...] += dscal[0]
        net_grad.log_sigma_q[...] += dscal[1]
        net_grad.A_diag[...] += dA


def _sigmoid_np(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
