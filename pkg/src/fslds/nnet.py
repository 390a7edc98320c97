"""Recurrent maps for the prior gate transitions and the two posteriors.

All learnable arrays of a :class:`NetParams` are views into one flat float64
vector, so the optimizer works on a single buffer and serialization is a
single blob plus a JSON sidecar listing names and shapes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad

HIDDEN_DIM = 64
PARAMS_FORMAT_VERSION = 1


@dataclass
class GruCellParams:
    """GRU weights, gate blocks stacked row-wise as [reset; update; candidate]."""
    W: np.ndarray   # (3H, D)
    U: np.ndarray   # (3H, H)
    b: np.ndarray   # (3H,)

    @property
    def hidden_dim(self) -> int:
        return ad.value(self.U).shape[1]

    @property
    def input_dim(self) -> int:
        return ad.value(self.W).shape[1]

    def _rows(self, arr, block):
        H = self.hidden_dim
        return arr[block * H:(block + 1) * H]

    W_r = property(lambda self: self._rows(self.W, 0))
    W_z = property(lambda self: self._rows(self.W, 1))
    W_h = property(lambda self: self._rows(self.W, 2))
    U_r = property(lambda self: self._rows(self.U, 0))
    U_z = property(lambda self: self._rows(self.U, 1))
    U_h = property(lambda self: self._rows(self.U, 2))
    b_r = property(lambda self: self._rows(self.b, 0))
    b_z = property(lambda self: self._rows(self.b, 1))
    b_h = property(lambda self: self._rows(self.b, 2))


@dataclass
class RecurrentMap:
    cell: GruCellParams
    head_W: np.ndarray  # (out, H)
    head_b: np.ndarray  # (out,)


@dataclass
class NetParams:
    f_p: RecurrentMap
    f_q: RecurrentMap
    f_z: RecurrentMap
    log_sigma_p: np.ndarray  # 0-d
    log_sigma_q: np.ndarray  # 0-d
    A_diag: np.ndarray       # (K+1,)

    @property
    def K(self) -> int:
        return ad.value(self.f_q.head_b).shape[0]

    @property
    def M(self) -> int:
        return self.f_q.cell.input_dim - self.K

    @property
    def hidden_dim(self) -> int:
        return self.f_q.cell.hidden_dim

    @property
    def sigma_p(self):
        return ad.exp(self.log_sigma_p)

    @property
    def sigma_q(self):
        return ad.exp(self.log_sigma_q)

    def named(self) -> list[tuple[str, object]]:
        """Leaf arrays in canonical (flat-layout) order."""
        return list(_walk(self, ""))

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(ad.value(v)) for _, v in self.named()])

    def replace(self, fn) -> "NetParams":
        """Copy with ``fn(name, array)`` applied to every leaf."""
        return _rebuild(self, "", fn)

    @classmethod
    def from_flat(cls, vec, K: int, M: int, hidden_dim: int = HIDDEN_DIM) -> "NetParams":
        """Unflatten ``vec``. For arrays the leaves are views (writes to ``vec``
        show up in the params); for a Tensor they are differentiable slices."""
        layout = net_layout(K, M, hidden_dim)
        size = sum(int(np.prod(s)) for _, s in layout)
        if np.shape(ad.value(vec)) != (size,):
            raise ValueError(f"flat vector has shape {np.shape(ad.value(vec))}, "
                             f"layout needs ({size},)")
        views, off = {}, 0
        for name, shape in layout:
            n = int(np.prod(shape))
            views[name] = vec[off:off + n].reshape(shape)
            off += n
        return _from_views(views)


_MAP_ORDER = ("f_q", "f_p", "f_z")


def net_layout(K: int, M: int, hidden_dim: int = HIDDEN_DIM) -> list[tuple[str, tuple]]:
    H, C = hidden_dim, K + 1
    in_dims = {"f_q": K + M, "f_p": K + M, "f_z": C + M}
    out_dims = {"f_q": K, "f_p": K, "f_z": C}
    layout = []
    for m in _MAP_ORDER:
        layout += [
            (f"{m}.cell.W", (3 * H, in_dims[m])),
            (f"{m}.cell.U", (3 * H, H)),
            (f"{m}.cell.b", (3 * H,)),
            (f"{m}.head_W", (out_dims[m], H)),
            (f"{m}.head_b", (out_dims[m],)),
        ]
    layout += [("log_sigma_p", ()), ("log_sigma_q", ()), ("A_diag", (C,))]
    return layout


def _walk(obj, prefix):
    if isinstance(obj, NetParams):
        for m in _MAP_ORDER:
            yield from _walk(getattr(obj, m), m + ".")
        for name in ("log_sigma_p", "log_sigma_q", "A_diag"):
            yield name, getattr(obj, name)
    elif isinstance(obj, (RecurrentMap, GruCellParams)):
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, GruCellParams):
                yield from _walk(v, prefix + f.name + ".")
            else:
                yield prefix + f.name, v


def _rebuild(nets: NetParams, prefix, fn) -> NetParams:
    return _from_views({name: fn(name, v) for name, v in nets.named()})


def _from_views(v: dict) -> NetParams:
    def rmap(m):
        cell = GruCellParams(v[f"{m}.cell.W"], v[f"{m}.cell.U"], v[f"{m}.cell.b"])
        return RecurrentMap(cell, v[f"{m}.head_W"], v[f"{m}.head_b"])
    return NetParams(f_p=rmap("f_p"), f_q=rmap("f_q"), f_z=rmap("f_z"),
                     log_sigma_p=v["log_sigma_p"], log_sigma_q=v["log_sigma_q"],
                     A_diag=v["A_diag"])


def init_params(seed: int, K: int, M: int, hidden_dim: int = HIDDEN_DIM) -> NetParams:
    """GRU weights ~ U(+-1/sqrt(H)), zero heads, sigma_p = sigma_q = 0.1, A = 0.95."""
    rng = np.random.default_rng(seed)
    size = sum(int(np.prod(s)) for _, s in net_layout(K, M, hidden_dim))
    nets = NetParams.from_flat(np.zeros(size), K, M, hidden_dim)
    bound = 1.0 / np.sqrt(hidden_dim)
    for m in _MAP_ORDER:
        cell = getattr(nets, m).cell
        for arr in (cell.W, cell.U, cell.b):
            arr[...] = rng.uniform(-bound, bound, size=arr.shape)
    nets.log_sigma_p[...] = np.log(0.1)
    nets.log_sigma_q[...] = np.log(0.1)
    nets.A_diag[...] = 0.95
    return nets


# -- forward maps (polymorphic: arrays or Tensors) ---------------------------

def gru_step(cell: GruCellParams, x, s):
    """One GRU update; returns the new hidden state."""
    H, D = cell.hidden_dim, cell.input_dim
    if np.shape(ad.value(x)) != (D,) or np.shape(ad.value(s)) != (H,):
        raise ad.ShapeError(f"gru_step expects x of shape ({D},) and s of shape ({H},), "
                            f"got {np.shape(ad.value(x))} and {np.shape(ad.value(s))}")
    gx = cell.W @ x + cell.b
    gs = cell.U[:2 * H] @ s
    r = ad.sigmoid(gx[:H] + gs[:H])
    u = ad.sigmoid(gx[H:2 * H] + gs[H:])
    c = ad.tanh(gx[2 * H:] + cell.U[2 * H:] @ (r * s))
    return (1.0 - u) * s + u * c


def map_step(rmap: RecurrentMap, x, s):
    s_new = gru_step(rmap.cell, x, s)
    return rmap.head_W @ s_new + rmap.head_b, s_new


def normalize_counts(y):
    """Network-input transform for raw counts."""
    return np.log1p(np.asarray(y, dtype=float))


def fp_locations(nets: NetParams, h_prev, y_prev, s):
    """Prior gate log-locations from the previous gates and previous counts."""
    return map_step(nets.f_p, ad.concatenate([h_prev, normalize_counts(y_prev)]), s)


def fq_locations(nets: NetParams, h_prev, y_curr, s):
    """Posterior gate log-locations; conditioned on the current counts."""
    return map_step(nets.f_q, ad.concatenate([h_prev, normalize_counts(y_curr)]), s)


def fz_means(nets: NetParams, z_prev, y_curr, s):
    """Posterior means of the K+1 log-amplitudes."""
    return map_step(nets.f_z, ad.concatenate([z_prev, normalize_counts(y_curr)]), s)


# -- serialization -----------------------------------------------------------

def save_blob(path: str | Path, named: list[tuple[str, np.ndarray]], meta: dict | None = None):
    """Write ``path`` (little-endian float64) and ``path.json`` (sidecar)."""
    path = Path(path)
    tensors, off, chunks = [], 0, []
    for name, arr in named:
        arr = np.asarray(ad.value(arr), dtype="<f8")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": off})
        off += arr.size
        chunks.append(arr.ravel())
    flat = np.concatenate(chunks) if chunks else np.zeros(0, "<f8")
    path.write_bytes(flat.astype("<f8").tobytes())
    sidecar = {"format_version": PARAMS_FORMAT_VERSION, "dtype": "float64-le",
               "count": int(flat.size), "tensors": tensors, "meta": meta or {}}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=1))


def load_blob(path: str | Path) -> tuple[dict, dict]:
    """Inverse of :func:`save_blob`: returns ``({name: array}, meta)``."""
    path = Path(path)
    side_path = Path(str(path) + ".json")
    if not side_path.exists():
        raise FileNotFoundError(f"missing parameter sidecar {side_path}")
    side = json.loads(side_path.read_text())
    if side.get("format_version") != PARAMS_FORMAT_VERSION:
        raise ValueError(f"unsupported parameter format version {side.get('format_version')!r}")
    flat = np.frombuffer(path.read_bytes(), dtype="<f8").astype(np.float64)
    if flat.size != side["count"]:
        raise ValueError(f"blob holds {flat.size} values, sidecar says {side['count']}")
    out = {}
    for t in side["tensors"]:
        n = int(np.prod(t["shape"]))
        out[t["name"]] = flat[t["offset"]:t["offset"] + n].reshape(t["shape"]).copy()
    return out, side.get("meta", {})
