"""Post-fit summaries: rescaling, gate hardening, occupancy, segment
comparisons, feature matching and figure export."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .dataio import RecordingMeta


@dataclass
class AnalysisResult:
    theta_rescaled: np.ndarray    # (K+1, M)
    z_adjusted: np.ndarray        # (T, K+1)
    hard_gates: np.ndarray        # (T, K)
    occupancy: np.ndarray         # (K,)
    retained: list                # feature indices 1..K passing the filter, plus 0
    active_per_segment: list      # one count per segment
    cosine_matrix: np.ndarray     # (S, S)
    unscaled_rows: list           # rows left alone because they were all zero
    segment_labels: list


def rescale(theta, z):
    """Divide each theta row by its max and shift z by log(max) so that every
    rate theta[k] e^z[:, k] is unchanged. All-zero rows are left alone and
    reported in the third return value."""
    theta = np.asarray(theta, dtype=float)
    z = np.asarray(z, dtype=float)
    c = theta.max(axis=1)
    flagged = [int(k) for k in np.flatnonzero(~(c > 0))]
    c = np.where(c > 0, c, 1.0)
    return theta / c[:, None], z + np.log(c)[None, :], flagged


def harden_gates(h, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(h) > threshold).astype(np.int64)


def occupancy(hard_gates) -> np.ndarray:
    g = np.asarray(hard_gates, dtype=float)
    return g.mean(axis=0) if g.shape[0] else np.zeros(g.shape[1])


def occupancy_filter(hard_gates, min_frac: float = 0.05) -> list[int]:
    """Retained feature indices in theta-row numbering: 0 (background) always,
    then k for each gate column k-1 on at least ``min_frac`` of the bins."""
    occ = occupancy(hard_gates)
    return [0] + [k + 1 for k in range(occ.size) if occ[k] >= min_frac]


def _segments(T: int, meta: RecordingMeta | None):
    return [(0, T)] if meta is None else meta.segments(T)


def active_per_segment(hard_gates, meta: RecordingMeta | None, min_frac: float = 0.05) -> list[int]:
    g = np.asarray(hard_gates)
    return [len(occupancy_filter(g[a:b], min_frac)) - 1 for a, b in _segments(g.shape[0], meta)]


def segment_profiles(h, meta: RecordingMeta | None) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    return np.array([h[a:b].mean(axis=0) for a, b in _segments(h.shape[0], meta)])


def cosine_rows(A, B) -> np.ndarray:
    """Pairwise row cosines; rows with zero norm give 0."""
    A, B = np.atleast_2d(np.asarray(A, float)), np.atleast_2d(np.asarray(B, float))
    na, nb = np.linalg.norm(A, axis=1), np.linalg.norm(B, axis=1)
    num = A @ B.T
    den = np.outer(na, nb)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def segment_cosine(h, meta: RecordingMeta) -> np.ndarray:
    """Cosine similarity of per-segment mean gate vectors (soft or hardened)."""
    return cosine_rows(*(2 * [segment_profiles(h, meta)]))


def nearest_rank(values, percentile: float) -> float:
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise ValueError("empty matrix")
    rank = max(1, math.ceil(percentile / 100.0 * v.size))
    return float(v[rank - 1])


def truncated_heatmap_data(matrix, percentile: float = 95.0):
    clip = nearest_rank(matrix, percentile)
    return np.minimum(np.asarray(matrix, dtype=float), clip), clip


def match_features(theta_true, theta_learned):
    """Hungarian assignment maximizing summed row cosine.

    Returns ``(pairs, mean_cosine)`` where ``pairs`` lists (true_row,
    learned_row). With unequal counts the smaller set is fully matched.
    """
    cos = cosine_rows(theta_true, theta_learned)
    if cos.size == 0:
        raise ValueError("both row sets must be nonempty")
    r, c = linear_sum_assignment(-cos)
    return list(zip(r.tolist(), c.tolist())), float(cos[r, c].mean())


def analyze(theta, h, z, meta: RecordingMeta | None = None, min_frac: float = 0.05,
            threshold: float = 0.5, hard_cosine: bool = False) -> AnalysisResult:
    th, za, flagged = rescale(theta, z)
    hard = harden_gates(h, threshold)
    T = hard.shape[0]
    if meta is None:
        meta = RecordingMeta(T=T)
    segs = meta.segments(T)
    cos = segment_cosine(hard if hard_cosine else h, meta) if len(segs) > 1 else np.ones((1, 1))
    labels = meta.segment_labels or [f"segment{i}" for i in range(len(segs))]
    return AnalysisResult(theta_rescaled=th, z_adjusted=za, hard_gates=hard,
                          occupancy=occupancy(hard), retained=occupancy_filter(hard, min_frac),
                          active_per_segment=active_per_segment(hard, meta, min_frac),
                          cosine_matrix=cos, unscaled_rows=flagged, segment_labels=labels)


# -- export ------------------------------------------------------------------

def grid_layout(M: int, layout_csv=None) -> np.ndarray:
    """(M, 2) integer electrode positions: a near-square grid unless a CSV of
    ``channel,x,y`` rows is given."""
    if layout_csv is not None:
        pos = np.zeros((M, 2), dtype=int)
        with open(layout_csv, newline="") as f:
            for row in csv.DictReader(f):
                pos[int(row["channel"])] = int(row["x"]), int(row["y"])
        return pos
    side = math.ceil(math.sqrt(M))
    return np.array([(m % side, m // side) for m in range(M)])


def _heatmap(path, data, title, xlabel, ylabel, vmax=None):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 3))
    im = ax.imshow(np.asarray(data).T, aspect="auto", interpolation="nearest",
                   cmap="viridis", vmin=0, vmax=vmax)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def export_figures(counts, res: AnalysisResult, h, out_dir, layout_csv=None) -> list[Path]:
    """Write SVG heatmaps and CSV tables; returns the written paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    trunc, clip = truncated_heatmap_data(counts)
    p = out / "counts.svg"
    _heatmap(p, trunc, f"spike counts (clipped at {clip:g})", "time bin", "channel", vmax=clip)
    written.append(p)

    p = out / "gates.svg"
    _heatmap(p, h, "posterior gate means", "time bin", "feature", vmax=1.0)
    written.append(p)

    activity = np.hstack([np.exp(res.z_adjusted[:, :1]), np.asarray(h) * np.exp(res.z_adjusted[:, 1:])])
    p = out / "activity.svg"
    _heatmap(p, activity, "feature activity (background first)", "time bin", "feature")
    written.append(p)

    pos = grid_layout(res.theta_rescaled.shape[1], layout_csv)
    nx, ny = pos.max(axis=0) + 1
    for k in res.retained:
        img = np.full((ny, nx), np.nan)
        img[pos[:, 1], pos[:, 0]] = res.theta_rescaled[k]
        fig, ax = plt.subplots(figsize=(3, 3))
        im = ax.imshow(img, vmin=0, vmax=1, cmap="magma", interpolation="nearest")
        ax.set_title("background" if k == 0 else f"feature {k}")
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046)
        p = out / f"feature_{k}.svg"
        fig.savefig(p, format="svg")
        plt.close(fig)
        written.append(p)

    p = out / "occupancy.csv"
    _write_rows(p, ["feature", "occupancy"],
                [[k + 1, repr(float(o))] for k, o in enumerate(res.occupancy)])
    written.append(p)
    p = out / "active_per_segment.csv"
    _write_rows(p, ["segment", "label", "n_active"],
                [[i, lab, n] for i, (lab, n) in enumerate(zip(res.segment_labels, res.active_per_segment))])
    written.append(p)
    p = out / "cosine.csv"
    _write_rows(p, res.segment_labels, [[repr(float(v)) for v in row] for row in res.cosine_matrix])
    written.append(p)
    p = out / "theta_rescaled.csv"
    _write_rows(p, [f"ch{m}" for m in range(res.theta_rescaled.shape[1])],
                [[repr(float(v)) for v in row] for row in res.theta_rescaled])
    written.append(p)
    return written
