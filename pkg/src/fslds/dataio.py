"""Spike data ingestion, binning, concatenation and fit directories.

File formats
------------
counts CSV      header of channel labels, then one integer row per bin
events CSV      two columns ``time_seconds,channel`` with a header row, plus a
                JSON header ``<csv>.json`` holding ``duration_seconds`` and ``M``
fit directory   params.bin (+ params.bin.json), posterior.csv, elbo_trace.csv,
                config.json, restarts.csv
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .inference import ElboEstimate, FitConfig, FitResult, unpack
from .model import LatentTrajectory, SpikeCountMatrix
from .nnet import load_blob, net_layout, save_blob

FIT_FORMAT_VERSION = 1


@dataclass
class SpikeEventList:
    times: np.ndarray      # seconds
    channels: np.ndarray   # 0..M-1
    duration_seconds: float
    M: int

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).ravel()
        self.channels = np.asarray(self.channels).ravel()
        if self.times.shape != self.channels.shape:
            raise ValueError("times and channels must have the same length")
        if not self.duration_seconds > 0 or self.M < 1:
            raise ValueError("duration must be positive and M >= 1")
        if self.channels.size and not np.all(np.mod(self.channels, 1) == 0):
            raise ValueError("channels must be integers")
        self.channels = self.channels.astype(np.int64)
        if np.any((self.channels < 0) | (self.channels >= self.M)):
            raise ValueError(f"channel index outside 0..{self.M - 1}")
        if np.any(self.times < 0) or np.any(self.times >= self.duration_seconds):
            bad = int(np.flatnonzero((self.times < 0) | (self.times >= self.duration_seconds))[0])
            raise ValueError(f"event {bad} at {self.times[bad]}s lies outside [0, {self.duration_seconds})")


@dataclass
class RecordingMeta:
    label: str = ""
    segment_boundaries: list = field(default_factory=list)
    T: int | None = None
    segment_labels: list = field(default_factory=list)

    def __post_init__(self):
        b = [int(x) for x in self.segment_boundaries]
        if any(b2 <= b1 for b1, b2 in zip(b, b[1:])):
            raise ValueError("segment boundaries must be strictly increasing")
        if b and (b[0] < 0 or (self.T is not None and b[-1] > self.T)):
            raise ValueError("segment boundaries must lie within [0, T]")
        self.segment_boundaries = b

    def segments(self, T: int | None = None) -> list[tuple[int, int]]:
        """(start, stop) bin ranges, one per segment."""
        T = self.T if T is None else T
        if T is None:
            raise ValueError("recording length unknown")
        edges = [0] + [x for x in self.segment_boundaries if 0 < x < T] + [T]
        return list(zip(edges[:-1], edges[1:]))

    def to_json(self) -> dict:
        return {"label": self.label, "segment_boundaries": self.segment_boundaries,
                "T": self.T, "segment_labels": self.segment_labels}

    @classmethod
    def from_json(cls, d: dict) -> "RecordingMeta":
        return cls(**d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "RecordingMeta":
        return cls.from_json(json.loads(Path(path).read_text()))


# -- binning -----------------------------------------------------------------

def bin_events(e: SpikeEventList, bin_width_seconds: float) -> SpikeCountMatrix:
    """Half-open bins [t w, (t+1) w); a final partial bin is kept."""
    w = float(bin_width_seconds)
    if not w > 0:
        raise ValueError("bin width must be positive")
    T = math.ceil(e.duration_seconds / w)
    idx = np.floor(e.times / w).astype(np.int64)
    # guard against t*w round-off pushing an in-range event one bin too far
    idx = np.minimum(idx, T - 1)
    counts = np.zeros((T, e.M), dtype=np.int64)
    np.add.at(counts, (idx, e.channels), 1)
    return SpikeCountMatrix(counts, bin_width_seconds=w)


def load_events(csv_path) -> SpikeEventList:
    csv_path = Path(csv_path)
    header = json.loads(Path(str(csv_path) + ".json").read_text())
    times, chans = [], []
    with open(csv_path, newline="") as f:
        reader = csv.reader(f)
        next(reader, None)
        for i, row in enumerate(reader, start=1):
            if len(row) != 2:
                raise ValueError(f"{csv_path}: row {i} has {len(row)} fields, expected 2")
            try:
                times.append(float(row[0]))
                chans.append(int(row[1]))
            except ValueError:
                raise ValueError(f"{csv_path}: row {i} is not (time, channel)") from None
    return SpikeEventList(np.array(times), np.array(chans, dtype=np.int64),
                          header["duration_seconds"], header["M"])


def save_events(e: SpikeEventList, csv_path) -> None:
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["time_seconds", "channel"])
        for t, c in zip(e.times, e.channels):
            w.writerow([repr(float(t)), int(c)])
    Path(str(csv_path) + ".json").write_text(
        json.dumps({"duration_seconds": e.duration_seconds, "M": e.M}))


# -- counts CSV --------------------------------------------------------------

def load_counts_csv(path, bin_width_seconds: float = 1.0) -> SpikeCountMatrix:
    """Header of channel labels, then integer rows. Rows are numbered from 1
    after the header in error messages."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            labels = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = []
        for i, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(labels):
                raise ValueError(f"{path}: row {i} has {len(row)} cells, header has {len(labels)}")
            vals = []
            for cell in row:
                try:
                    v = int(cell.strip())
                except ValueError:
                    raise ValueError(f"{path}: row {i} has non-integer cell {cell!r}") from None
                if v < 0:
                    raise ValueError(f"{path}: row {i} has negative count {v}")
                vals.append(v)
            rows.append(vals)
    counts = np.array(rows, dtype=np.int64).reshape(len(rows), len(labels))
    return SpikeCountMatrix(counts, bin_width_seconds=bin_width_seconds, channel_labels=labels)


def save_counts_csv(y: SpikeCountMatrix, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(y.channel_labels)
        w.writerows(y.counts.tolist())


def save_matrix_csv(path, arr, header) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in np.asarray(arr):
            w.writerow([repr(float(v)) for v in row])


def load_matrix_csv(path) -> tuple[list, np.ndarray]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    return header, np.array(rows, dtype=float).reshape(len(rows), len(header))


# -- concatenation -----------------------------------------------------------

def concat_recordings(ys: list, label: str = "", segment_labels: list | None = None):
    """Stack recordings in time; boundaries mark where each later one starts."""
    if not ys:
        raise ValueError("nothing to concatenate")
    first = ys[0]
    for i, y in enumerate(ys[1:], start=1):
        if y.M != first.M or list(y.channel_labels) != list(first.channel_labels):
            raise ValueError(f"recording {i} channels do not match recording 0")
        if y.bin_width_seconds != first.bin_width_seconds:
            raise ValueError(f"recording {i} bin width differs from recording 0")
    lengths = np.cumsum([y.T for y in ys])
    counts = np.vstack([y.counts for y in ys])
    meta = RecordingMeta(label=label, segment_boundaries=[int(x) for x in lengths[:-1]],
                         T=int(lengths[-1]), segment_labels=list(segment_labels or []))
    return SpikeCountMatrix(counts, first.bin_width_seconds, list(first.channel_labels)), meta


# -- fit directories ---------------------------------------------------------

TRACE_HEADER = ["total", "recon", "kl_h", "kl_z", "l1_penalty"]


def save_fit(path, fit: FitResult) -> None:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    K, M = fit.model.K, np.shape(fit.model.rho)[1]
    named = [("theta.rho", fit.model.rho)] + fit.nets.named()
    save_blob(d / "params.bin", named, meta={"K": K, "M": M, "hidden_dim": fit.nets.hidden_dim})
    traj = fit.posterior_traj
    save_matrix_csv(d / "posterior.csv", np.hstack([traj.h, traj.z]),
                    [f"h{k + 1}" for k in range(K)] + [f"z{c}" for c in range(K + 1)])
    save_matrix_csv(d / "elbo_trace.csv", [e.as_row() for e in fit.elbo_trace], TRACE_HEADER)
    (d / "config.json").write_text(json.dumps(fit.config.to_dict(), indent=1))
    summary = {"format_version": FIT_FORMAT_VERSION, "seed": fit.seed,
               "final_elbo": fit.final_elbo, "phi_final": fit.phi_final}
    (d / "fit.json").write_text(json.dumps(summary, indent=1))
    with open(d / "restarts.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "status", "final_elbo", "error"])
        for r in fit.restarts:
            w.writerow([r["seed"], r["status"], repr(float(r["final_elbo"])), r["error"]])


def load_fit(path) -> FitResult:
    d = Path(path)
    if not (d / "fit.json").exists():
        raise FileNotFoundError(f"{d} is not a fit directory (no fit.json)")
    summary = json.loads((d / "fit.json").read_text())
    if summary.get("format_version") != FIT_FORMAT_VERSION:
        raise ValueError(f"unsupported fit format version {summary.get('format_version')!r}")
    arrays, meta = load_blob(d / "params.bin")
    K, M, Hd = meta["K"], meta["M"], meta["hidden_dim"]
    expected = ["theta.rho"] + [n for n, _ in net_layout(K, M, Hd)]
    if sorted(arrays) != sorted(expected):
        raise ValueError("parameter blob does not match the recorded layout")
    w = np.concatenate([np.ravel(arrays[n]) for n in expected])
    model, nets = unpack(w, K, M, Hd)
    cfg = FitConfig.from_dict(json.loads((d / "config.json").read_text()))
    _, post = load_matrix_csv(d / "posterior.csv")
    traj = LatentTrajectory(post[:, :K], post[:, K:])
    _, tr = load_matrix_csv(d / "elbo_trace.csv")
    trace = [ElboEstimate(*row) for row in tr.tolist()]
    restarts = []
    if (d / "restarts.csv").exists():
        with open(d / "restarts.csv", newline="") as f:
            for row in csv.DictReader(f):
                restarts.append({"seed": int(row["seed"]), "status": row["status"],
                                 "final_elbo": float(row["final_elbo"]), "error": row["error"]})
    return FitResult(model=model, nets=nets, posterior_traj=traj, elbo_trace=trace,
                     seed=summary["seed"], config=cfg, final_elbo=summary["final_elbo"],
                     phi_final=summary["phi_final"], restarts=restarts)
