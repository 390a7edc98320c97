"""Planted-truth scenarios: block features, scripted gates, smooth amplitudes.

A scenario fixes everything except the Poisson draw, which comes from its
seed. Amplitude specs give z directly (log scale):

    {"kind": "constant", "c": 0.0}
    {"kind": "line", "a": 0.0, "b": 1.0}          z_t = a + b * t / T
    {"kind": "sinusoid", "amp": 1.0, "period": 250, "phase": 0.0, "offset": 0.0}
                                                  z_t = offset + amp * sin(2 pi t / period + phase)
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import LatentTrajectory, SpikeCountMatrix, rates

SCENARIO_FORMAT_VERSION = 1
_SPEC_KEYS = {"constant": {"c"}, "line": {"a", "b"},
              "sinusoid": {"amp", "period", "phase", "offset"}}


def amplitude(spec: dict, T: int) -> np.ndarray:
    """Evaluate an amplitude spec on t = 0..T-1."""
    kind = spec.get("kind")
    if kind not in _SPEC_KEYS:
        raise ValueError(f"unknown amplitude kind {kind!r}")
    extra = set(spec) - _SPEC_KEYS[kind] - {"kind"}
    if extra:
        raise ValueError(f"unexpected keys for {kind}: {sorted(extra)}")
    t = np.arange(T, dtype=float)
    if kind == "constant":
        z = np.full(T, float(spec.get("c", 0.0)))
    elif kind == "line":
        z = float(spec.get("a", 0.0)) + float(spec.get("b", 0.0)) * t / T
    else:
        period = float(spec["period"])
        if period <= 0:
            raise ValueError("sinusoid period must be positive")
        z = (float(spec.get("offset", 0.0))
             + float(spec.get("amp", 1.0)) * np.sin(2 * np.pi * t / period + float(spec.get("phase", 0.0))))
    if not np.all(np.isfinite(z)):
        raise ValueError(f"amplitude spec {spec} produced non-finite values")
    return z


@dataclass
class Scenario:
    T: int
    M: int
    features: np.ndarray          # (K, M) >= 0
    gate_schedule: np.ndarray     # (T, K) in {0, 1}
    amplitudes: list              # K specs
    background: np.ndarray        # (M,) >= 0
    background_amplitude: dict = field(default_factory=lambda: {"kind": "constant", "c": 0.0})
    seed: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float).reshape(-1, self.M)
        self.background = np.asarray(self.background, dtype=float)
        self.gate_schedule = np.asarray(self.gate_schedule)
        K = self.features.shape[0]
        if self.T < 1 or self.M < 1:
            raise ValueError("T and M must be positive")
        if self.background.shape != (self.M,):
            raise ValueError(f"background must have {self.M} entries")
        if np.any(self.features < 0) or np.any(self.background < 0):
            raise ValueError("feature loadings must be non-negative")
        if self.gate_schedule.shape != (self.T, K):
            raise ValueError(f"gate schedule must be ({self.T}, {K}), got {self.gate_schedule.shape}")
        if not np.isin(self.gate_schedule, (0, 1)).all():
            raise ValueError("gate schedule entries must be 0 or 1")
        self.gate_schedule = self.gate_schedule.astype(np.int64)
        if len(self.amplitudes) != K:
            raise ValueError(f"need {K} amplitude specs, got {len(self.amplitudes)}")
        for spec in list(self.amplitudes) + [self.background_amplitude]:
            amplitude(spec, 1)

    @property
    def K(self) -> int:
        return self.features.shape[0]

    @property
    def theta(self) -> np.ndarray:
        """(K+1, M) loadings with the background as row 0."""
        return np.vstack([self.background, self.features])

    def to_json(self) -> dict:
        return {"format_version": SCENARIO_FORMAT_VERSION, "T": self.T, "M": self.M,
                "features": self.features.tolist(), "gate_schedule": self.gate_schedule.tolist(),
                "amplitudes": list(self.amplitudes), "background": self.background.tolist(),
                "background_amplitude": self.background_amplitude, "seed": self.seed}

    @classmethod
    def from_json(cls, d: dict) -> "Scenario":
        d = dict(d)
        version = d.pop("format_version", SCENARIO_FORMAT_VERSION)
        if version != SCENARIO_FORMAT_VERSION:
            raise ValueError(f"unsupported scenario format version {version!r}")
        known = {"T", "M", "features", "gate_schedule", "amplitudes", "background",
                 "background_amplitude", "seed"}
        if set(d) - known:
            raise ValueError(f"unknown scenario keys: {sorted(set(d) - known)}")
        missing = {"T", "M", "features", "gate_schedule", "amplitudes", "background"} - set(d)
        if missing:
            raise ValueError(f"scenario is missing {sorted(missing)}")
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class GroundTruth:
    traj: LatentTrajectory
    rates: np.ndarray
    counts: SpikeCountMatrix


def latent_z(s: Scenario) -> np.ndarray:
    cols = [amplitude(s.background_amplitude, s.T)] + [amplitude(a, s.T) for a in s.amplitudes]
    return np.stack(cols, axis=1)


def generate(s: Scenario) -> GroundTruth:
    """Exact binary gates and planted amplitudes, then one Poisson draw per entry."""
    z = latent_z(s)
    h = s.gate_schedule.astype(float)
    lam = rates(s.theta, h, z)
    rng = np.random.default_rng(s.seed)
    counts = rng.poisson(lam)
    return GroundTruth(traj=LatentTrajectory(h, z), rates=lam, counts=SpikeCountMatrix(counts))


def on_runs(col: np.ndarray) -> list[tuple[int, int]]:
    """(start, stop) of each maximal run of ones."""
    d = np.diff(np.concatenate([[0], np.asarray(col, dtype=int), [0]]))
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)))


# 13 of the 16 on/off combinations of four features
PAPER_COMBOS = [(0, 0, 0, 0), (1, 0, 0, 0), (0, 1, 0, 0), (0, 0, 1, 0), (0, 0, 0, 1),
                (1, 1, 0, 0), (0, 1, 1, 0), (0, 0, 1, 1), (1, 0, 1, 0), (1, 0, 0, 1),
                (0, 1, 0, 1), (1, 1, 1, 0), (1, 1, 1, 1)]


def benchmark_scenario(seed: int = 0) -> Scenario:
    """T=1000, M=16, four block features (channel 4 shared by the first two),
    a 26-segment schedule visiting 13 gate combinations twice, and line or
    sinusoid amplitudes."""
    T, M, K = 1000, 16, 4
    rng = np.random.default_rng([seed, 7])
    features = np.zeros((K, M))
    for k, block in enumerate([range(0, 5), range(4, 8), range(8, 12), range(12, 16)]):
        features[k, list(block)] = 1.0
    order = list(range(13)) + [12, 0, 5, 3, 9, 1, 7, 11, 2, 10, 4, 6, 8]
    lens = rng.integers(25, 55, size=len(order)).astype(float)
    lens = np.round(lens / lens.sum() * T).astype(int)
    lens[-1] += T - lens.sum()
    schedule = np.concatenate([np.tile(PAPER_COMBOS[o], (n, 1)) for o, n in zip(order, lens)])
    amplitudes = [
        {"kind": "sinusoid", "amp": 0.5, "period": 250.0, "phase": 0.0, "offset": float(np.log(4))},
        {"kind": "line", "a": float(np.log(3)), "b": 0.6},
        {"kind": "sinusoid", "amp": 0.4, "period": 400.0, "phase": 1.0, "offset": float(np.log(5))},
        {"kind": "line", "a": float(np.log(6)), "b": -0.5},
    ]
    return Scenario(T=T, M=M, features=features, gate_schedule=schedule, amplitudes=amplitudes,
                    background=np.ones(M), seed=seed)
