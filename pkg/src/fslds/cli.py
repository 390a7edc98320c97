"""Command-line driver: simulate, fit, analyze, concat.

Configuration is a JSON object with dotted keys (``"fit.epochs": 3000``) or
the equivalent nested form. Any key can be overridden with ``--set
key=value``; unknown keys are rejected. The resolved configuration is written
next to the outputs as ``config_snapshot.json`` and can be fed back through
``--config``. ``FSLDS_SEED`` in the environment overrides both seeds.

Exit codes: 0 success, 2 usage or input error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import analysis, dataio, synthetic
from .inference import AllRestartsFailed, FitConfig, fit_multi

log = logging.getLogger("fslds")

PRESETS = {
    "synthetic": {"fit.lr_main": 0.01, "fit.epochs": 3000},
    "real": {"fit.lr_main": 0.001, "fit.epochs": 5000},
}


class InputError(Exception):
    """Bad user input; maps to exit code 2."""


def default_config() -> dict:
    cfg = {f"fit.{f.name}": getattr(FitConfig(), f.name) for f in fields(FitConfig)}
    cfg.update(PRESETS["synthetic"])
    cfg.update({
        "analysis.min_frac": 0.05,
        "analysis.threshold": 0.5,
        "analysis.percentile": 95.0,
        "analysis.hard_cosine": False,
        "analysis.layout_csv": None,
        "simulate.seed": None,
    })
    return cfg


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, raw: str, current):
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    if isinstance(current, bool) and not isinstance(val, bool):
        raise InputError(f"{key} expects true/false, got {raw!r}")
    if isinstance(current, int) and not isinstance(current, bool) and isinstance(val, float):
        if val != int(val):
            raise InputError(f"{key} expects an integer, got {raw!r}")
        val = int(val)
    if isinstance(current, float) and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    return val


def resolve_config(path=None, overrides=(), preset=None) -> dict:
    cfg = default_config()
    if preset:
        cfg.update(PRESETS[preset])
    if path:
        try:
            loaded = flatten(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise InputError(f"cannot read config {path}: {e}") from None
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for item in overrides:
        if "=" not in item:
            raise InputError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        if key not in cfg:
            raise InputError(f"unknown config key {key!r}")
        cfg[key] = _coerce(key, raw, cfg[key])
    env_seed = os.environ.get("FSLDS_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise InputError(f"FSLDS_SEED must be an integer, got {env_seed!r}") from None
        cfg["fit.seed"] = seed
        cfg["simulate.seed"] = seed
    return cfg


def section(cfg: dict, name: str) -> dict:
    p = name + "."
    return {k[len(p):]: v for k, v in cfg.items() if k.startswith(p)}


def fit_config(cfg: dict) -> FitConfig:
    try:
        return FitConfig.from_dict(section(cfg, "fit"))
    except (TypeError, ValueError) as e:
        raise InputError(f"invalid fit config: {e}") from None


def write_snapshot(out_dir: Path, cfg: dict) -> None:
    (out_dir / "config_snapshot.json").write_text(json.dumps(cfg, indent=1, sort_keys=True))


def _mkdir(p) -> Path:
    p = Path(p)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise InputError(f"cannot create output directory {p}: {e}") from None
    return p


# -- commands ----------------------------------------------------------------

def cmd_simulate(args, cfg) -> None:
    out = _mkdir(args.out)
    if args.scenario in (None, "benchmark"):
        scen = synthetic.benchmark_scenario()
    else:
        try:
            scen = synthetic.Scenario.load(args.scenario)
        except (OSError, ValueError, TypeError, KeyError, json.JSONDecodeError) as e:
            raise InputError(f"bad scenario {args.scenario}: {e}") from None
    if cfg["simulate.seed"] is not None:
        scen.seed = int(cfg["simulate.seed"])
    gt = synthetic.generate(scen)
    scen.save(out / "scenario.json")
    dataio.save_counts_csv(gt.counts, out / "counts.csv")
    K = scen.K
    dataio.save_matrix_csv(out / "traj.csv", np.hstack([gt.traj.h, gt.traj.z]),
                           [f"h{k + 1}" for k in range(K)] + [f"z{c}" for c in range(K + 1)])
    dataio.save_matrix_csv(out / "rates.csv", gt.rates, gt.counts.channel_labels)
    res = analysis.analyze(scen.theta, gt.traj.h, gt.traj.z, min_frac=cfg["analysis.min_frac"])
    analysis.export_figures(gt.counts.counts, res, gt.traj.h, out / "figures")
    write_snapshot(out, cfg)
    log.info("wrote %d x %d counts to %s", gt.counts.T, gt.counts.M, out)


def _load_counts(path):
    try:
        return dataio.load_counts_csv(path)
    except (OSError, ValueError) as e:
        raise InputError(str(e)) from None


def cmd_fit(args, cfg) -> None:
    if args.restarts is not None:
        cfg["fit.n_restarts"] = args.restarts
    fc = fit_config(cfg)
    y = _load_counts(args.counts)
    if y.T < 2:
        raise InputError("need at least two time bins to fit")
    out = _mkdir(args.out)
    log.info("fitting K=%d on %d x %d counts, %d restarts, %d jobs",
             fc.K, y.T, y.M, fc.n_restarts, args.jobs)
    result = fit_multi(y, fc, jobs=args.jobs)
    dataio.save_fit(out, result)
    dataio.save_counts_csv(y, out / "counts.csv")
    write_snapshot(out, cfg)
    log.info("selected seed %d, final ELBO %.3f", result.seed, result.final_elbo)


def cmd_analyze(args, cfg) -> None:
    try:
        fit = dataio.load_fit(args.fit)
    except FileNotFoundError as e:
        raise InputError(str(e)) from None
    out = _mkdir(args.out)
    counts_path = Path(args.counts) if args.counts else Path(args.fit) / "counts.csv"
    y = _load_counts(counts_path)
    meta = None
    if args.segments:
        try:
            meta = dataio.RecordingMeta.load(args.segments)
        except (OSError, ValueError, TypeError, json.JSONDecodeError) as e:
            raise InputError(f"bad segment metadata {args.segments}: {e}") from None
        if meta.T is not None and meta.T != y.T:
            raise InputError(f"segment metadata is for T={meta.T}, counts have T={y.T}")
    traj = fit.posterior_traj
    res = analysis.analyze(fit.theta, traj.h, traj.z, meta,
                           min_frac=cfg["analysis.min_frac"], threshold=cfg["analysis.threshold"],
                           hard_cosine=cfg["analysis.hard_cosine"])
    trunc, clip = analysis.truncated_heatmap_data(y.counts, cfg["analysis.percentile"])
    analysis.export_figures(y.counts, res, traj.h, out, layout_csv=cfg["analysis.layout_csv"])
    summary = {"retained": res.retained, "occupancy": res.occupancy.tolist(),
               "active_per_segment": res.active_per_segment, "count_clip": clip,
               "unscaled_rows": res.unscaled_rows}
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    write_snapshot(out, cfg)
    log.info("retained features %s; active per segment %s", res.retained[1:], res.active_per_segment)


def cmd_concat(args, cfg) -> None:
    ys = [_load_counts(p) for p in args.counts]
    try:
        y, meta = dataio.concat_recordings(ys, label=args.label,
                                           segment_labels=[Path(p).stem for p in args.counts])
    except ValueError as e:
        raise InputError(str(e)) from None
    dataio.save_counts_csv(y, args.out)
    meta.save(args.meta)
    log.info("concatenated %d recordings -> %d bins, boundaries %s",
             len(ys), y.T, meta.segment_boundaries)


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fslds", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
        sp.add_argument("--preset", choices=sorted(PRESETS), help="learning-rate/epoch preset")

    sp = sub.add_parser("simulate", help="generate a planted-truth data set")
    sp.add_argument("--scenario", default="benchmark", help="scenario JSON, or 'benchmark'")
    sp.add_argument("--out", required=True)
    common(sp)

    sp = sub.add_parser("fit", help="fit the model with random restarts")
    sp.add_argument("--counts", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--restarts", type=int)
    sp.add_argument("--jobs", type=int, default=1)
    common(sp)

    sp = sub.add_parser("analyze", help="summaries and figures for a fit")
    sp.add_argument("--fit", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--segments", help="segment metadata JSON from 'concat'")
    sp.add_argument("--counts", help="counts CSV (defaults to the copy in the fit directory)")
    common(sp)

    sp = sub.add_parser("concat", help="concatenate recordings in time")
    sp.add_argument("--counts", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--meta", required=True)
    sp.add_argument("--label", default="")
    common(sp)
    return p


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "analyze": cmd_analyze, "concat": cmd_concat}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args.config, args.set, args.preset)
        COMMANDS[args.command](args, cfg)
    except InputError as e:
        print(f"fslds {args.command}: error: {e}", file=sys.stderr)
        return 2
    except AllRestartsFailed as e:
        print(f"fslds {args.command}: {e}", file=sys.stderr)
        return 3
    except Exception as e:  # noqa: BLE001 - last-resort runtime failure
        log.exception("runtime failure")
        print(f"fslds {args.command}: runtime failure: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
