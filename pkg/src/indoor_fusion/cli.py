"""Command-line front end tying the pipeline together.

Subcommands: ``simulate`` (write a two-campaign dataset pair), ``ingest``
(clock-correct, label and frame one dataset), ``calibrate`` (receiver gain
sweep), ``run`` (every requested localization method plus reports and
plots), ``plot`` (re-render the CDF figure from its CSV).

Exit codes: 0 success, 2 usage/config, 3 I/O, 4 numerical failure.  Options
may come from a flat ``key=value`` config file (``--config``); explicit
flags win.  ``INDOOR_FUSION_THREADS`` caps how many methods ``run``
evaluates concurrently.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    IndoorFusionError,
    InsufficientData,
    InvalidOverride,
    MalformedLine,
    NegativeTime,
    SchemaViolation,
)
from .evaluate import (
    ErrorReport,
    blocks_for_method,
    emit_plot,
    error_report,
    read_cdf_csv,
    run_generalization,
    write_cdf_svg,
)
from .fingerprint import (
    DEFAULT_K,
    DEFAULT_RESOLUTION,
    build_map,
    calibrate_rssi_offset,
    locate,
    rssi_snapshot_positions,
)
from .geometry import RangeObservation, locate_from_ranges
from .ingest import (
    DEFAULT_WINDOW_S,
    AlignedStream,
    FrameLayout,
    FusionFrame,
    IngestResult,
    build_fusion_frames,
    frame_layout,
    frames_to_arrays,
    ingest_run,
    label_with_groundtruth,
    select_blocks,
    write_frames,
)
from .mlp import MlpConfig, SplitSpec, predict_stream, split_dataset, train_arrays
from .records import Position2D, SensorOffset, read_records
from .simulate import (
    DEFAULT_PERTURBATION,
    NoiseConfig,
    Scenario,
    SimConfig,
    perturb_scenario,
    build_scenario,
    read_sidecar,
    sim_config_to_dict,
    simulate_run,
    write_dataset,
    write_sidecar,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

STANDARD_METHODS = (
    "uwb-trilat", "rssi-trilat", "rssi-fp", "csi-fp",
    "nn:csi", "nn:rssi", "nn:uwb", "nn:imu", "nn:csi-phase", "nn-fusion",
)
DEFAULT_METHODS = STANDARD_METHODS


def validate_method(name: str) -> str:
    if name in STANDARD_METHODS:
        return name
    if name.startswith("nn-fusion:"):
        try:
            blocks_for_method(name)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return name
    raise ConfigError(f"unknown method {name!r}; valid methods: "
                      f"{', '.join(STANDARD_METHODS)}, nn-fusion:<m1+m2+...>")


# ---------------------------------------------------------------------------
# Option resolution (defaults < config file < flags)

def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_CONFIG_KEYS = {
    "seed": int,
    "duration": float,
    "out": str,
    "methods": str,
    "transfer": _parse_bool,
    "window": float,
    "grid": float,
    "k": int,
    "epochs": int,
    "noiseless": _parse_bool,
    "log_x": _parse_bool,
}


def read_config_file(path) -> dict:
    """Flat key=value file; blank lines and #-comments ignored."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or not key:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            if key not in _CONFIG_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r} "
                                  f"(valid: {', '.join(sorted(_CONFIG_KEYS))})")
            try:
                values[key] = _CONFIG_KEYS[key](value.strip())
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return values


@dataclass(frozen=True)
class RunConfig:
    """Resolved options shared by all subcommands."""

    out: Path = Path(".")
    seed: int = 0
    duration: float = 600.0
    methods: tuple[str, ...] = DEFAULT_METHODS
    transfer: bool = False
    window: float = DEFAULT_WINDOW_S
    grid: float = DEFAULT_RESOLUTION
    k: int = DEFAULT_K
    epochs: int = 60
    noiseless: bool = False
    log_x: bool = False

    def __post_init__(self):
        if not self.methods:
            raise ConfigError("method set must be non-empty")
        if not math.isfinite(self.duration) or self.duration <= 0:
            raise ConfigError(f"duration must be a positive duration in seconds, "
                              f"got {self.duration}")
        if self.window <= 0:
            raise ConfigError(f"window must be > 0, got {self.window}")
        if self.grid <= 0:
            raise ConfigError(f"grid must be > 0, got {self.grid}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")

    def as_dict(self) -> dict:
        return {
            "out": str(self.out),
            "seed": self.seed,
            "duration": self.duration,
            "methods": list(self.methods),
            "transfer": self.transfer,
            "window": self.window,
            "grid": self.grid,
            "k": self.k,
            "epochs": self.epochs,
            "noiseless": self.noiseless,
            "log_x": self.log_x,
        }


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for key in _CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    if "methods" in values:
        tokens = [t.strip() for t in str(values["methods"]).split(",") if t.strip()]
        values["methods"] = tuple(validate_method(t) for t in tokens)
    if "out" in values:
        values["out"] = Path(values["out"])
    return RunConfig(**values)


def _max_workers(n_methods: int) -> int:
    workers = min(n_methods, os.cpu_count() or 1)
    env = os.environ.get("INDOOR_FUSION_THREADS")
    if env:
        try:
            cap = int(env)
        except ValueError as exc:
            raise ConfigError(f"INDOOR_FUSION_THREADS must be an integer, "
                              f"got {env!r}") from exc
        if cap < 1:
            raise ConfigError(f"INDOOR_FUSION_THREADS must be >= 1, got {cap}")
        workers = min(workers, cap)
    return max(workers, 1)


# ---------------------------------------------------------------------------
# simulate / ingest / calibrate

def cmd_simulate(cfg: RunConfig) -> int:
    scenario = build_scenario(cfg.seed)
    noise = NoiseConfig.zero() if cfg.noiseless else NoiseConfig()
    sim_config = SimConfig(duration=cfg.duration, noise=noise)
    # second campaign: perturbed layout, fresh measurement noise
    scenario2 = replace(perturb_scenario(scenario, DEFAULT_PERTURBATION, cfg.seed + 1),
                        seed=cfg.seed + 1)
    cfg.out.mkdir(parents=True, exist_ok=True)
    n1 = write_dataset(cfg.out / "dataset1.jsonl", simulate_run(scenario, sim_config))
    n2 = write_dataset(cfg.out / "dataset2.jsonl", simulate_run(scenario2, sim_config))
    write_sidecar(cfg.out / "scenario.json", scenario, sim_config, scenario2)
    print(f"wrote {n1} records to dataset1.jsonl, {n2} to dataset2.jsonl "
          f"(seed {cfg.seed}, {cfg.duration:g} s) in {cfg.out}")
    return EXIT_OK


def _load_campaign(cfg: RunConfig, which: int,
                   ) -> tuple[Scenario, SimConfig, IngestResult]:
    scenario1, sim_config, scenario2 = read_sidecar(cfg.out / "scenario.json")
    if which == 1:
        scenario = scenario1
    else:
        if scenario2 is None:
            raise ConfigError("scenario.json records no second campaign; "
                              "re-run simulate")
        scenario = scenario2
    records = read_records(cfg.out / f"dataset{which}.jsonl")
    result = ingest_run(records, scenario.sensor_offsets, sim_config.rates,
                        sim_config.duration, window=cfg.window)
    return scenario, sim_config, result


def cmd_ingest(cfg: RunConfig) -> int:
    scenario, _, result = _load_campaign(cfg, 1)
    n = write_frames(cfg.out / "frames1.jsonl", result.frames)
    summary = {
        "frames": n,
        "dropped_records": result.dropped,
        "window_s": cfg.window,
        "clocks": {s: {"offset_s": c.offset, "drift": c.drift}
                   for s, c in sorted(result.clock_estimates.items())},
        "blocks": [{"modality": b.modality, "width": b.width}
                   for b in result.layout.blocks],
        "streams": {m: len(s.samples) for m, s in sorted(result.streams.items())},
    }
    with open(cfg.out / "ingest.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"aligned {n} frames "
          f"({', '.join(f'{m}:{c}' for m, c in sorted(summary['streams'].items()))}) "
          f"-> frames1.jsonl")
    return EXIT_OK


def cmd_calibrate(cfg: RunConfig) -> int:
    scenario, _, result = _load_campaign(cfg, 1)
    stream = result.streams.get("rssi")
    if stream is None:
        raise InsufficientData("dataset carries no rssi records to calibrate on")
    cal = calibrate_rssi_offset(stream, list(scenario.wifi_anchors))
    doc = {"beta_db": cal.beta, "median_error_m": cal.error_m,
           "sweep": [[b, e] for b, e in cal.sweep_errors]}
    with open(cfg.out / "calibration.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    print(f"receiver gain beta = {cal.beta:+.0f} dB "
          f"(median error {cal.error_m:.3f} m) -> calibration.json")
    return EXIT_OK


# ---------------------------------------------------------------------------
# run: method runners

@dataclass
class _Campaign:
    scenario: Scenario
    result: IngestResult
    phase_frames: list[FusionFrame] | None = None
    phase_layout: FrameLayout | None = None


def _prepare_campaign(cfg: RunConfig, which: int, need_phase: bool) -> _Campaign:
    scenario, _, result = _load_campaign(cfg, which)
    camp = _Campaign(scenario, result)
    if need_phase:
        csi_records = [r for r in result.corrected if r.sensor == "csi"]
        stream = label_with_groundtruth(
            csi_records, result.gt_records,
            scenario.sensor_offsets.get("csi", SensorOffset()), csi_features="phase")
        camp.phase_frames = build_fusion_frames([stream], window=cfg.window)
        camp.phase_layout = frame_layout([stream])
    return camp


def _stream_or_raise(camp: _Campaign, modality: str) -> AlignedStream:
    stream = camp.result.streams.get(modality)
    if stream is None or not stream.samples:
        raise InsufficientData(f"dataset carries no {modality} records")
    return stream


def _labels_of(samples) -> list[tuple[float, Position2D]]:
    return [(s.t_ref, s.label) for s in samples]


def _uwb_trilat_report(camp: _Campaign) -> tuple[ErrorReport, dict]:
    stream = _stream_or_raise(camp, "uwb")
    anchors = {a.id: a for a in camp.scenario.uwb_anchors}
    estimates, labels = [], []
    degenerate = 0
    skipped = 0
    for s in stream.samples:
        usable = np.nonzero(s.features >= 0.0)[0]
        if len(usable) == 0:
            skipped += 1
            continue
        # dropout below three anchors falls back to a degenerate estimate,
        # which is what gives the CDF its two-regime shape
        degenerate += len(usable) < 3
        obs = [RangeObservation(anchors[stream.columns[j]], float(s.features[j]))
               for j in usable]
        estimates.append((s.t_ref, locate_from_ranges(obs).position))
        labels.append((s.t_ref, s.label))
    return error_report(estimates, labels), {"ticks_used": len(estimates),
                                             "ticks_degenerate": degenerate,
                                             "ticks_skipped": skipped}


def _rssi_trilat_report(camp: _Campaign, beta: float) -> ErrorReport:
    stream = _stream_or_raise(camp, "rssi")
    positions = {a.id: a.position for a in camp.scenario.wifi_anchors}
    est = rssi_snapshot_positions(stream, positions, beta)
    estimates = [(s.t_ref, Position2D(float(est[i, 0]), float(est[i, 1])))
                 for i, s in enumerate(stream.samples)]
    return error_report(estimates, _labels_of(stream.samples))


def _train_substream(stream: AlignedStream, samples) -> AlignedStream:
    ordered = tuple(sorted(samples, key=lambda s: s.t_ref))
    return replace(stream, samples=ordered, dropped=0, record_count=len(ordered))


def _fp_report(camp: _Campaign, camp2: _Campaign | None, modality: str,
               cfg: RunConfig) -> tuple[ErrorReport, dict, dict | None]:
    stream = _stream_or_raise(camp, modality)
    train_s, test_s = split_dataset(list(stream.samples),
                                    SplitSpec(shuffle_seed=cfg.seed))
    radio_map = build_map(_train_substream(stream, train_s), cfg.grid)
    test_sorted = sorted(test_s, key=lambda s: s.t_ref)
    report = error_report([(s.t_ref, locate(s.features, radio_map, cfg.k))
                           for s in test_sorted], _labels_of(test_sorted))
    extras = {"cells": len(radio_map.cells), "train_samples": len(train_s),
              "test_samples": len(test_s)}
    gen = None
    if camp2 is not None:
        other = _stream_or_raise(camp2, modality)
        transfer = error_report([(s.t_ref, locate(s.features, radio_map, cfg.k))
                                 for s in other.samples], _labels_of(other.samples))
        gen = _generalization_entry(report, transfer)
    return report, extras, gen


def _nn_selection(camp: _Campaign, method: str,
                  ) -> tuple[list[FusionFrame], FrameLayout]:
    if method == "nn:csi-phase":
        if camp.phase_frames is None or camp.phase_layout is None:
            raise InsufficientData("phase-featurized frames were not prepared")
        return camp.phase_frames, camp.phase_layout
    wanted = blocks_for_method(method)
    if method == "nn-fusion":
        wanted = [m for m in wanted if m in camp.result.layout.modalities()]
    return select_blocks(camp.result.frames, camp.result.layout, wanted)


def _nn_report(camp: _Campaign, camp2: _Campaign | None, method: str,
               cfg: RunConfig) -> tuple[ErrorReport, dict, dict | None]:
    frames, layout = _nn_selection(camp, method)
    spec = SplitSpec(shuffle_seed=cfg.seed)
    model_config = MlpConfig.for_input(layout.feature_width + layout.mask_width,
                                       epochs=cfg.epochs, seed=cfg.seed)
    train_f, test_f = split_dataset(frames, spec)
    if camp2 is not None:
        frames_b, _ = _nn_selection(camp2, method)
        result = run_generalization(train_f, test_f, frames_b, model_config)
        report = result.self_report
        history = result.history
        gen = _generalization_entry(result.self_report, result.transfer_report)
    else:
        x_train, y_train = frames_to_arrays(train_f)
        x_test, y_test = frames_to_arrays(test_f)
        model, history = train_arrays(x_train, y_train, x_test, y_test, model_config)
        report = error_report(predict_stream(model, test_f),
                              [(f.t_ref, f.label) for f in test_f])
        gen = None
    extras = {"epochs_run": len(history), "train_frames": len(train_f),
              "test_frames": len(test_f),
              "input_width": model_config.layer_sizes[0]}
    return report, extras, gen


def _summary(report: ErrorReport) -> dict:
    return {
        "count": report.count,
        "mean_m": report.mean,
        "p50_m": report.percentiles["p50"],
        "p95_m": report.percentiles["p95"],
        "p99_m": report.percentiles["p99"],
        "fraction_within_0.3m": report.fraction_within(0.3),
        "fraction_within_1m": report.fraction_within(1.0),
    }


def _generalization_entry(self_report: ErrorReport,
                          transfer_report: ErrorReport) -> dict:
    return {
        "self": _summary(self_report),
        "transfer": _summary(transfer_report),
        "degradation": transfer_report.percentiles["p50"]
        / self_report.percentiles["p50"],
    }


def _run_method(method: str, camp1: _Campaign, camp2: _Campaign | None,
                cfg: RunConfig) -> tuple[ErrorReport, dict, dict | None]:
    if method == "uwb-trilat":
        report, extras = _uwb_trilat_report(camp1)
        gen = None
        if camp2 is not None:
            transfer, _ = _uwb_trilat_report(camp2)
            gen = _generalization_entry(report, transfer)
        return report, extras, gen
    if method == "rssi-trilat":
        cal = calibrate_rssi_offset(_stream_or_raise(camp1, "rssi"),
                                    list(camp1.scenario.wifi_anchors))
        report = _rssi_trilat_report(camp1, cal.beta)
        extras = {"beta_db": cal.beta, "calibration_median_m": cal.error_m}
        gen = None
        if camp2 is not None:
            # same receiver, same calibration: reuse campaign-1 beta
            gen = _generalization_entry(report, _rssi_trilat_report(camp2, cal.beta))
        return report, extras, gen
    if method in ("rssi-fp", "csi-fp"):
        return _fp_report(camp1, camp2, method.split("-", 1)[0], cfg)
    return _nn_report(camp1, camp2, method, cfg)


def cmd_run(cfg: RunConfig) -> int:
    methods = sorted(set(cfg.methods))
    need_phase = "nn:csi-phase" in methods
    camp1 = _prepare_campaign(cfg, 1, need_phase)
    camp2 = _prepare_campaign(cfg, 2, need_phase) if cfg.transfer else None

    outcomes: dict[str, tuple] = {}
    failures: dict[str, str] = {}

    def worker(name: str):
        try:
            outcomes[name] = _run_method(name, camp1, camp2, cfg)
        except Exception as exc:  # recorded, not fatal to other methods
            failures[name] = f"{type(exc).__name__}: {exc}"

    with ThreadPoolExecutor(max_workers=_max_workers(len(methods))) as pool:
        list(pool.map(worker, methods))

    named_reports = [(name, outcomes[name][0]) for name in methods
                     if name in outcomes]
    report_doc = {
        "config": {**cfg.as_dict(), "methods": methods},
        "sim_config": sim_config_to_dict(read_sidecar(cfg.out / "scenario.json")[1]),
        "methods": {},
        "failures": dict(sorted(failures.items())),
    }
    generalization = {}
    for name in methods:
        if name not in outcomes:
            continue
        report, extras, gen = outcomes[name]
        report_doc["methods"][name] = {"summary": _summary(report), **extras}
        if gen is not None:
            generalization[name] = gen
    if cfg.transfer:
        report_doc["generalization"] = generalization

    with open(cfg.out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report_doc, fh, indent=1, sort_keys=False)
        fh.write("\n")
    if named_reports:
        emit_plot(named_reports, cfg.out / "cdf", log_x=cfg.log_x)

    for name in methods:
        if name in outcomes:
            s = _summary(outcomes[name][0])
            line = (f"{name:18s} p50={s['p50_m']:.3f} m  p95={s['p95_m']:.3f} m  "
                    f"p99={s['p99_m']:.3f} m  n={s['count']}")
            if cfg.transfer and name in generalization:
                line += f"  transfer-p50={generalization[name]['transfer']['p50_m']:.3f} m"
            print(line)
        else:
            print(f"{name:18s} FAILED: {failures[name]}")
    if not outcomes:
        raise IndoorFusionError(f"all {len(methods)} methods failed: {failures}")
    return EXIT_OK


def cmd_plot(cfg: RunConfig) -> int:
    series = read_cdf_csv(cfg.out / "cdf.csv")
    write_cdf_svg(series, cfg.out / "cdf.svg", log_x=cfg.log_x)
    print(f"rendered {cfg.out / 'cdf.svg'} ({len(series)} series)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="indoor-fusion",
        description="Simulate, align and localize a multi-sensor indoor run.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser):
        p.add_argument("--out", default=None, help="dataset/artifact directory")
        p.add_argument("--config", default=None,
                       help="flat key=value option file (flags override)")

    p = sub.add_parser("simulate", help="write dataset1/dataset2 + scenario.json")
    common(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--duration", type=float, default=None, help="run length (s)")
    p.add_argument("--noiseless", action="store_true", default=None,
                   help="zero all measurement noise")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("ingest", help="clock-correct, label and frame dataset1")
    common(p)
    p.add_argument("--window", type=float, default=None,
                   help="causal staleness window (s)")
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("calibrate", help="sweep the RSSI receiver gain")
    common(p)
    p.add_argument("--window", type=float, default=None)
    p.set_defaults(handler=cmd_calibrate)

    p = sub.add_parser("run", help="evaluate localization methods")
    common(p)
    p.add_argument("--seed", type=int, default=None,
                   help="split/init seed for learned methods")
    p.add_argument("--methods", default=None,
                   help=f"comma list (default: {','.join(DEFAULT_METHODS)})")
    p.add_argument("--transfer", action="store_true", default=None,
                   help="also score every method on dataset2")
    p.add_argument("--window", type=float, default=None)
    p.add_argument("--grid", type=float, default=None,
                   help="fingerprint cell size (m)")
    p.add_argument("--k", type=int, default=None, help="fingerprint neighbors")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--log-x", dest="log_x", action="store_true", default=None)
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser("plot", help="re-render cdf.svg from cdf.csv")
    common(p)
    p.add_argument("--log-x", dest="log_x", action="store_true", default=None)
    p.set_defaults(handler=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return args.handler(cfg)
    except (ConfigError, InvalidOverride) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MalformedLine, SchemaViolation, NegativeTime,
            json.JSONDecodeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (IndoorFusionError, np.linalg.LinAlgError, FloatingPointError,
            ZeroDivisionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
