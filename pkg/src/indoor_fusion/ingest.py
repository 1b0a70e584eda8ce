"""Offline alignment of a recorded multi-rate stream.

Stages, in pipeline order:

1. clock estimation — each sensor stamps records with its own skewed clock;
   fitting the recorded timestamps against the sensor's expected emission
   grid recovers offset and drift,
2. clock correction — map recorded time back to reference (robot) time,
3. ground-truth labeling — group one sensor's records into emission ticks,
   interpolate the 5 Hz robot pose at each corrected tick (position
   componentwise linear, heading shortest-arc), translate it to the sensor's
   mounting point, and pack the tick's readings into one feature vector,
4. fusion-frame assembly — one stacked feature vector per CSI tick with
   per-block presence masks, zero-filled blocks, and a causal freshness
   window for the non-anchoring modalities.

Per-tick feature layouts (column meaning is fixed and documented here):

- uwb:  one range per anchor id (sorted); missing anchor -> -1.0
- rssi: one dBm reading per anchor id (sorted); missing anchor -> -100.0
- csi:  per anchor id (sorted), S contiguous values; "magnitude" features
  by default, "phase" or "both" on request; missing anchor -> zeros
- imu:  [accel xyz, gyro xyz, mag xyz]
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyGroundTruth,
    InsufficientOverlap,
    LayoutMismatch,
    MalformedLine,
)
from .records import (
    ClockModel,
    LabeledSample,
    Pose,
    Position2D,
    Record,
    SensorOffset,
)
from .simulate import TrajectoryInterpolator

MIN_OVERLAP_S = 10.0
DEFAULT_WINDOW_S = 0.15
RSSI_FLOOR_DB = -100.0
UWB_MISSING_RANGE = -1.0
MODALITY_ORDER = ("csi", "rssi", "uwb", "imu")


def sensor_rate(rates: dict[str, float], sensor: str) -> float:
    """RSSI rides on the CSI radio, so it shares the CSI tick rate."""
    if sensor in rates:
        return rates[sensor]
    if sensor == "rssi" and "csi" in rates:
        return rates["csi"]
    raise KeyError(f"no rate known for sensor {sensor!r}")


def correct_clock(records: list[Record], clock: ClockModel) -> list[Record]:
    """Map recorded timestamps to reference time: t_ref = (t - offset) / (1 + drift).

    Ordering is preserved; records whose corrected time lands before the
    reference epoch are dropped.
    """
    out = []
    for rec in records:
        t_ref = (rec.t - clock.offset) / (1.0 + clock.drift)
        if t_ref >= 0.0:
            out.append(Record(t_ref, rec.sensor, rec.source_id, rec.payload))
    return out


def estimate_clock_offset(sensor_records: list[Record], gt_records: list[Record],
                          rate: float, duration: float | None = None) -> ClockModel:
    """Recover a sensor's clock model from timestamps alone.

    The sensor emits on the grid (k+1)/rate in reference time; recorded
    timestamps are an affine image of that grid.  Tick indices are assigned
    by rounding consecutive gaps, the affine map is fit by least squares,
    and the absolute grid position of the first record follows either from
    stream completeness (when ``duration`` is known and no tick is missing)
    or from rounding the fitted intercept.
    """
    if not sensor_records or not gt_records:
        raise InsufficientOverlap("need both sensor records and ground truth")
    ts = np.asarray(sorted({r.t for r in sensor_records}), dtype=np.float64)
    gt_t = np.asarray(sorted(r.t for r in gt_records), dtype=np.float64)
    overlap = min(ts[-1], gt_t[-1]) - max(ts[0], gt_t[0])
    if overlap < MIN_OVERLAP_S or len(ts) < 4:
        raise InsufficientOverlap(
            f"sensor/ground-truth overlap is {max(overlap, 0.0):.3f} s, "
            f"need >= {MIN_OVERLAP_S:.0f} s")

    steps = np.rint(np.diff(ts) * rate).astype(np.int64)
    if np.any(steps < 1):
        raise MalformedLine("duplicate or non-monotonic sensor ticks after dedup")
    k = np.concatenate([[0], np.cumsum(steps)]).astype(np.float64)
    design = np.stack([k / rate, np.ones_like(k)], axis=1)
    (alpha, beta), *_ = np.linalg.lstsq(design, ts, rcond=None)

    complete = (duration is not None
                and bool(np.all(steps == 1))
                and len(ts) == int(math.floor(duration * rate + 1e-9)))
    if complete:
        k_first = 1
    else:
        k_first = max(int(round(beta * rate / alpha)), 1)

    offset = beta - alpha * k_first / rate
    drift = alpha - 1.0
    if abs(drift) > 1e-4:  # fp slack at the model's validity boundary
        if abs(drift) > 1e-4 + 1e-9:
            raise MalformedLine(f"estimated drift {drift:.3e} exceeds the clock model range")
        drift = math.copysign(1e-4, drift)
    return ClockModel(offset=float(offset), drift=float(drift))


# ---------------------------------------------------------------------------
# Labeling

@dataclass(frozen=True)
class AlignedStream:
    """One sensor's clock-corrected, ground-truth-labeled tick stream.

    ``columns`` documents the feature layout: one entry per feature index
    giving "anchor_id" (repeated S times for CSI) or the IMU channel name.
    ``dropped`` counts input records outside the ground-truth span;
    ``record_count`` counts the ones folded into samples.
    """

    modality: str
    samples: tuple[LabeledSample, ...]
    columns: tuple[str, ...]
    dropped: int = 0
    record_count: int = 0

    def __post_init__(self):
        ts = [s.t_ref for s in self.samples]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("AlignedStream samples must have strictly increasing t_ref")

    def __len__(self) -> int:
        return len(self.samples)

    def times(self) -> np.ndarray:
        return np.asarray([s.t_ref for s in self.samples])

    def labels(self) -> np.ndarray:
        return np.asarray([(s.label.x, s.label.y) for s in self.samples])

    def feature_matrix(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, len(self.columns)))
        return np.stack([s.features for s in self.samples])


def groundtruth_interpolator(gt) -> TrajectoryInterpolator:
    """Accepts ground-truth Records or (t, Pose) pairs."""
    pairs = []
    for item in gt:
        if isinstance(item, Record):
            if item.sensor != "gt":
                continue
            pairs.append((item.t, Pose(item.payload.x, item.payload.y, item.payload.phi)))
        else:
            t, pose = item
            pairs.append((float(t), pose))
    pairs.sort(key=lambda p: p[0])
    if len(pairs) < 2:
        raise EmptyGroundTruth("need >= 2 ground-truth poses to interpolate")
    return TrajectoryInterpolator(pairs)


def _tick_features(modality: str, recs: list[Record], anchor_ids: list[str],
                   subcarriers: int, csi_features: str) -> np.ndarray:
    if modality == "uwb":
        by_anchor = {r.payload.anchor_id: r.payload.range_m for r in recs}
        return np.asarray([by_anchor.get(a, UWB_MISSING_RANGE) for a in anchor_ids])
    if modality == "rssi":
        by_anchor = {r.payload.anchor_id: r.payload.rssi_db for r in recs}
        return np.asarray([by_anchor.get(a, RSSI_FLOOR_DB) for a in anchor_ids])
    if modality == "csi":
        by_anchor = {r.payload.anchor_id: r.payload for r in recs}
        parts = []
        for a in anchor_ids:
            p = by_anchor.get(a)
            if p is None:
                width = subcarriers * (2 if csi_features == "both" else 1)
                parts.append(np.zeros(width))
            elif csi_features == "magnitude":
                parts.append(p.magnitudes)
            elif csi_features == "phase":
                parts.append(p.phases)
            else:
                parts.append(np.concatenate([p.magnitudes, p.phases]))
        return np.concatenate(parts)
    if modality == "imu":
        p = recs[-1].payload
        return np.concatenate([p.accel, p.gyro, p.mag])
    raise ValueError(f"cannot featurize modality {modality!r}")


def _columns(modality: str, anchor_ids: list[str], subcarriers: int,
             csi_features: str) -> tuple[str, ...]:
    if modality in ("uwb", "rssi"):
        return tuple(anchor_ids)
    if modality == "csi":
        per = 2 * subcarriers if csi_features == "both" else subcarriers
        return tuple(a for a in anchor_ids for _ in range(per))
    return ("accel_x", "accel_y", "accel_z", "gyro_x", "gyro_y", "gyro_z",
            "mag_x", "mag_y", "mag_z")


def label_with_groundtruth(records: list[Record], gt, sensor_offset: SensorOffset,
                           csi_features: str = "magnitude") -> AlignedStream:
    """Label one sensor's clock-corrected records against ground truth.

    Records are grouped by exact emission tick; each tick becomes one
    LabeledSample whose label is the interpolated pose translated to the
    sensor's mounting point.  Records outside the ground-truth span are
    dropped and counted.
    """
    if csi_features not in ("magnitude", "phase", "both"):
        raise ValueError(f"csi_features must be magnitude/phase/both, got {csi_features!r}")
    interp = groundtruth_interpolator(gt)
    t0, t1 = interp.t[0], interp.t[-1]

    non_gt = [r for r in records if r.sensor != "gt"]
    modalities = {r.sensor for r in non_gt}
    if len(modalities) > 1:
        raise ValueError(f"records mix modalities {sorted(modalities)}; label one at a time")
    modality = modalities.pop() if modalities else "uwb"

    ticks: dict[float, list[Record]] = {}
    dropped = 0
    kept = 0
    for rec in non_gt:
        if rec.t < t0 or rec.t > t1:
            dropped += 1
            continue
        ticks.setdefault(rec.t, []).append(rec)
        kept += 1

    anchor_ids = sorted({r.payload.anchor_id for recs in ticks.values() for r in recs
                         if hasattr(r.payload, "anchor_id")})
    subcarriers = 0
    for recs in ticks.values():
        for r in recs:
            if r.sensor == "csi":
                subcarriers = len(r.payload.magnitudes)
                break
        if subcarriers:
            break

    times = np.asarray(sorted(ticks))
    samples = []
    if len(times):
        pos = interp.sensor_position_at(times, sensor_offset)
        for i, t in enumerate(times):
            features = _tick_features(modality, ticks[float(t)], anchor_ids,
                                      subcarriers, csi_features)
            samples.append(LabeledSample(float(t), features,
                                         Position2D(float(pos[i, 0]), float(pos[i, 1])),
                                         modality))
    return AlignedStream(modality, tuple(samples),
                         _columns(modality, anchor_ids, subcarriers, csi_features),
                         dropped=dropped, record_count=kept)


def align_all(records: list[Record], sensor_offsets: dict[str, SensorOffset],
              csi_features: str = "magnitude") -> dict[str, AlignedStream]:
    """Label every non-gt modality present in a corrected record stream."""
    gt = [r for r in records if r.sensor == "gt"]
    streams = {}
    for modality in sorted({r.sensor for r in records} - {"gt"}):
        streams[modality] = label_with_groundtruth(
            [r for r in records if r.sensor == modality], gt,
            sensor_offsets.get(modality, SensorOffset()), csi_features)
    return streams


# ---------------------------------------------------------------------------
# Fusion frames

@dataclass(frozen=True)
class BlockDef:
    """One modality's slot inside a frame."""

    modality: str
    width: int
    columns: tuple[str, ...]


@dataclass(frozen=True)
class FrameLayout:
    """Block order, widths and column meaning of assembled frames."""

    blocks: tuple[BlockDef, ...]

    @property
    def feature_width(self) -> int:
        return sum(b.width for b in self.blocks)

    @property
    def mask_width(self) -> int:
        return len(self.blocks)

    def modalities(self) -> tuple[str, ...]:
        return tuple(b.modality for b in self.blocks)

    def block(self, modality: str) -> BlockDef:
        for b in self.blocks:
            if b.modality == modality:
                return b
        raise LayoutMismatch(f"no {modality!r} block; layout has {self.modalities()}")

    def feature_slice(self, modality: str) -> slice:
        start = 0
        for b in self.blocks:
            if b.modality == modality:
                return slice(start, start + b.width)
            start += b.width
        raise LayoutMismatch(f"no {modality!r} block; layout has {self.modalities()}")

    def mask_index(self, modality: str) -> int:
        for i, b in enumerate(self.blocks):
            if b.modality == modality:
                return i
        raise LayoutMismatch(f"no {modality!r} block; layout has {self.modalities()}")


def frame_layout(streams: list[AlignedStream]) -> FrameLayout:
    """Canonical layout over the provided streams: csi | rssi | uwb | imu."""
    by_modality = {s.modality: s for s in streams}
    if len(by_modality) != len(streams):
        raise LayoutMismatch("duplicate modality among streams")
    blocks = [BlockDef(m, len(by_modality[m].columns), by_modality[m].columns)
              for m in MODALITY_ORDER if m in by_modality]
    return FrameLayout(tuple(blocks))


@dataclass(frozen=True)
class FusionFrame:
    """One aligned multi-modality snapshot on the anchoring tick grid."""

    t_ref: float
    features: np.ndarray
    mask: np.ndarray
    label: Position2D

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float64))
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=np.float64))
        self.features.setflags(write=False)
        self.mask.setflags(write=False)


def build_fusion_frames(streams: list[AlignedStream],
                        window: float = DEFAULT_WINDOW_S,
                        anchor_modality: str = "csi") -> list[FusionFrame]:
    """Assemble stacked frames anchored on one modality's ticks.

    Every anchor-stream sample yields a frame labeled with that sample's
    position.  Each other block holds its stream's newest sample from the
    causal window [t - window, t]; a stale or absent block is zero-filled
    with its mask bit cleared.
    """
    if window <= 0.0:
        raise ValueError(f"window must be > 0, got {window}")
    layout = frame_layout(streams)
    by_modality = {s.modality: s for s in streams}
    anchor = by_modality.get(anchor_modality)
    if anchor is None or not anchor.samples:
        return []

    times = {m: s.times() for m, s in by_modality.items()}
    frames = []
    for sample in anchor.samples:
        t = sample.t_ref
        features = np.zeros(layout.feature_width)
        mask = np.zeros(layout.mask_width)
        for block in layout.blocks:
            stream = by_modality[block.modality]
            if block.modality == anchor_modality:
                chosen = sample
            else:
                i = int(np.searchsorted(times[block.modality], t, side="right")) - 1
                if i < 0 or t - stream.samples[i].t_ref > window:
                    continue
                chosen = stream.samples[i]
            features[layout.feature_slice(block.modality)] = chosen.features
            mask[layout.mask_index(block.modality)] = 1.0
        frames.append(FusionFrame(t, features, mask, sample.label))
    return frames


def select_blocks(frames: list[FusionFrame], layout: FrameLayout,
                  modalities: list[str]) -> tuple[list[FusionFrame], FrameLayout]:
    """Restrict frames to a subset of blocks (layout order preserved)."""
    for m in modalities:
        layout.block(m)  # raises LayoutMismatch on unknown names
    keep = [b for b in layout.blocks if b.modality in modalities]
    sub_layout = FrameLayout(tuple(keep))
    fslices = [layout.feature_slice(b.modality) for b in keep]
    midx = [layout.mask_index(b.modality) for b in keep]
    out = []
    for fr in frames:
        feats = np.concatenate([fr.features[s] for s in fslices]) if fslices \
            else np.zeros(0)
        mask = fr.mask[midx]
        out.append(FusionFrame(fr.t_ref, feats, mask, fr.label))
    return out, sub_layout


def frames_to_arrays(frames: list[FusionFrame],
                     include_mask: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Stack frames into (X, y); mask bits are appended as extra features."""
    if not frames:
        raise ValueError("no frames to stack")
    if include_mask:
        x = np.stack([np.concatenate([f.features, f.mask]) for f in frames])
    else:
        x = np.stack([f.features for f in frames])
    y = np.asarray([(f.label.x, f.label.y) for f in frames], dtype=np.float64)
    return x, y


def write_frames(path, frames: list[FusionFrame]) -> int:
    """Persist frames as JSONL: {"t", "features", "mask", "label"}."""
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for fr in frames:
            fh.write(json.dumps({"t": fr.t_ref,
                                 "features": fr.features.tolist(),
                                 "mask": fr.mask.tolist(),
                                 "label": [fr.label.x, fr.label.y]}))
            fh.write("\n")
            n += 1
    return n


def read_frames(path) -> list[FusionFrame]:
    frames = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                frames.append(FusionFrame(doc["t"], np.asarray(doc["features"]),
                                          np.asarray(doc["mask"]),
                                          Position2D(float(doc["label"][0]),
                                                     float(doc["label"][1]))))
            except (KeyError, TypeError, ValueError, IndexError) as exc:
                raise MalformedLine(f"{path}:{lineno}: {exc}") from exc
    return frames


# ---------------------------------------------------------------------------
# Whole-run convenience

@dataclass(frozen=True)
class IngestResult:
    """Everything downstream stages need from one recorded run."""

    corrected: list[Record]
    gt_records: list[Record]
    streams: dict[str, AlignedStream]
    frames: list[FusionFrame]
    layout: FrameLayout
    clock_estimates: dict[str, ClockModel]
    dropped: int


def ingest_run(records: list[Record], sensor_offsets: dict[str, SensorOffset],
               rates: dict[str, float], duration: float | None,
               window: float = DEFAULT_WINDOW_S,
               csi_features: str = "magnitude") -> IngestResult:
    """Run the full alignment pipeline on one recorded stream."""
    gt = [r for r in records if r.sensor == "gt"]
    if len(gt) < 2:
        raise EmptyGroundTruth("stream carries no usable ground-truth records")

    corrected: list[Record] = list(gt)
    estimates: dict[str, ClockModel] = {}
    for sensor in sorted({r.sensor for r in records} - {"gt"}):
        stream = [r for r in records if r.sensor == sensor]
        clock = estimate_clock_offset(stream, gt, sensor_rate(rates, sensor), duration)
        estimates[sensor] = clock
        corrected.extend(correct_clock(stream, clock))
    corrected.sort(key=lambda r: (r.t, r.sensor, r.source_id))

    streams = align_all(corrected, sensor_offsets, csi_features)
    frames = build_fusion_frames(list(streams.values()), window=window)
    layout = frame_layout(list(streams.values()))
    dropped = sum(s.dropped for s in streams.values())
    return IngestResult(corrected, gt, streams, frames, layout, estimates, dropped)
