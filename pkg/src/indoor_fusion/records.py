"""Domain types and the JSON-Lines wire schema.

Every stream in the toolkit is a sequence of timestamped sensor records,
one JSON object per line, UTF-8, LF terminated::

    {"t": <sec>, "sensor": <kind>, "id": <source id>, "payload": ...}

Payload layout per sensor kind:

* ``uwb``  -- ``{"anchor_id": str, "range_m": f, "power_db": f}``
* ``rssi`` -- ``{"anchor_id": str, "rssi_db": f}``
* ``csi``  -- ``{"anchor_id": str, "magnitudes": [f]*S, "phases": [f]*S}``
* ``imu``  -- flat array of 9 floats in accel(3), gyro(3), mag(3) order
* ``gt``   -- ``{"x": f, "y": f, "phi": f}``

Floats are rendered in scientific notation with 17 significant digits, so
``parse_record(serialize_record(r)) == r`` holds bit-exactly.  Units are
meters, seconds, radians and dBm throughout; ``t`` is the sender's clock.

All types here are immutable values and safe to share between threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import MalformedLine, NegativeTime, SchemaViolation

SENSOR_KINDS = ("uwb", "rssi", "csi", "imu", "gt")

_F = "%.16e"  # 17 significant digits: exact float64 round-trip

TWO_PI = 2.0 * math.pi


def normalize_angle(phi: float) -> float:
    """Wrap an angle to [-pi, pi). Idempotent."""
    return (phi + math.pi) % TWO_PI - math.pi


def angle_difference(a: float, b: float) -> float:
    """Shortest signed arc from ``b`` to ``a``, in [-pi, pi)."""
    return normalize_angle(a - b)


def interpolate_heading(phi0: float, phi1: float, w: float) -> float:
    """Interpolate a heading along the shortest arc (w=0 -> phi0, w=1 -> phi1)."""
    return normalize_angle(phi0 + w * angle_difference(phi1, phi0))


def _require_finite(name: str, *values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"{name} must be finite, got {v!r}")


@dataclass(frozen=True)
class Position2D:
    """A point in the global frame, meters."""

    x: float
    y: float

    def __post_init__(self):
        _require_finite("Position2D", self.x, self.y)

    def distance_to(self, other: "Position2D") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class Pose:
    """2D position plus heading (counter-clockwise from +x, wrapped to [-pi, pi))."""

    x: float
    y: float
    phi: float

    def __post_init__(self):
        _require_finite("Pose", self.x, self.y, self.phi)
        object.__setattr__(self, "phi", normalize_angle(self.phi))

    @property
    def position(self) -> Position2D:
        return Position2D(self.x, self.y)


@dataclass(frozen=True)
class Anchor:
    """A fixed radio node. ``kind`` is "uwb" or "wifi"."""

    id: str
    kind: str
    position: Position2D

    def __post_init__(self):
        if self.kind not in ("uwb", "wifi"):
            raise ValueError(f"anchor kind must be 'uwb' or 'wifi', got {self.kind!r}")


@dataclass(frozen=True)
class SensorOffset:
    """Mounting offset of a sensor in the robot frame.

    ``x_off``/``y_off`` are the measured sensor coordinates relative to the
    robot center; ``phi_off`` is an additional measured offset angle applied
    on top of the bearing implied by the coordinates.
    """

    x_off: float = 0.0
    y_off: float = 0.0
    phi_off: float = 0.0

    def __post_init__(self):
        _require_finite("SensorOffset", self.x_off, self.y_off, self.phi_off)


@dataclass(frozen=True)
class ClockModel:
    """Affine sender-clock model: t_recorded = t_true * (1 + drift) + offset."""

    offset: float = 0.0
    drift: float = 0.0

    def __post_init__(self):
        _require_finite("ClockModel", self.offset, self.drift)
        if abs(self.drift) > 1e-4:
            raise ValueError(f"|drift| must be <= 1e-4, got {self.drift}")


@dataclass(frozen=True)
class UwbPayload:
    anchor_id: str
    range_m: float
    power_db: float


@dataclass(frozen=True)
class RssiPayload:
    anchor_id: str
    rssi_db: float


@dataclass(frozen=True, eq=False)
class CsiPayload:
    """Per-subcarrier channel magnitudes and phases for one WiFi anchor."""

    anchor_id: str
    magnitudes: np.ndarray
    phases: np.ndarray

    def __post_init__(self):
        for name in ("magnitudes", "phases"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.magnitudes.shape != self.phases.shape or self.magnitudes.ndim != 1:
            raise ValueError("CSI magnitudes and phases must be 1D and equally long")
        if self.magnitudes.size == 0:
            raise ValueError("CSI payload must have at least one subcarrier")

    def __eq__(self, other):
        return (
            isinstance(other, CsiPayload)
            and self.anchor_id == other.anchor_id
            and np.array_equal(self.magnitudes, other.magnitudes)
            and np.array_equal(self.phases, other.phases)
        )


@dataclass(frozen=True)
class ImuPayload:
    """9-DoF inertial reading: accelerometer, gyroscope, magnetometer."""

    accel: tuple[float, float, float]
    gyro: tuple[float, float, float]
    mag: tuple[float, float, float]

    def __post_init__(self):
        for name in ("accel", "gyro", "mag"):
            vec = tuple(float(v) for v in getattr(self, name))
            if len(vec) != 3:
                raise ValueError(f"imu {name} must have 3 components")
            object.__setattr__(self, name, vec)


@dataclass(frozen=True)
class GtPayload:
    x: float
    y: float
    phi: float


_PAYLOAD_TYPES = {
    "uwb": UwbPayload,
    "rssi": RssiPayload,
    "csi": CsiPayload,
    "imu": ImuPayload,
    "gt": GtPayload,
}

Payload = UwbPayload | RssiPayload | CsiPayload | ImuPayload | GtPayload


@dataclass(frozen=True, eq=False)
class Record:
    """One timestamped sensor reading on the wire."""

    t: float
    sensor: str
    source_id: str
    payload: Payload

    def __post_init__(self):
        object.__setattr__(self, "t", float(self.t))
        if not math.isfinite(self.t) or self.t < 0.0:
            raise ValueError(f"record time must be finite and >= 0, got {self.t}")
        expected = _PAYLOAD_TYPES.get(self.sensor)
        if expected is None:
            raise ValueError(f"unknown sensor kind {self.sensor!r}")
        if not isinstance(self.payload, expected):
            raise ValueError(f"payload {type(self.payload).__name__} does not match sensor {self.sensor!r}")

    def __eq__(self, other):
        return (
            isinstance(other, Record)
            and self.t == other.t
            and self.sensor == other.sensor
            and self.source_id == other.source_id
            and self.payload == other.payload
        )


@dataclass(frozen=True)
class LabeledSample:
    """One measurement vector tied to a reference-clock time and a true position."""

    t_ref: float
    features: np.ndarray
    label: Position2D
    modality: str
    source_id: str = ""

    def __post_init__(self):
        arr = np.asarray(self.features, dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(self, "features", arr)
        if arr.size == 0 or not np.isfinite(arr).all():
            raise ValueError("features must be non-empty and finite")


def _fmt_vec(values) -> str:
    return "[" + ",".join(_F % v for v in values) + "]"


def serialize_record(record: Record) -> str:
    """Render a record as one JSON line (no trailing newline).

    Key order is fixed (t, sensor, id, payload) and floats carry 17
    significant digits so the line re-parses to a bit-identical record.
    """
    p = record.payload
    if record.sensor == "uwb":
        body = '{"anchor_id":%s,"range_m":%s,"power_db":%s}' % (
            json.dumps(p.anchor_id), _F % p.range_m, _F % p.power_db)
    elif record.sensor == "rssi":
        body = '{"anchor_id":%s,"rssi_db":%s}' % (json.dumps(p.anchor_id), _F % p.rssi_db)
    elif record.sensor == "csi":
        body = '{"anchor_id":%s,"magnitudes":%s,"phases":%s}' % (
            json.dumps(p.anchor_id), _fmt_vec(p.magnitudes), _fmt_vec(p.phases))
    elif record.sensor == "imu":
        body = _fmt_vec(p.accel + p.gyro + p.mag)
    else:  # gt
        body = '{"x":%s,"y":%s,"phi":%s}' % (_F % p.x, _F % p.y, _F % p.phi)
    return '{"t":%s,"sensor":"%s","id":%s,"payload":%s}' % (
        _F % record.t, record.sensor, json.dumps(record.source_id), body)


def _as_float(obj, ctx: str) -> float:
    if isinstance(obj, bool) or not isinstance(obj, (int, float)):
        raise SchemaViolation(f"{ctx}: expected a number, got {type(obj).__name__}")
    v = float(obj)
    if not math.isfinite(v):
        raise SchemaViolation(f"{ctx}: non-finite value")
    return v


def _as_float_list(obj, ctx: str) -> list[float]:
    if not isinstance(obj, list):
        raise SchemaViolation(f"{ctx}: expected an array")
    return [_as_float(v, ctx) for v in obj]


def _check_keys(obj: dict, required: tuple[str, ...], ctx: str) -> None:
    keys = set(obj.keys())
    missing = set(required) - keys
    extra = keys - set(required)
    if missing:
        raise SchemaViolation(f"{ctx}: missing keys {sorted(missing)}")
    if extra:
        raise SchemaViolation(f"{ctx}: unknown keys {sorted(extra)}")


def parse_record(line: str, subcarriers: int | None = None) -> Record:
    """Parse one JSON line into a Record, rejecting anything off-schema.

    ``subcarriers`` pins the expected CSI payload arity when the scenario
    is known; when None, magnitudes and phases only need matching lengths.

    Raises MalformedLine, SchemaViolation or NegativeTime.
    """
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedLine(f"invalid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise SchemaViolation("record line must be a JSON object")
    _check_keys(obj, ("t", "sensor", "id", "payload"), "record")

    t = _as_float(obj["t"], "t")
    if t < 0.0:
        raise NegativeTime(f"record time {t} < 0")
    sensor = obj["sensor"]
    if sensor not in SENSOR_KINDS:
        raise SchemaViolation(f"unknown sensor kind {sensor!r}")
    source_id = obj["id"]
    if not isinstance(source_id, str):
        raise SchemaViolation("id must be a string")

    raw = obj["payload"]
    if sensor == "imu":
        values = _as_float_list(raw, "imu payload")
        if len(values) != 9:
            raise SchemaViolation(f"imu payload must have 9 floats, got {len(values)}")
        payload: Payload = ImuPayload(tuple(values[0:3]), tuple(values[3:6]), tuple(values[6:9]))
    else:
        if not isinstance(raw, dict):
            raise SchemaViolation(f"{sensor} payload must be an object")
        if sensor == "uwb":
            _check_keys(raw, ("anchor_id", "range_m", "power_db"), "uwb payload")
            payload = UwbPayload(_as_str(raw["anchor_id"]), _as_float(raw["range_m"], "range_m"),
                                 _as_float(raw["power_db"], "power_db"))
        elif sensor == "rssi":
            _check_keys(raw, ("anchor_id", "rssi_db"), "rssi payload")
            payload = RssiPayload(_as_str(raw["anchor_id"]), _as_float(raw["rssi_db"], "rssi_db"))
        elif sensor == "csi":
            _check_keys(raw, ("anchor_id", "magnitudes", "phases"), "csi payload")
            mags = _as_float_list(raw["magnitudes"], "magnitudes")
            phases = _as_float_list(raw["phases"], "phases")
            if len(mags) != len(phases) or not mags:
                raise SchemaViolation("csi magnitudes and phases must be non-empty and equally long")
            if subcarriers is not None and len(mags) != subcarriers:
                raise SchemaViolation(f"csi payload has {len(mags)} subcarriers, expected {subcarriers}")
            payload = CsiPayload(_as_str(raw["anchor_id"]), np.array(mags), np.array(phases))
        else:  # gt
            _check_keys(raw, ("x", "y", "phi"), "gt payload")
            payload = GtPayload(_as_float(raw["x"], "x"), _as_float(raw["y"], "y"),
                                _as_float(raw["phi"], "phi"))
    return Record(t, sensor, source_id, payload)


def _as_str(obj) -> str:
    if not isinstance(obj, str):
        raise SchemaViolation("anchor_id must be a string")
    return obj


def write_records(path, records) -> int:
    """Write records as JSONL (UTF-8, LF). Returns the number of lines."""
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(serialize_record(rec))
            fh.write("\n")
            n += 1
    return n


def read_records(path, subcarriers: int | None = None) -> list[Record]:
    """Read a JSONL record stream; blank lines are rejected, not skipped."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            try:
                out.append(parse_record(line, subcarriers=subcarriers))
            except (MalformedLine, SchemaViolation) as exc:
                raise type(exc)(f"{path}:{i}: {exc}") from exc
    return out
