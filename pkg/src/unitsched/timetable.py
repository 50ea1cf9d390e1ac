"""Timetable and fleet ingestion: parse, validate, normalize.

Input files:

* ``timetable.csv`` -- one row per scheduled trip, header exactly
  ``Trip,Departure station,Arrival station,Departure time,Arrival time,
  Passenger demand,Direction``.  Times are integer minutes from midnight,
  ``HH:MM`` or ``HH:MM:SS``; they are normalized to minutes on ingest and
  written back as minutes.
* ``fleet.cfg`` -- a JSON document describing unit types, coupling families,
  station rules, permitted empty-running moves and objective weights.

Everything produced here is immutable after construction and safe to share.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

TIMETABLE_HEADER = [
    "Trip",
    "Departure station",
    "Arrival station",
    "Departure time",
    "Arrival time",
    "Passenger demand",
    "Direction",
]

DEFAULT_MIN_TURNAROUND = 10
DEFAULT_COUPLE_TIME = 5
DEFAULT_DECOUPLE_TIME = 5


class TimetableError(ValueError):
    """Malformed timetable or fleet configuration input."""


def parse_time(text: str) -> int:
    """Parse a time field into minutes from midnight.

    Accepts plain integer minutes ("345"), ``H:MM``/``HH:MM`` ("5:45") and
    ``HH:MM:SS`` ("04:22:00").  Seconds must be zero: the schedule operates
    on a one-minute grid.
    """
    s = text.strip()
    if ":" not in s:
        if not s.lstrip("-").isdigit():
            raise TimetableError(f"unreadable time value {text!r}")
        value = int(s)
        if value < 0:
            raise TimetableError(f"negative time value {text!r}")
        return value
    parts = s.split(":")
    if len(parts) not in (2, 3) or not all(p.isdigit() for p in parts):
        raise TimetableError(f"unreadable time value {text!r}")
    hours, minutes = int(parts[0]), int(parts[1])
    seconds = int(parts[2]) if len(parts) == 3 else 0
    if minutes >= 60 or seconds >= 60:
        raise TimetableError(f"unreadable time value {text!r}")
    if seconds != 0:
        raise TimetableError(f"sub-minute time not supported: {text!r}")
    return hours * 60 + minutes


@dataclass(frozen=True)
class Trip:
    """One timetabled service."""

    id: str
    dep_station: str
    arr_station: str
    dep_time: int
    arr_time: int
    demand: int
    direction: int  # +1 or -1, travel direction of the service

    @property
    def duration(self) -> int:
        return self.arr_time - self.dep_time


@dataclass(frozen=True)
class Timetable:
    trips: tuple[Trip, ...]

    def __post_init__(self):
        object.__setattr__(self, "_by_id", {t.id: t for t in self.trips})

    def __iter__(self):
        return iter(self.trips)

    def __len__(self) -> int:
        return len(self.trips)

    def trip(self, trip_id: str) -> Trip:
        return self._by_id[trip_id]

    def __contains__(self, trip_id: str) -> bool:
        return trip_id in self._by_id

    @property
    def stations(self) -> frozenset[str]:
        return frozenset(s for t in self.trips for s in (t.dep_station, t.arr_station))

    def chronological(self) -> tuple[Trip, ...]:
        return tuple(sorted(self.trips, key=lambda t: (t.dep_time, t.id)))


def parse_timetable(path: str | Path) -> Timetable:
    """Read a timetable CSV into the canonical model.

    Raises :class:`TimetableError` with the offending row number for
    malformed rows, bad time formats, unknown direction values, nonpositive
    durations and duplicate trip ids.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        return Timetable(trips=())
    if [h.strip() for h in rows[0]] != TIMETABLE_HEADER:
        raise TimetableError(
            f"{path.name}: header must be {','.join(TIMETABLE_HEADER)!r}, got {rows[0]!r}"
        )
    trips: list[Trip] = []
    seen: set[str] = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(TIMETABLE_HEADER):
            raise TimetableError(f"{path.name}:{lineno}: expected 7 columns, got {len(row)}")
        try:
            trip_id = row[0].strip()
            dep_st, arr_st = row[1].strip(), row[2].strip()
            dep, arr = parse_time(row[3]), parse_time(row[4])
            demand = int(row[5])
            direction = int(row[6])
        except TimetableError as exc:
            raise TimetableError(f"{path.name}:{lineno}: {exc}") from None
        except ValueError:
            raise TimetableError(f"{path.name}:{lineno}: malformed row {row!r}") from None
        if not trip_id:
            raise TimetableError(f"{path.name}:{lineno}: empty trip id")
        if trip_id in seen:
            raise TimetableError(f"{path.name}:{lineno}: duplicate trip id {trip_id!r}")
        if direction not in (1, -1):
            raise TimetableError(
                f"{path.name}:{lineno}: direction must be 1 or -1, got {row[6]!r}"
            )
        if arr <= dep:
            raise TimetableError(
                f"{path.name}:{lineno}: trip {trip_id!r} has nonpositive duration"
            )
        if demand < 0:
            raise TimetableError(f"{path.name}:{lineno}: negative demand on {trip_id!r}")
        seen.add(trip_id)
        trips.append(Trip(trip_id, dep_st, arr_st, dep, arr, demand, direction))
    return Timetable(trips=tuple(trips))


def serialize_timetable(tt: Timetable) -> str:
    """Canonical CSV text: times as integer minutes, directions as 1/-1."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TIMETABLE_HEADER)
    for t in tt.trips:
        writer.writerow(
            [t.id, t.dep_station, t.arr_station, t.dep_time, t.arr_time, t.demand, t.direction]
        )
    return buf.getvalue()


@dataclass(frozen=True)
class UnitType:
    id: str
    capacity: int
    fleet_size: int
    num_cars: int = 1
    length: int = 0  # meters, whole unit


@dataclass(frozen=True)
class Unit:
    """One physical train unit.  uids are global and contiguous per type."""

    uid: int
    type_id: str


@dataclass(frozen=True)
class StationRules:
    station: str
    min_turnaround: int = DEFAULT_MIN_TURNAROUND
    couple_time: int = DEFAULT_COUPLE_TIME
    decouple_time: int = DEFAULT_DECOUPLE_TIME
    coupling_banned_arrival: bool = False
    coupling_banned_departure: bool = False
    platform_length: Optional[int] = None  # None: unconstrained


@dataclass(frozen=True)
class FamilyRule:
    """A set of coupling-compatible unit types with formation caps."""

    name: str
    types: frozenset[str]
    max_units: int
    max_cars: int


@dataclass(frozen=True)
class FleetConfig:
    unit_types: tuple[UnitType, ...]
    families: tuple[FamilyRule, ...]
    station_rules: Mapping[str, StationRules]
    empty_runs: Mapping[tuple[str, str], int]
    weights: Mapping[str, float]
    default_min_turnaround: int = DEFAULT_MIN_TURNAROUND
    trip_types: Mapping[str, frozenset[str]] = field(default_factory=dict)
    shunt_allowed: frozenset[tuple[str, str]] = frozenset()

    def __post_init__(self):
        units: list[Unit] = []
        for ut in self.unit_types:
            base = len(units)
            for k in range(ut.fleet_size):
                units.append(Unit(base + k, ut.id))
        object.__setattr__(self, "_units", tuple(units))
        object.__setattr__(self, "_types_by_id", {t.id: t for t in self.unit_types})

    @property
    def units(self) -> tuple[Unit, ...]:
        return self._units

    def unit_type(self, type_id: str) -> UnitType:
        return self._types_by_id[type_id]

    def type_of(self, uid: int) -> UnitType:
        return self._types_by_id[self._units[uid].type_id]

    @property
    def total_fleet(self) -> int:
        return len(self._units)

    def min_turnaround(self, station: str) -> int:
        rules = self.station_rules.get(station)
        return rules.min_turnaround if rules is not None else self.default_min_turnaround

    def couple_time(self, station: str) -> int:
        rules = self.station_rules.get(station)
        return rules.couple_time if rules is not None else DEFAULT_COUPLE_TIME

    def decouple_time(self, station: str) -> int:
        rules = self.station_rules.get(station)
        return rules.decouple_time if rules is not None else DEFAULT_DECOUPLE_TIME

    def platform_length(self, station: str) -> Optional[int]:
        rules = self.station_rules.get(station)
        return rules.platform_length if rules is not None else None

    def allowed_types(self, trip_id: str) -> frozenset[str]:
        restricted = self.trip_types.get(trip_id)
        if restricted is not None:
            return restricted
        return frozenset(t.id for t in self.unit_types)

    def families_containing(self, type_id: str) -> tuple[FamilyRule, ...]:
        return tuple(f for f in self.families if type_id in f.types)

    def share_family(self, type_a: str, type_b: str) -> bool:
        return any(type_a in f.types and type_b in f.types for f in self.families)


def parse_fleet_config(path: str | Path) -> FleetConfig:
    """Read a fleet.cfg JSON document."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise TimetableError(f"{path.name}: not valid JSON: {exc}") from None

    types = []
    for entry in raw.get("unit_types", []):
        types.append(
            UnitType(
                id=str(entry["id"]),
                capacity=int(entry["capacity"]),
                fleet_size=int(entry["fleet_size"]),
                num_cars=int(entry.get("num_cars", 1)),
                length=int(entry.get("length", 0)),
            )
        )
    if len({t.id for t in types}) != len(types):
        raise TimetableError(f"{path.name}: duplicate unit type ids")

    families = []
    for entry in raw.get("families", []):
        families.append(
            FamilyRule(
                name=str(entry.get("name", f"f{len(families)}")),
                types=frozenset(str(t) for t in entry["types"]),
                max_units=int(entry["max_units"]),
                max_cars=int(entry.get("max_cars", 10**6)),
            )
        )

    stations = {}
    for name, entry in raw.get("stations", {}).items():
        stations[name] = StationRules(
            station=name,
            min_turnaround=int(entry.get("min_turnaround", raw.get("default_min_turnaround", DEFAULT_MIN_TURNAROUND))),
            couple_time=int(entry.get("couple_time", DEFAULT_COUPLE_TIME)),
            decouple_time=int(entry.get("decouple_time", DEFAULT_DECOUPLE_TIME)),
            coupling_banned_arrival=bool(entry.get("coupling_banned_arrival", False)),
            coupling_banned_departure=bool(entry.get("coupling_banned_departure", False)),
            platform_length=(int(entry["platform_length"]) if entry.get("platform_length") is not None else None),
        )

    empty_runs = {}
    for entry in raw.get("empty_runs", []):
        key = (str(entry["from"]), str(entry["to"]))
        minutes = int(entry["minutes"])
        if minutes < 0:
            raise TimetableError(f"{path.name}: negative empty-run time for {key}")
        empty_runs[key] = minutes

    trip_types = {
        str(trip): frozenset(str(t) for t in allowed)
        for trip, allowed in raw.get("trip_types", {}).items()
    }
    shunt = frozenset((str(a), str(b)) for a, b in raw.get("shunt_allowed", []))

    weights = {k: float(v) for k, v in raw.get("weights", {}).items()}

    return FleetConfig(
        unit_types=tuple(types),
        families=tuple(families),
        station_rules=stations,
        empty_runs=empty_runs,
        weights=weights,
        default_min_turnaround=int(raw.get("default_min_turnaround", DEFAULT_MIN_TURNAROUND)),
        trip_types=trip_types,
        shunt_allowed=shunt,
    )


@dataclass(frozen=True)
class Finding:
    code: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple[Finding, ...]

    @property
    def ok(self) -> bool:
        return not self.findings

    def codes(self) -> set[str]:
        return {f.code for f in self.findings}

    def __iter__(self):
        return iter(self.findings)


def validate_instance(tt: Timetable, fleet: FleetConfig) -> ValidationReport:
    """Collect admissibility findings.  An empty report means the instance
    can be handed to the graph builder."""
    findings: list[Finding] = []
    stations = tt.stations | set(fleet.station_rules)

    for t in tt.trips:
        if t.arr_time <= t.dep_time:
            findings.append(Finding("nonpositive-duration", f"trip {t.id}: arrival not after departure"))
        if t.direction not in (1, -1):
            findings.append(Finding("bad-direction", f"trip {t.id}: direction {t.direction}"))
        if t.demand < 0:
            findings.append(Finding("negative-demand", f"trip {t.id}: demand {t.demand}"))

    total_capacity = sum(u.capacity * u.fleet_size for u in fleet.unit_types)
    for t in tt.trips:
        allowed = fleet.allowed_types(t.id)
        cap = sum(u.capacity * u.fleet_size for u in fleet.unit_types if u.id in allowed)
        if t.demand > cap:
            findings.append(
                Finding(
                    "uncoverable-demand",
                    f"trip {t.id}: demand {t.demand} exceeds total usable fleet capacity {cap}",
                )
            )
        if not allowed:
            findings.append(Finding("no-usable-type", f"trip {t.id}: no unit type may serve it"))

    for (src, dst), minutes in fleet.empty_runs.items():
        if src not in stations or dst not in stations:
            findings.append(Finding("unknown-station", f"empty run {src}->{dst}: unknown station"))
        if src == dst:
            findings.append(Finding("self-empty-run", f"empty run {src}->{src} is redundant"))
        if minutes < 0:
            findings.append(Finding("negative-empty-run", f"empty run {src}->{dst}: {minutes}"))

    known_types = {u.id for u in fleet.unit_types}
    for fam in fleet.families:
        unknown = fam.types - known_types
        if unknown:
            findings.append(Finding("unknown-type", f"family {fam.name}: unknown types {sorted(unknown)}"))
        if fam.max_units < 1:
            findings.append(Finding("bad-family-cap", f"family {fam.name}: max_units {fam.max_units}"))
    if fleet.families:
        orphans = known_types - {t for fam in fleet.families for t in fam.types}
        if orphans:
            findings.append(
                Finding("type-without-family", f"types in no family: {sorted(orphans)}")
            )

    for ut in fleet.unit_types:
        if ut.fleet_size < 0:
            findings.append(Finding("bad-fleet-size", f"type {ut.id}: fleet_size {ut.fleet_size}"))
        if ut.capacity <= 0:
            findings.append(Finding("bad-capacity", f"type {ut.id}: capacity {ut.capacity}"))

    if total_capacity == 0 and any(t.demand > 0 for t in tt.trips):
        findings.append(Finding("empty-fleet", "no usable units configured"))

    return ValidationReport(findings=tuple(findings))
