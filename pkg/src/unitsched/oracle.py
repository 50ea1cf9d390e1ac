"""Independent verifier for decoded unit schedules.

Checks a :class:`UnitSchedule` against platform-operation semantics without
evaluating any integer-program row.  The ordering rules are stated the way a
platform supervisor would:

* a unit that entered the platform moving the way the joint trip departs
  couples to the rear of one that entered against it (it came in "from in
  front" of the other);
* units arriving the same way stack in arrival order: first in stays
  nearest its entry-far end, so it leaves first only when the joint trip
  departs the way they came;
* a split formation lets the unit nearest the departure end out first, so
  opposite onward directions force the continuing-direction unit to the
  front, and same-direction departures must leave in position order;
* a pair that stays coupled keeps its order when the next trip points the
  same way and flips it after a reversal.

Rule identifiers ``T3.rowN`` index the casework table of scenarios (rows
2-5 coupling, 7-8 stay-coupled, 10-13 decoupling) used throughout the
violation wire format.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from .graph import SIGN_ON, SIGN_OFF, SINK, SOURCE, TURNAROUND, SchedulingGraph
from .model import MilpInstance
from .timetable import FleetConfig, Timetable


class OracleError(ValueError):
    """Structurally unusable schedule (unknown trips or units)."""


class DecodeError(ValueError):
    """Solution vector cannot be decoded into unit paths."""


@dataclass(frozen=True)
class UnitSchedule:
    """Decoded solution: per-unit trip paths and per-trip coupling orders."""

    paths: Mapping[int, tuple[str, ...]]  # uid -> trips in service order
    orders: Mapping[tuple[str, int], int]  # (trip, uid) -> theta, 1 = front

    def units_on(self, trip_id: str) -> list[int]:
        return sorted(uid for uid, path in self.paths.items() if trip_id in path)

    def theta(self, trip_id: str, uid: int) -> Optional[int]:
        return self.orders.get((trip_id, uid))

    def used_units(self) -> list[int]:
        return sorted(uid for uid, path in self.paths.items() if path)


@dataclass(frozen=True)
class StationEvent:
    """One platform dwell: the formation between an arrival and departure."""

    station: str
    trip_id: str
    side: str  # "departure" (units gathering for trip) | "arrival" (units dispersing)
    units: tuple[int, ...]
    feeder_trips: tuple[Optional[str], ...]  # per unit; None = depot
    onward_trips: tuple[Optional[str], ...]


@dataclass(frozen=True)
class Violation:
    kind: str  # coupling-order | decoupling-order | propagation | blockage |
    # coverage | capacity | reuse | fleet | ban | time
    rule: str  # T3.rowN or structural.*
    trip: str
    units: tuple[int, ...]
    message: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": self.kind,
                "rule": self.rule,
                "trip": self.trip,
                "units": list(self.units),
                "message": self.message,
            },
            sort_keys=True,
        )


def violations_to_jsonl(violations: Sequence[Violation]) -> str:
    return "".join(v.to_json() + "\n" for v in violations)


def _neighbors(schedule: UnitSchedule):
    pred: dict[tuple[str, int], Optional[str]] = {}
    succ: dict[tuple[str, int], Optional[str]] = {}
    for uid, path in schedule.paths.items():
        for k, trip_id in enumerate(path):
            pred[(trip_id, uid)] = path[k - 1] if k > 0 else None
            succ[(trip_id, uid)] = path[k + 1] if k + 1 < len(path) else None
    return pred, succ


def verify(
    schedule: UnitSchedule,
    tt: Timetable,
    fleet: FleetConfig,
    g: SchedulingGraph,
) -> list[Violation]:
    """Full independent check; empty result means the schedule is operable
    without shunting interventions."""
    out: list[Violation] = []

    for uid in schedule.paths:
        if uid < 0 or uid >= fleet.total_fleet:
            raise OracleError(f"unknown unit uid {uid}")
    for uid, path in schedule.paths.items():
        for trip_id in path:
            if trip_id not in tt:
                raise OracleError(f"unit {uid} references unknown trip {trip_id!r}")

    # reuse: a unit may serve a trip at most once
    for uid, path in sorted(schedule.paths.items()):
        dupes = {t for t in path if path.count(t) > 1}
        for t in sorted(dupes):
            out.append(Violation("reuse", "structural.reuse", t, (uid,), f"unit {uid} serves trip {t} more than once"))

    # time feasibility: dispatch, connections, return must exist in the DAG
    for uid, path in sorted(schedule.paths.items()):
        if not path:
            continue
        type_id = fleet.units[uid].type_id
        if type_id not in fleet.allowed_types(path[0]):
            out.append(Violation("time", "structural.dispatch", path[0], (uid,), f"type {type_id} may not serve trip {path[0]}"))
        for i, j in zip(path, path[1:]):
            arc = g.turnaround_arc(i, j)
            if arc is None or type_id not in arc.allowed_types:
                out.append(
                    Violation(
                        "time",
                        "structural.connection",
                        j,
                        (uid,),
                        f"unit {uid}: no feasible connection {i} -> {j}",
                    )
                )

    # coverage and capacity
    riders: dict[str, list[int]] = {t.id: [] for t in tt}
    for uid, path in schedule.paths.items():
        for trip_id in path:
            if trip_id in riders:
                riders[trip_id].append(uid)
    for trip in tt:
        units = sorted(riders[trip.id])
        if not units:
            out.append(Violation("coverage", "structural.coverage", trip.id, (), f"trip {trip.id} is not served"))
            continue
        cap = sum(fleet.type_of(uid).capacity for uid in units)
        if cap < trip.demand:
            out.append(
                Violation(
                    "capacity",
                    "structural.capacity",
                    trip.id,
                    tuple(units),
                    f"trip {trip.id}: capacity {cap} below demand {trip.demand}",
                )
            )

    # fleet bounds (defensive; uids already bound the per-type usage)
    per_type: dict[str, int] = {}
    for uid in schedule.used_units():
        per_type[fleet.units[uid].type_id] = per_type.get(fleet.units[uid].type_id, 0) + 1
    for ut in fleet.unit_types:
        if per_type.get(ut.id, 0) > ut.fleet_size:
            out.append(Violation("fleet", "structural.fleet", "", (), f"type {ut.id}: {per_type[ut.id]} units exceed fleet {ut.fleet_size}"))

    # theta values on each trip must be a permutation of 1..q
    for trip in tt:
        units = sorted(riders[trip.id])
        if not units:
            continue
        thetas = [schedule.theta(trip.id, uid) for uid in units]
        if None in thetas or sorted(thetas) != list(range(1, len(units) + 1)):
            out.append(
                Violation(
                    "coupling-order",
                    "structural.theta",
                    trip.id,
                    tuple(units),
                    f"trip {trip.id}: orders {thetas} are not a permutation of 1..{len(units)}",
                )
            )

    pred, succ = _neighbors(schedule)

    # coupling bans: all units must share one incoming / outgoing connection
    for trip in tt:
        units = sorted(riders[trip.id])
        if len(units) < 2:
            continue
        rules = fleet.station_rules.get(trip.dep_station)
        if rules is not None and rules.coupling_banned_departure:
            classes = set()
            for uid in units:
                p = pred.get((trip.id, uid))
                classes.add(("depot",) if p is None else ("trip", p))
            if len(classes) > 1:
                out.append(
                    Violation(
                        "ban",
                        "structural.ban_departure",
                        trip.id,
                        tuple(units),
                        f"trip {trip.id}: coupling banned at {trip.dep_station} but units merge there",
                    )
                )
        rules = fleet.station_rules.get(trip.arr_station)
        if rules is not None and rules.coupling_banned_arrival:
            classes = set()
            for uid in units:
                s = succ.get((trip.id, uid))
                classes.add(("depot",) if s is None else ("trip", s))
            if len(classes) > 1:
                out.append(
                    Violation(
                        "ban",
                        "structural.ban_arrival",
                        trip.id,
                        tuple(units),
                        f"trip {trip.id}: decoupling banned at {trip.arr_station} but units split there",
                    )
                )

    def shunted(i: str, j: str) -> bool:
        arc = g.turnaround_arc(i, j)
        return arc is not None and arc.shunt_allowed

    # ordering casework per trip
    for trip in tt:
        units = sorted(riders[trip.id])
        if len(units) < 2:
            continue
        thetas = {uid: schedule.theta(trip.id, uid) for uid in units}
        if None in thetas.values():
            continue  # already reported structurally
        d_trip = trip.direction
        for h1, h2 in itertools.combinations(units, 2):
            th1, th2 = thetas[h1], thetas[h2]
            if th1 == th2:
                continue
            front, rear = (h1, h2) if th1 < th2 else (h2, h1)

            # -- coupling side: how did the two units come in?
            p1, p2 = pred.get((trip.id, h1)), pred.get((trip.id, h2))
            if p1 is not None and p2 is not None and p1 != p2 and not shunted(p1, trip.id) and not shunted(p2, trip.id):
                f1, f2 = tt.trip(p1), tt.trip(p2)
                if f1.direction != f2.direction:
                    # against-trip-direction feeder holds the departure end
                    rear_expected = h1 if f1.direction == d_trip else h2
                    if rear != rear_expected:
                        rule = "T3.row2" if d_trip * (f1.direction - f2.direction) > 0 else "T3.row3"
                        out.append(
                            Violation(
                                "coupling-order",
                                rule,
                                trip.id,
                                (h1, h2),
                                f"trip {trip.id}: unit {rear_expected} entered from in front and must couple to the rear",
                            )
                        )
                elif f1.arr_time != f2.arr_time:
                    early = h1 if f1.arr_time < f2.arr_time else h2
                    late = h2 if early == h1 else h1
                    front_expected = early if f1.direction == d_trip else late
                    if front != front_expected:
                        rule = "T3.row4" if d_trip == f1.direction else "T3.row5"
                        out.append(
                            Violation(
                                "coupling-order",
                                rule,
                                trip.id,
                                (h1, h2),
                                f"trip {trip.id}: arrival stacking puts unit {front_expected} in front",
                            )
                        )

            # -- decoupling side: where do the two units go next?
            s1, s2 = succ.get((trip.id, h1)), succ.get((trip.id, h2))
            if s1 is not None and s2 is not None and s1 != s2 and not shunted(trip.id, s1) and not shunted(trip.id, s2):
                n1, n2 = tt.trip(s1), tt.trip(s2)
                if n1.direction != n2.direction:
                    # the continuing unit must sit at the live end of the train
                    front_expected = h1 if n1.direction == d_trip else h2
                    if front != front_expected:
                        rule = "T3.row10" if d_trip * (n1.direction - n2.direction) > 0 else "T3.row11"
                        out.append(
                            Violation(
                                "blockage",
                                rule,
                                trip.id,
                                (h1, h2),
                                f"trip {trip.id}: unit {front_expected} continues straight on and is walled in",
                            )
                        )
                elif n1.dep_time != n2.dep_time:
                    early = h1 if n1.dep_time < n2.dep_time else h2
                    late = h2 if early == h1 else h1
                    front_expected = early if n1.direction == d_trip else late
                    if front != front_expected:
                        rule = "T3.row12" if d_trip == n1.direction else "T3.row13"
                        out.append(
                            Violation(
                                "decoupling-order",
                                rule,
                                trip.id,
                                (h1, h2),
                                f"trip {trip.id}: unit {early} leaves first and must stand nearer its exit",
                            )
                        )

            # -- stay-coupled propagation onto the shared next trip
            if s1 is not None and s1 == s2 and not shunted(trip.id, s1) and s1 in riders and h1 in riders[s1] and h2 in riders[s1]:
                nxt = tt.trip(s1)
                th1n, th2n = schedule.theta(s1, h1), schedule.theta(s1, h2)
                if th1n is None or th2n is None or th1n == th2n:
                    continue
                same_now = th1 < th2
                same_next = th1n < th2n
                if d_trip == nxt.direction and same_now != same_next:
                    out.append(
                        Violation(
                            "propagation",
                            "T3.row7",
                            s1,
                            (h1, h2),
                            f"trips {trip.id}->{s1}: coupled pair must keep its order (same direction)",
                        )
                    )
                if d_trip != nxt.direction and same_now == same_next:
                    out.append(
                        Violation(
                            "propagation",
                            "T3.row8",
                            s1,
                            (h1, h2),
                            f"trips {trip.id}->{s1}: coupled pair must flip after reversal",
                        )
                    )

    order = {t.id: k for k, t in enumerate(tt.chronological())}
    out.sort(key=lambda v: (order.get(v.trip, len(order)), v.kind, v.rule, v.units))
    return out


def station_events(schedule: UnitSchedule, tt: Timetable) -> list[StationEvent]:
    """Platform dwell groups, time-ordered; handy for reports and debugging."""
    pred, succ = _neighbors(schedule)
    events = []
    for trip in tt.chronological():
        units = schedule.units_on(trip.id)
        if not units:
            continue
        events.append(
            StationEvent(
                station=trip.dep_station,
                trip_id=trip.id,
                side="departure",
                units=tuple(units),
                feeder_trips=tuple(pred.get((trip.id, u)) for u in units),
                onward_trips=tuple(succ.get((trip.id, u)) for u in units),
            )
        )
    return events


def decode(vec: Sequence, m: MilpInstance, g: SchedulingGraph, strict: bool = True) -> UnitSchedule:
    """Reconstruct per-unit paths and orders from a solution vector.

    Raises :class:`DecodeError` for non-integral values, flow-imbalanced
    unit assignments, or (when ``strict``) uncovered trips.
    """
    fleet = g.fleet
    for var in m.variables:
        v = vec[var.index]
        if v != int(v):
            raise DecodeError(f"non-integral value {v} for {var.name}")

    unit_arcs: dict[int, list] = {u.uid: [] for u in fleet.units}
    for (aid, uid), idx in m.x_index.items():
        if int(vec[idx]) == 1:
            unit_arcs[uid].append(g.arc(aid))

    paths: dict[int, tuple[str, ...]] = {}
    for uid, arcs in unit_arcs.items():
        if not arcs:
            paths[uid] = ()
            continue
        by_src = {}
        for a in arcs:
            if a.src in by_src:
                raise DecodeError(f"unit {uid}: two departures from {a.src}")
            by_src[a.src] = a
        if SOURCE not in by_src:
            raise DecodeError(f"unit {uid}: flow without a dispatch from the depot")
        path = []
        node = SOURCE
        seen = set()
        while node != SINK:
            if node in seen:
                raise DecodeError(f"unit {uid}: cyclic flow at {node}")
            seen.add(node)
            arc = by_src.get(node)
            if arc is None:
                raise DecodeError(f"unit {uid}: flow stops at {node} without a sign-off")
            if arc.dst != SINK:
                path.append(arc.dst)
            node = arc.dst
        if len(by_src) != len(path) + 1:
            raise DecodeError(f"unit {uid}: disconnected flow fragments")
        paths[uid] = tuple(path)

    orders: dict[tuple[str, int], int] = {}
    for (trip_id, uid), idx in m.theta_index.items():
        val = int(vec[idx])
        if val:
            orders[(trip_id, uid)] = val

    if strict:
        covered = {t for p in paths.values() for t in p}
        missing = [t.id for t in g.trips if t.id not in covered]
        if missing:
            raise DecodeError(f"uncovered trips: {missing}")
    return UnitSchedule(paths=paths, orders=orders)
