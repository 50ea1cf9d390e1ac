"""Directed acyclic graph of feasible unit movements.

Nodes are the trips plus a shared source and sink.  Arcs come in three kinds:

* ``sign_on``: source -> trip, dispatch from depot (one per trip);
* ``turnaround``: trip i -> trip j, the unit serves j after i, possibly with
  an empty-running reposition when the stations differ;
* ``sign_off``: trip -> sink, return to depot (one per trip).

A turnaround arc (i, j) exists when some unit type may serve both trips and

    dep_time(j) - arr_time(i) >= min_turnaround(station) [+ empty-run time]

where the empty-run time applies when ``arr_station(i) != dep_station(j)``
and requires the station pair to be a permitted deadhead.  Trips are ordered
by departure time, so the graph is acyclic by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

from .timetable import FleetConfig, Timetable, Trip

SOURCE = "__source__"
SINK = "__sink__"

SIGN_ON = "sign_on"
SIGN_OFF = "sign_off"
TURNAROUND = "turnaround"


@dataclass(frozen=True)
class Arc:
    aid: int
    kind: str  # sign_on | turnaround | sign_off
    src: str  # trip id or SOURCE
    dst: str  # trip id or SINK
    empty_running: bool
    slack: int  # minutes left after any reposition movement (turnaround only)
    allowed_types: frozenset[str]
    max_units: int
    shunt_allowed: bool = False

    def __str__(self) -> str:  # pragma: no cover - debugging aid
        return f"{self.src}->{self.dst}"


class GraphError(KeyError):
    """Unknown node or arc lookup."""


class SchedulingGraph:
    """Immutable arc-indexed view of the movement DAG."""

    def __init__(self, tt: Timetable, fleet: FleetConfig, arcs: list[Arc]):
        self.timetable = tt
        self.fleet = fleet
        self.arcs: tuple[Arc, ...] = tuple(arcs)
        self.trips = tt.chronological()
        self._nodes = {SOURCE, SINK} | {t.id for t in self.trips}
        self._out: dict[str, list[Arc]] = {n: [] for n in self._nodes}
        self._in: dict[str, list[Arc]] = {n: [] for n in self._nodes}
        self._turnaround: dict[tuple[str, str], Arc] = {}
        for arc in self.arcs:
            self._out[arc.src].append(arc)
            self._in[arc.dst].append(arc)
            if arc.kind == TURNAROUND:
                self._turnaround[(arc.src, arc.dst)] = arc

    # -- lookups ---------------------------------------------------------

    def delta_plus(self, node: str, type_id: Optional[str] = None) -> tuple[Arc, ...]:
        """Arcs leaving ``node``; optionally only those usable by a type."""
        if node not in self._nodes:
            raise GraphError(f"unknown node {node!r}")
        arcs = self._out[node]
        if type_id is None:
            return tuple(arcs)
        return tuple(a for a in arcs if type_id in a.allowed_types)

    def delta_minus(self, node: str, type_id: Optional[str] = None) -> tuple[Arc, ...]:
        """Arcs arriving at ``node``; optionally only those usable by a type."""
        if node not in self._nodes:
            raise GraphError(f"unknown node {node!r}")
        arcs = self._in[node]
        if type_id is None:
            return tuple(arcs)
        return tuple(a for a in arcs if type_id in a.allowed_types)

    def turnaround_arc(self, src: str, dst: str) -> Optional[Arc]:
        return self._turnaround.get((src, dst))

    def arc(self, aid: int) -> Arc:
        return self.arcs[aid]

    def sign_on_arc(self, trip_id: str) -> Arc:
        for a in self._in[trip_id]:
            if a.kind == SIGN_ON:
                return a
        raise GraphError(f"trip {trip_id!r} has no sign-on arc")

    def sign_off_arc(self, trip_id: str) -> Arc:
        for a in self._out[trip_id]:
            if a.kind == SIGN_OFF:
                return a
        raise GraphError(f"trip {trip_id!r} has no sign-off arc")

    @property
    def turnaround_arcs(self) -> tuple[Arc, ...]:
        return tuple(a for a in self.arcs if a.kind == TURNAROUND)

    def arcs_for_type(self, type_id: str) -> tuple[Arc, ...]:
        return tuple(a for a in self.arcs if type_id in a.allowed_types)

    def topological_order(self) -> list[str]:
        """Node order by departure time; raises if any arc goes backward."""
        order = [SOURCE] + [t.id for t in self.trips] + [SINK]
        rank = {n: i for i, n in enumerate(order)}
        for a in self.arcs:
            if rank[a.src] >= rank[a.dst]:
                raise GraphError(f"arc {a} violates the chronological order")
        return order

    # -- exports ---------------------------------------------------------

    def dump(self) -> str:
        """Deterministic text form, one arc per line, for golden tests."""
        lines = ["arc_id,kind,from,to,empty,slack,types"]
        for a in self.arcs:
            types = "|".join(sorted(a.allowed_types))
            lines.append(
                f"{a.aid},{a.kind},{a.src},{a.dst},{int(a.empty_running)},{a.slack},{types}"
            )
        return "\n".join(lines) + "\n"

    def to_dot(self) -> str:
        out = ["digraph schedule {", "  rankdir=LR;"]
        for t in self.trips:
            out.append(f'  "{t.id}" [shape=box label="{t.id}\\n{t.dep_station}->{t.arr_station}"];')
        out.append('  "__source__" [shape=circle label="0"];')
        out.append('  "__sink__" [shape=doublecircle label="inf"];')
        for a in self.arcs:
            style = ' [style=dashed color=gray]' if a.empty_running else ""
            out.append(f'  "{a.src}" -> "{a.dst}"{style};')
        out.append("}")
        return "\n".join(out) + "\n"


def _default_max_units(fleet: FleetConfig, types: frozenset[str]) -> int:
    caps = [f.max_units for f in fleet.families if f.types & types]
    if caps:
        return max(caps)
    return max(fleet.total_fleet, 1)


def build_dag(tt: Timetable, fleet: FleetConfig) -> SchedulingGraph:
    """Construct the movement DAG from a validated instance.

    A trip no type may serve gets no sign-on arc; that surfaces later as
    model infeasibility rather than an error here.
    """
    trips = tt.chronological()
    arcs: list[Arc] = []

    def add(kind, src, dst, empty, slack, types, shunt=False):
        arcs.append(
            Arc(
                aid=len(arcs),
                kind=kind,
                src=src,
                dst=dst,
                empty_running=empty,
                slack=slack,
                allowed_types=types,
                max_units=_default_max_units(fleet, types),
                shunt_allowed=shunt,
            )
        )

    for t in trips:
        types = fleet.allowed_types(t.id)
        if types:
            add(SIGN_ON, SOURCE, t.id, False, 0, types)

    for ti in trips:
        types_i = fleet.allowed_types(ti.id)
        for tj in trips:
            if ti.id == tj.id:
                continue
            shared = types_i & fleet.allowed_types(tj.id)
            if not shared:
                continue
            gap = tj.dep_time - ti.arr_time
            turnaround = fleet.min_turnaround(ti.arr_station)
            if ti.arr_station == tj.dep_station:
                if gap >= turnaround:
                    add(
                        TURNAROUND,
                        ti.id,
                        tj.id,
                        False,
                        gap,
                        shared,
                        shunt=(ti.id, tj.id) in fleet.shunt_allowed,
                    )
            else:
                empty_time = fleet.empty_runs.get((ti.arr_station, tj.dep_station))
                if empty_time is None:
                    continue
                if gap >= turnaround + empty_time:
                    add(
                        TURNAROUND,
                        ti.id,
                        tj.id,
                        True,
                        gap - empty_time,
                        shared,
                        shunt=(ti.id, tj.id) in fleet.shunt_allowed,
                    )

    for t in trips:
        types = fleet.allowed_types(t.id)
        if types:
            add(SIGN_OFF, t.id, SINK, False, 0, types)

    return SchedulingGraph(tt, fleet, arcs)


def flow_support_gaps(g: SchedulingGraph) -> list[str]:
    """Trips with no source->trip->sink path for any type (unservable)."""
    bad = []
    for t in g.trips:
        if not any(a.kind == SIGN_ON for a in g.delta_minus(t.id)):
            bad.append(t.id)
        elif not any(a.kind == SIGN_OFF for a in g.delta_plus(t.id)):
            bad.append(t.id)
    return bad
