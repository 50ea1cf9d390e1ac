"""Per-unit integer program: variables, linear rows, objective.

Variable classes:

* ``x[arc, unit]``   binary, unit rides the arc;
* ``th[trip, unit]`` integer coupling order, 1 = front in travel direction,
  0 = unit not on the trip;
* ``u[trip, h1, h2]`` binary order indicator for a unit pair (1 exactly when
  ``th[h1] > th[h2]`` while both units are present);
* ``y[trip, family]`` binary family selector (``families`` feature);
* ``z[arc]``          binary arc-use indicator (``blockflow`` feature, also
  emitted around coupling-ban stations).

The coupling/decoupling order conditions are conditional on which arcs the
two units ride; they are linearized with a big-M guard ``2 - x1 - x2`` and
the constant direction/time factor divided out, leaving coefficients of
+-1 on the two order variables.  Pairs of units that share a turnaround arc
keep (same trip direction) or flip (opposite direction) their relative
order; that is expressed on the ``u`` indicators of the two trips.

Rows are emitted in two accountings: the *active* rows actually posed to
the solver (structurally inert instantiations skipped), and an
*instantiated* census that counts every quantifier instantiation of each
constraint family, inert or not.  ``meta`` carries both, with the emission
conventions itemized.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Optional, Sequence

from .graph import SIGN_ON, SIGN_OFF, SINK, SOURCE, TURNAROUND, Arc, SchedulingGraph
from .timetable import FleetConfig, Timetable, Trip

Number = int | Fraction


def _exact(value) -> Number:
    """Coerce config numbers to exact arithmetic."""
    if isinstance(value, (int, Fraction)):
        return value
    f = Fraction(str(value))
    return int(f) if f.denominator == 1 else f


@dataclass(frozen=True)
class ObjectiveWeights:
    """Objective weights and preference tables.

    ``mileage`` defaults to the trip duration in minutes for every type.
    The preference tables (long-gap, type-trip, sign-on/off) enter the
    objective negatively and default to zero.
    """

    W1: Number = 10000
    W2: Number = 1
    W3: Number = 50
    W4: Number = 0
    W5: Number = 0
    W6: Number = 0
    W7: Number = 0
    mileage: Mapping[tuple[str, str], Number] = field(default_factory=dict)
    gap_preference: Mapping[tuple[str, int], Number] = field(default_factory=dict)
    trip_preference: Mapping[tuple[str, str], Number] = field(default_factory=dict)
    signon_preference: Mapping[tuple[str, int], Number] = field(default_factory=dict)

    @classmethod
    def from_fleet(cls, fleet: FleetConfig, **overrides) -> "ObjectiveWeights":
        kw = {k: _exact(v) for k, v in fleet.weights.items() if k in {f"W{i}" for i in range(1, 8)}}
        kw.update({k: _exact(v) for k, v in overrides.items()})
        return cls(**kw)

    def trip_mileage(self, type_id: str, trip: Trip) -> Number:
        return self.mileage.get((type_id, trip.id), trip.duration)


@dataclass(frozen=True)
class ModelOptions:
    families: bool = False
    blockflow: bool = False
    platform: bool = True
    weights: Optional[ObjectiveWeights] = None
    materialize_limit: int = 60000  # ordering rows kept in memory below this


@dataclass(frozen=True)
class VarRef:
    index: int
    kind: str  # x | theta | u | y | z
    key: tuple
    name: str
    lb: int
    ub: int
    integer: bool  # True: general integer; False: binary


@dataclass(frozen=True)
class LinConstraint:
    terms: tuple[tuple[int, Number], ...]
    sense: str  # "<=", ">=", "="
    rhs: Number
    tag: str

    def violated_by(self, vec: Sequence[Number]) -> bool:
        lhs = sum(c * vec[i] for i, c in self.terms)
        if self.sense == "<=":
            return lhs > self.rhs
        if self.sense == ">=":
            return lhs < self.rhs
        return lhs != self.rhs


class ModelError(ValueError):
    pass


def _san(token: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in str(token))


class MilpInstance:
    """Solver-agnostic matrix form plus the builders' bookkeeping."""

    def __init__(self, graph: SchedulingGraph, options: ModelOptions):
        self.graph = graph
        self.fleet = graph.fleet
        self.timetable = graph.timetable
        self.options = options
        self.weights = options.weights or ObjectiveWeights.from_fleet(graph.fleet)
        self.variables: list[VarRef] = []
        self.rows: list[LinConstraint] = []  # materialized rows
        self._ordering_materialized = True
        self.objective: dict[int, Number] = {}
        self.meta: dict = {}
        self.big_m: int = 0
        # variable lookup tables
        self.x_index: dict[tuple[int, int], int] = {}
        self.theta_index: dict[tuple[str, int], int] = {}
        self.u_index: dict[tuple[str, int, int], int] = {}
        self.y_index: dict[tuple[str, str], int] = {}
        self.z_index: dict[int, int] = {}

    # -- variable helpers -------------------------------------------------

    def _add_var(self, kind, key, name, lb, ub, integer) -> int:
        idx = len(self.variables)
        self.variables.append(VarRef(idx, kind, key, name, lb, ub, integer))
        return idx

    def x(self, aid: int, uid: int) -> int:
        return self.x_index[(aid, uid)]

    def theta(self, trip_id: str, uid: int) -> int:
        return self.theta_index[(trip_id, uid)]

    def u(self, trip_id: str, h1: int, h2: int) -> int:
        return self.u_index[(trip_id, h1, h2)]

    @property
    def num_vars(self) -> int:
        return len(self.variables)

    def var_name(self, idx: int) -> str:
        return self.variables[idx].name

    # -- row iteration and checking ---------------------------------------

    def iter_rows(self) -> Iterator[LinConstraint]:
        yield from self.rows
        if not self._ordering_materialized:
            yield from _ordering_rows(self)

    def check(self, vec: Sequence[Number]) -> list[str]:
        """Exact-arithmetic violation report for a full assignment vector."""
        if len(vec) != self.num_vars:
            raise ModelError(f"vector length {len(vec)} != {self.num_vars} variables")
        problems = []
        for var in self.variables:
            v = vec[var.index]
            if v != int(v):
                problems.append(f"{var.name}: non-integral value {v}")
            elif not (var.lb <= v <= var.ub):
                problems.append(f"{var.name}: value {v} outside [{var.lb},{var.ub}]")
        for row in self.iter_rows():
            if row.violated_by(vec):
                problems.append(f"row {row.tag} violated")
        return problems

    def objective_value(self, vec: Sequence[Number]) -> Number:
        return sum(c * vec[i] for i, c in self.objective.items())

    def tag_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for row in self.iter_rows():
            fam = row.tag.split(":", 1)[0]
            counts[fam] = counts.get(fam, 0) + 1
        return counts


def _eligible_pair(m: MilpInstance, type_a: str, type_b: str) -> bool:
    if not m.options.families:
        return True
    return m.fleet.share_family(type_a, type_b)


def build_model(g: SchedulingGraph, fleet: FleetConfig, opts: ModelOptions | None = None) -> MilpInstance:
    """Translate graph + fleet into the integer program."""
    opts = opts or ModelOptions()
    if fleet.total_fleet == 0:
        raise ModelError("empty fleet: no units configured")
    if g.trips and not any(a.kind == SIGN_ON for a in g.arcs):
        raise ModelError("graph has no sign-on arcs; no trip can be served")

    m = MilpInstance(g, opts)
    trips = g.trips
    units = fleet.units

    fam_caps = [f.max_units for f in fleet.families]
    m.big_m = (max(fam_caps) if fam_caps else fleet.total_fleet) + fleet.total_fleet + 1
    M = m.big_m

    # ---- variables (deterministic order) --------------------------------
    for arc in g.arcs:
        for unit in units:
            if unit.type_id in arc.allowed_types:
                m.x_index[(arc.aid, unit.uid)] = m._add_var(
                    "x", (arc.aid, unit.uid), f"x_a{arc.aid}_h{unit.uid}", 0, 1, False
                )
    allowed_units = {
        t.id: tuple(u for u in units if u.type_id in fleet.allowed_types(t.id)) for t in trips
    }
    for t in trips:
        for unit in allowed_units[t.id]:
            m.theta_index[(t.id, unit.uid)] = m._add_var(
                "theta", (t.id, unit.uid), f"th_t{_san(t.id)}_h{unit.uid}", 0, fleet.total_fleet, True
            )
    for t in trips:
        for ua, ub in itertools.combinations(allowed_units[t.id], 2):
            if _eligible_pair(m, ua.type_id, ub.type_id):
                m.u_index[(t.id, ua.uid, ub.uid)] = m._add_var(
                    "u", (t.id, ua.uid, ub.uid), f"u_t{_san(t.id)}_h{ua.uid}_h{ub.uid}", 0, 1, False
                )
    families_by_trip: dict[str, list] = {}
    if opts.families:
        for t in trips:
            fams = [
                f for f in fleet.families if f.types & fleet.allowed_types(t.id)
            ]
            families_by_trip[t.id] = fams
            for f in fams:
                m.y_index[(t.id, f.name)] = m._add_var(
                    "y", (t.id, f.name), f"y_t{_san(t.id)}_f{_san(f.name)}", 0, 1, False
                )
    banned_dep = {t.id for t in trips if fleet.station_rules.get(t.dep_station) and fleet.station_rules[t.dep_station].coupling_banned_departure}
    banned_arr = {t.id for t in trips if fleet.station_rules.get(t.arr_station) and fleet.station_rules[t.arr_station].coupling_banned_arrival}
    z_arcs: list[Arc] = []
    if opts.blockflow:
        z_arcs = list(g.arcs)
    elif banned_dep or banned_arr:
        keep = set()
        for tid in banned_dep:
            keep.update(a.aid for a in g.delta_minus(tid))
        for tid in banned_arr:
            keep.update(a.aid for a in g.delta_plus(tid))
        z_arcs = [g.arc(aid) for aid in sorted(keep)]
    for arc in z_arcs:
        m.z_index[arc.aid] = m._add_var("z", (arc.aid,), f"z_a{arc.aid}", 0, 1, False)

    # ---- objective -------------------------------------------------------
    w = m.weights
    obj = m.objective

    def add_obj(idx: int, coeff: Number):
        if coeff:
            obj[idx] = obj.get(idx, 0) + coeff

    for (aid, uid), idx in m.x_index.items():
        arc = g.arc(aid)
        type_id = units[uid].type_id
        if arc.kind == SIGN_ON:
            add_obj(idx, w.W1)
            add_obj(idx, -w.W6 * w.signon_preference.get((type_id, aid), 0))
        if arc.kind == SIGN_OFF:
            add_obj(idx, -w.W6 * w.signon_preference.get((type_id, aid), 0))
        if arc.src not in (SOURCE,):
            trip = g.timetable.trip(arc.src)
            add_obj(idx, w.W2 * w.trip_mileage(type_id, trip))
            add_obj(idx, -w.W5 * w.trip_preference.get((type_id, trip.id), 0))
        if arc.empty_running:
            add_obj(idx, w.W3)
        if arc.kind == TURNAROUND:
            add_obj(idx, -w.W4 * w.gap_preference.get((type_id, aid), 0))
    for aid, idx in m.z_index.items():
        add_obj(idx, w.W7)

    # ---- structural rows -------------------------------------------------
    rows = m.rows

    def row(terms, sense, rhs, tag):
        merged: dict[int, Number] = {}
        for i, c in terms:
            merged[i] = merged.get(i, 0) + c
        clean = tuple((i, c) for i, c in merged.items() if c != 0)
        rows.append(LinConstraint(clean, sense, rhs, tag))

    for t in trips:
        for unit in allowed_units[t.id]:
            out = [(m.x(a.aid, unit.uid), 1) for a in g.delta_plus(t.id, unit.type_id)]
            row(out, "<=", 1, f"unit_reuse:{t.id}:h{unit.uid}")
    for unit in units:
        on = [
            (m.x(a.aid, unit.uid), 1)
            for a in g.delta_plus(SOURCE, unit.type_id)
        ]
        if on:
            row(on, "<=", 1, f"unit_reuse_source:h{unit.uid}")

    for t in trips:
        for unit in allowed_units[t.id]:
            terms = [(m.x(a.aid, unit.uid), 1) for a in g.delta_plus(t.id, unit.type_id)]
            terms += [(m.x(a.aid, unit.uid), -1) for a in g.delta_minus(t.id, unit.type_id)]
            row(terms, "=", 0, f"flow_balance:{t.id}:h{unit.uid}")

    for ut in fleet.unit_types:
        terms = [
            (m.x(a.aid, unit.uid), 1)
            for unit in units
            if unit.type_id == ut.id
            for a in g.delta_plus(SOURCE, ut.id)
        ]
        if terms:
            row(terms, "<=", ut.fleet_size, f"fleet_bound:{ut.id}")

    for t in trips:
        terms = [
            (m.x(a.aid, unit.uid), fleet.unit_type(unit.type_id).capacity)
            for unit in allowed_units[t.id]
            for a in g.delta_plus(t.id, unit.type_id)
        ]
        row(terms, ">=", t.demand, f"demand:{t.id}")

    if opts.families:
        for t in trips:
            for f in families_by_trip[t.id]:
                y_idx = m.y_index[(t.id, f.name)]
                members = [u for u in allowed_units[t.id] if u.type_id in f.types]
                unit_terms = [
                    (m.x(a.aid, u.uid), 1) for u in members for a in g.delta_plus(t.id, u.type_id)
                ]
                car_terms = [
                    (m.x(a.aid, u.uid), fleet.unit_type(u.type_id).num_cars)
                    for u in members
                    for a in g.delta_plus(t.id, u.type_id)
                ]
                row(unit_terms + [(y_idx, -f.max_units)], "<=", 0, f"family_units:{t.id}:{f.name}")
                row(car_terms + [(y_idx, -f.max_cars)], "<=", 0, f"family_cars:{t.id}:{f.name}")
            row([(m.y_index[(t.id, f.name)], 1) for f in families_by_trip[t.id]], "=", 1, f"family_one:{t.id}")

    platform_active = 0
    if opts.platform:
        for t in trips:
            lengths = [
                fleet.platform_length(s)
                for s in (t.dep_station, t.arr_station)
                if fleet.platform_length(s) is not None
            ]
            if not lengths:
                continue
            limit = min(lengths)
            terms = [
                (m.x(a.aid, u.uid), fleet.unit_type(u.type_id).length)
                for u in allowed_units[t.id]
                for a in g.delta_plus(t.id, u.type_id)
            ]
            row(terms, "<=", limit, f"platform:{t.id}")
            platform_active += 1

    if m.z_index:
        for arc in z_arcs:
            terms = [
                (m.x(arc.aid, unit.uid), 1)
                for unit in units
                if (arc.aid, unit.uid) in m.x_index
            ]
            row(terms + [(m.z_index[arc.aid], -arc.max_units)], "<=", 0, f"block_link:a{arc.aid}")
    if opts.blockflow:
        for arc in g.turnaround_arcs:
            i, j = arc.src, arc.dst
            if i in banned_arr or j in banned_dep:
                continue
            ti, tj = g.timetable.trip(i), g.timetable.trip(j)
            tau_d = fleet.decouple_time(ti.arr_station)
            tau_c = fleet.couple_time(tj.dep_station)
            terms = [(m.z_index[a.aid], tau_d) for a in g.delta_plus(i)]
            terms += [(m.z_index[a.aid], tau_c) for a in g.delta_minus(j)]
            row(terms, "<=", arc.slack + tau_d + tau_c, f"couple_time:{i}->{j}")
    for tid in sorted(banned_dep):
        row([(m.z_index[a.aid], 1) for a in g.delta_minus(tid)], "=", 1, f"couple_ban:{tid}")
    for tid in sorted(banned_arr):
        row([(m.z_index[a.aid], 1) for a in g.delta_plus(tid)], "=", 1, f"decouple_ban:{tid}")

    # ---- order variable rows --------------------------------------------
    for t in trips:
        total_terms = [
            (m.x(a.aid, u.uid), 1) for u in allowed_units[t.id] for a in g.delta_plus(t.id, u.type_id)
        ]
        for unit in allowed_units[t.id]:
            th = m.theta(t.id, unit.uid)
            presence = [(m.x(a.aid, unit.uid), 1) for a in g.delta_plus(t.id, unit.type_id)]
            row([(th, 1)] + [(i, -c) for i, c in presence], ">=", 0, f"order_lower:{t.id}:h{unit.uid}")
            row([(th, 1)] + [(i, -c) for i, c in total_terms], "<=", 0, f"order_upper:{t.id}:h{unit.uid}")
            row([(th, 1)] + [(i, -M * c) for i, c in presence], "<=", 0, f"order_presence:{t.id}:h{unit.uid}")
        for (tid, h1, h2), u_idx in m.u_index.items():
            if tid != t.id:
                continue
            th1, th2 = m.theta(t.id, h1), m.theta(t.id, h2)
            p1 = [(m.x(a.aid, h1), 1) for a in g.delta_plus(t.id, units[h1].type_id)]
            p2 = [(m.x(a.aid, h2), 1) for a in g.delta_plus(t.id, units[h2].type_id)]
            # th1 - th2 <= M*u - 1 + M*(2 - p1 - p2)
            terms = [(th1, 1), (th2, -1), (u_idx, -M)]
            terms += [(i, M * c) for i, c in p1] + [(i, M * c) for i, c in p2]
            row(terms, "<=", 2 * M - 1, f"order_alldiff_hi:{t.id}:h{h1}:h{h2}")
            # th1 - th2 >= 1 - M*(1-u) - M*(2 - p1 - p2)
            terms = [(th1, 1), (th2, -1), (u_idx, -M)]
            terms += [(i, -M * c) for i, c in p1] + [(i, -M * c) for i, c in p2]
            row(terms, ">=", 1 - 3 * M, f"order_alldiff_lo:{t.id}:h{h1}:h{h2}")

    # ---- order propagation along shared arcs ------------------------------
    for arc in g.turnaround_arcs:
        if arc.shunt_allowed:
            continue
        i, j = arc.src, arc.dst
        di = g.timetable.trip(i).direction
        dj = g.timetable.trip(j).direction
        for (tid, h1, h2), ui_idx in m.u_index.items():
            if tid != i:
                continue
            if (j, h1, h2) not in m.u_index:
                continue
            if (arc.aid, h1) not in m.x_index or (arc.aid, h2) not in m.x_index:
                continue
            uj_idx = m.u_index[(j, h1, h2)]
            x1, x2 = m.x(arc.aid, h1), m.x(arc.aid, h2)
            if di == dj:
                row([(ui_idx, 1), (uj_idx, -1), (x1, 1), (x2, 1)], "<=", 2, f"order_propagation:a{arc.aid}:h{h1}:h{h2}")
                row([(ui_idx, -1), (uj_idx, 1), (x1, 1), (x2, 1)], "<=", 2, f"order_propagation:a{arc.aid}:h{h1}:h{h2}")
            else:
                row([(ui_idx, 1), (uj_idx, 1), (x1, 1), (x2, 1)], "<=", 3, f"order_propagation:a{arc.aid}:h{h1}:h{h2}")
                row([(ui_idx, -1), (uj_idx, -1), (x1, 1), (x2, 1)], "<=", 1, f"order_propagation:a{arc.aid}:h{h1}:h{h2}")

    # ---- ordering casework rows -------------------------------------------
    n_ordering = _count_active_ordering(m)
    if n_ordering <= opts.materialize_limit:
        rows.extend(_ordering_rows(m))
        m._ordering_materialized = True
    else:
        m._ordering_materialized = False

    # ---- meta -------------------------------------------------------------
    active_counts = _active_counts(m, n_ordering)
    m.meta = {
        "bigM": M,
        "variables": m.num_vars,
        "variables_by_kind": _var_counts(m),
        "rows_active": sum(active_counts.values()),
        "rows_active_by_family": active_counts,
        "rows_instantiated": None,  # filled below
        "rows_instantiated_by_family": None,
        "ordering_materialized": m._ordering_materialized,
        "conventions": [
            "per-unit single diagram: source reuse row added per unit",
            "ordering rows normalized by the constant direction/time factor",
            "ordering guards: big-M on (2 - x1 - x2) over the two rider arcs",
            "inert quantifier instantiations skipped in active rows",
            "instantiated census: ordered unit pairs, full in/out arc squares",
            "pair order indicators stored once per unordered unit pair",
            "all-different rows carry presence slack so absent pairs stay feasible",
            "stay-coupled order propagation emitted on pair indicators per shared arc",
        ],
    }
    inst = _instantiated_counts(m, platform_active)
    m.meta["rows_instantiated_by_family"] = inst
    m.meta["rows_instantiated"] = sum(inst.values())
    return m


def _var_counts(m: MilpInstance) -> dict[str, int]:
    counts: dict[str, int] = {}
    for v in m.variables:
        counts[v.kind] = counts.get(v.kind, 0) + 1
    return counts


# ---------------------------------------------------------------------------
# ordering casework emission


def _ordering_sign_couple(dj: int, d1: int, d2: int, t1: int, t2: int) -> int:
    """Required sign of (th[h1] - th[h2]) at the joint trip, 0 if inert.

    Opposite feeder directions: sign from the direction difference.
    Same feeder direction: sign from the arrival-time difference.
    """
    if d1 != d2:
        return 1 if dj * (d1 - d2) > 0 else -1
    if t1 == t2:
        return 0
    k = dj * d1 * (t1 - t2)
    return 1 if k > 0 else -1


def _ordering_sign_decouple(di: int, d1: int, d2: int, t1: int, t2: int) -> int:
    """Required sign of (th[h1] - th[h2]) at the split trip, 0 if inert."""
    if d1 != d2:
        # di*(d1-d2)*(th1-th2) <= 0
        return -1 if di * (d1 - d2) > 0 else 1
    if t1 == t2:
        return 0
    k = di * d1 * (t1 - t2)
    return 1 if k > 0 else -1


def _ordering_slots(m: MilpInstance):
    """Yield (tag, trip, sign, h1, h2, arc1, arc2) for every active row."""
    g = m.graph
    units = m.fleet.units
    for t in g.trips:
        pairs = [
            (h1, h2)
            for (tid, h1, h2) in m.u_index
            if tid == t.id
        ]
        in_arcs = [a for a in g.delta_minus(t.id) if a.kind == TURNAROUND and not a.shunt_allowed]
        out_arcs = [a for a in g.delta_plus(t.id) if a.kind == TURNAROUND and not a.shunt_allowed]
        for a1, a2 in itertools.permutations(in_arcs, 2):
            ti1, ti2 = g.timetable.trip(a1.src), g.timetable.trip(a2.src)
            s = _ordering_sign_couple(t.direction, ti1.direction, ti2.direction, ti1.arr_time, ti2.arr_time)
            if s == 0:
                continue
            tag = "couple_opposite" if ti1.direction != ti2.direction else "couple_same"
            for h1, h2 in pairs:
                if (a1.aid, h1) in m.x_index and (a2.aid, h2) in m.x_index:
                    yield tag, t.id, s, h1, h2, a1.aid, a2.aid
        for a1, a2 in itertools.permutations(out_arcs, 2):
            tj1, tj2 = g.timetable.trip(a1.dst), g.timetable.trip(a2.dst)
            s = _ordering_sign_decouple(t.direction, tj1.direction, tj2.direction, tj1.dep_time, tj2.dep_time)
            if s == 0:
                continue
            tag = "decouple_opposite" if tj1.direction != tj2.direction else "decouple_same"
            for h1, h2 in pairs:
                if (a1.aid, h1) in m.x_index and (a2.aid, h2) in m.x_index:
                    yield tag, t.id, s, h1, h2, a1.aid, a2.aid


def _ordering_rows(m: MilpInstance) -> Iterator[LinConstraint]:
    M = m.big_m
    for tag, tid, s, h1, h2, aid1, aid2 in _ordering_slots(m):
        terms = (
            (m.theta(tid, h1), s),
            (m.theta(tid, h2), -s),
            (m.x(aid1, h1), -M),
            (m.x(aid2, h2), -M),
        )
        yield LinConstraint(terms, ">=", -2 * M, f"{tag}:{tid}:h{h1}:h{h2}:a{aid1}:a{aid2}")


def _count_active_ordering(m: MilpInstance) -> int:
    return sum(1 for _ in _ordering_slots(m))


def _active_counts(m: MilpInstance, n_ordering: int) -> dict[str, int]:
    counts: dict[str, int] = {}
    for r in m.rows:
        fam = r.tag.split(":", 1)[0]
        counts[fam] = counts.get(fam, 0) + 1
    if not m._ordering_materialized:
        for tag, *_ in _ordering_slots(m):
            counts[tag] = counts.get(tag, 0) + 1
    return counts


def _instantiated_counts(m: MilpInstance, platform_active: int) -> dict[str, int]:
    """Census of every quantifier instantiation per constraint family.

    Ordered unit pairs; arc pairs range over the full in/out star of the
    trip (sign-on/off included) with repetition, so inert instantiations
    (same feeder, equal times, matching directions, depot side) are counted
    even though the active emission skips them.
    """
    g = m.graph
    fleet = m.fleet
    trips = g.trips
    n_allowed = {
        t.id: sum(1 for u in fleet.units if u.type_id in fleet.allowed_types(t.id))
        for t in trips
    }
    pairs_ordered = {tid: n * (n - 1) for tid, n in n_allowed.items()}
    counts: dict[str, int] = {}

    def put(fam, n):
        if n:
            counts[fam] = counts.get(fam, 0) + n

    put("unit_reuse", sum(n_allowed.values()))
    put("unit_reuse_source", fleet.total_fleet)
    put("flow_balance", sum(n_allowed.values()))
    put("fleet_bound", len(fleet.unit_types))
    put("demand", len(trips))
    if m.options.families:
        fams = {t.id: [f for f in fleet.families if f.types & fleet.allowed_types(t.id)] for t in trips}
        put("family_units", sum(len(v) for v in fams.values()))
        put("family_cars", sum(len(v) for v in fams.values()))
        put("family_one", len(trips))
    if m.options.platform:
        put("platform", len(trips))
    if m.options.blockflow:
        put("block_link", len(g.arcs))
        put("couple_time", len(g.turnaround_arcs))
    put("order_lower", sum(n_allowed.values()))
    put("order_upper", sum(n_allowed.values()))
    put("order_presence", sum(n_allowed.values()))
    put("order_alldiff", 2 * sum(pairs_ordered.values()))
    prop = 0
    for arc in g.turnaround_arcs:
        n = sum(1 for u in fleet.units if u.type_id in arc.allowed_types)
        prop += 2 * n * (n - 1)
    put("order_propagation", prop)
    for t in trips:
        k_in = len(g.delta_minus(t.id))
        k_out = len(g.delta_plus(t.id))
        put("couple_opposite", pairs_ordered[t.id] * k_in * k_in)
        put("couple_same", pairs_ordered[t.id] * k_in * k_in)
        put("decouple_opposite", pairs_ordered[t.id] * k_out * k_out)
        put("decouple_same", pairs_ordered[t.id] * k_out * k_out)
    return counts


# ---------------------------------------------------------------------------
# LP export


def _fmt_coeff(c: Number) -> str:
    if isinstance(c, Fraction) and c.denominator != 1:
        return f"{float(c):.12g}"
    return str(int(c))


def _fmt_terms(terms: Iterable[tuple[int, Number]], names) -> str:
    parts = []
    for idx, coeff in terms:
        if coeff == 0:
            continue
        sign = "-" if coeff < 0 else "+"
        parts.append(f"{sign} {_fmt_coeff(abs(coeff))} {names[idx]}")
    if not parts:
        return "0"
    first = parts[0]
    if first.startswith("+ "):
        first = first[2:]
    return " ".join([first] + parts[1:])


def export_lp(m: MilpInstance, path: str | Path) -> Path:
    """Write the instance in CPLEX LP text format, deterministically."""
    path = Path(path)
    names = [v.name for v in m.variables]
    lines = ["\\ unit scheduling model", "Minimize"]
    obj_terms = sorted(m.objective.items())
    lines.append(" obj: " + _fmt_terms(obj_terms, names))
    lines.append("Subject To")
    sense_map = {"<=": "<=", ">=": ">=", "=": "="}
    for n, rowc in enumerate(m.iter_rows()):
        body = _fmt_terms(rowc.terms, names)
        lines.append(f" c{n}_{_san(rowc.tag)}: {body} {sense_map[rowc.sense]} {_fmt_coeff(rowc.rhs)}")
    generals = [v for v in m.variables if v.integer]
    binaries = [v for v in m.variables if not v.integer]
    if generals:
        lines.append("Bounds")
        for v in generals:
            lines.append(f" {v.lb} <= {v.name} <= {v.ub}")
    if binaries:
        lines.append("Binaries")
        for v in binaries:
            lines.append(f" {v.name}")
    if generals:
        lines.append("Generals")
        for v in generals:
            lines.append(f" {v.name}")
    lines.append("End")
    path.write_text("\n".join(lines) + "\n")
    return path
