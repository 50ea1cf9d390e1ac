"""Exact solver: branch and bound with orbital symmetry handling.

The search walks trips in departure order and decides, for each trip, the
multiset of (unit, connection) assignments serving it, as a sequence of
binary take/skip decisions over a deterministic option list.  Units of one
type with identical fixing footprints (same ridden and same excluded arcs)
are interchangeable; with orbital handling on, taking an option always uses
the lowest free unit of such a class and skipping an option excludes the
whole class, which is the two-child orbit dichotomy (representative to one
versus the entire orbit to zero) composed over the option list.  With it
off, every unit is its own class and the tree degenerates to the classical
0-1 dichotomy.

Coupling orders are never branched on during the walk: once a leaf fixes
all flows, the order-completion pass either produces a feasible order
assignment or proves there is none.  Accepted incumbents must pass the full
exact-arithmetic row check and the independent schedule verifier.

``reference_solve`` is a deliberately separate exhaustive search (subset
enumeration per trip, explicit order-permutation checking against the model
rows) used as the correctness oracle for ``solve`` on small instances.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Sequence

from .graph import SIGN_ON, SIGN_OFF, SINK, SOURCE, TURNAROUND, Arc, SchedulingGraph
from .model import MilpInstance, Number
from .oracle import UnitSchedule, verify
from .orders import complete_orders, prefix_consistent
from .timetable import FleetConfig, Trip

DEPOT = None


class SolverInternalError(RuntimeError):
    """An accepted candidate failed its own re-check: engine/model mismatch."""


class ReferenceSizeError(ValueError):
    """Instance too large for the exhaustive reference search."""


# ---------------------------------------------------------------------------
# spec-level search primitives (also used by tests)


@dataclass(frozen=True)
class SearchNode:
    """Branch-and-bound node: variable fixings plus bookkeeping."""

    f1: frozenset[int] = frozenset()
    f0: frozenset[int] = frozenset()
    depth: int = 0
    bound: Number = 0


@dataclass(frozen=True)
class Orbit:
    """Interchangeable free x variables: same arc, type and fixing state."""

    members: tuple[int, ...]  # variable indices, ascending unit id

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class BranchDecision:
    kind: str  # "unit" | "theta" | "none"
    trip: Optional[str]
    orbit: Optional[Orbit]
    note: str = ""


def _unit_footprints(node: SearchNode, m: MilpInstance) -> dict[int, tuple]:
    f1_arcs: dict[int, set] = {}
    f0_arcs: dict[int, set] = {}
    for idx in node.f1:
        var = m.variables[idx]
        if var.kind == "x":
            aid, uid = var.key
            f1_arcs.setdefault(uid, set()).add(aid)
    for idx in node.f0:
        var = m.variables[idx]
        if var.kind == "x":
            aid, uid = var.key
            f0_arcs.setdefault(uid, set()).add(aid)
    return {
        u.uid: (frozenset(f1_arcs.get(u.uid, ())), frozenset(f0_arcs.get(u.uid, ())))
        for u in m.fleet.units
    }


def compute_orbits(node: SearchNode, m: MilpInstance) -> list[Orbit]:
    """Partition the free x variables into interchangeability orbits.

    Two variables share an orbit exactly when they sit on the same arc, their
    units have the same type, and the units' fixing footprints (arcs fixed to
    one / to zero) coincide.  Structural, no automorphism search.
    """
    footprints = _unit_footprints(node, m)
    groups: dict[tuple, list[tuple[int, int]]] = {}
    for (aid, uid), idx in m.x_index.items():
        if idx in node.f1 or idx in node.f0:
            continue
        key = (aid, m.fleet.units[uid].type_id, footprints[uid])
        groups.setdefault(key, []).append((uid, idx))
    orbits = []
    for key in sorted(groups, key=lambda k: (k[0], k[1])):
        members = tuple(idx for _, idx in sorted(groups[key]))
        orbits.append(Orbit(members=members))
    return orbits


def orbital_branch(node: SearchNode, orbit: Orbit) -> tuple[SearchNode, SearchNode]:
    """Left: fix the lowest-unit representative to one.  Right: fix the whole
    orbit to zero."""
    rep = orbit.members[0]
    left = SearchNode(node.f1 | {rep}, node.f0, node.depth + 1, node.bound)
    right = SearchNode(node.f1, node.f0 | set(orbit.members), node.depth + 1, node.bound)
    return left, right


def select_branch_target(node: SearchNode, m: MilpInstance) -> BranchDecision:
    """Pick the next branching object.

    Units are put onto trips first: the earliest trip whose fixed-to-one
    capacity is short of demand, served by the type with the most units
    still free (more units, more families).  Once every x is decided, any
    trip carrying an undecided order pair yields a theta dichotomy.
    """
    g = m.graph
    fleet = m.fleet
    served_cap: dict[str, int] = {t.id: 0 for t in g.trips}
    for idx in node.f1:
        var = m.variables[idx]
        if var.kind != "x":
            continue
        aid, uid = var.key
        arc = g.arc(aid)
        if arc.src not in (SOURCE,):
            served_cap[arc.src] += fleet.type_of(uid).capacity
    for trip in g.trips:
        if served_cap[trip.id] >= trip.demand and trip.demand > 0:
            continue
        if trip.demand == 0 and served_cap[trip.id] >= 0:
            continue
        orbits = compute_orbits(node, m)
        candidates = []
        for orbit in orbits:
            var = m.variables[orbit.members[0]]
            aid, uid = var.key
            arc = g.arc(aid)
            if arc.dst != trip.id:
                continue
            type_id = fleet.units[uid].type_id
            remaining = sum(
                1 for u in fleet.units if u.type_id == type_id
            )
            n_fams = len(fleet.families_containing(type_id))
            rank = (0 if arc.kind == SIGN_ON else 1, -len(orbit), -remaining, -n_fams, aid, uid)
            candidates.append((rank, orbit))
        if candidates:
            candidates.sort(key=lambda c: c[0])
            orbit = candidates[0][1]
            return BranchDecision("unit", trip.id, orbit, "cover demand")
    free_x = any(
        idx not in node.f1 and idx not in node.f0 for idx in m.x_index.values()
    )
    if not free_x:
        for trip in g.trips:
            present = [
                uid
                for (aid, uid), idx in m.x_index.items()
                if idx in node.f1 and g.arc(aid).src == trip.id
            ]
            if len(set(present)) >= 2:
                return BranchDecision("theta", trip.id, None, "order dichotomy on a present pair")
    return BranchDecision("none", None, None, "nothing undecided")


# ---------------------------------------------------------------------------
# relaxation backends


class RelaxationBackend:
    """Bound provider contract.

    ``bound(m, f1, f0)`` must return a valid lower bound (minimization) on
    any completion of the given fixing sets.  ``lp_relaxation`` marks
    backends that solve a continuous relaxation; ``full_milp`` marks ones
    that could prove optimality on their own.  External solvers can be
    adapted behind this interface by exporting the instance with
    :func:`unitsched.model.export_lp`, applying the fixings as bounds, and
    reading the relaxation value back.
    """

    lp_relaxation = False
    full_milp = False

    def bound(self, m: MilpInstance, f1: frozenset[int], f0: frozenset[int]) -> Number:
        raise NotImplementedError


class CombinatorialBackend(RelaxationBackend):
    """Dependency-free bound from demand covering and fleet concurrency.

    Bound = cost of the fixed flows, plus for every trip a cheapest-type
    top-up of its uncovered demand, plus the fixed-cost gap between units
    already dispatched and the peak number of concurrently needed units.
    Preference rewards (W4..W6 tables, W7) disable the look-ahead terms so
    the bound stays valid.
    """

    def __init__(self):
        self._static: dict[int, Number] = {}

    def bound(self, m: MilpInstance, f1: frozenset[int], f0: frozenset[int]) -> Number:
        g = m.graph
        fleet = m.fleet
        w = m.weights
        cost: Number = 0
        signed = 0
        covered: dict[str, int] = {t.id: 0 for t in g.trips}
        for idx in f1:
            var = m.variables[idx]
            if var.kind != "x":
                continue
            aid, uid = var.key
            arc = g.arc(aid)
            type_id = fleet.units[uid].type_id
            if arc.kind == SIGN_ON:
                cost += w.W1
                signed += 1
            if arc.src != SOURCE:
                trip = g.timetable.trip(arc.src)
                cost += w.W2 * w.trip_mileage(type_id, trip)
                covered[arc.src] += fleet.type_of(uid).capacity
            if arc.empty_running:
                cost += w.W3
        if _has_rewards(m):
            return cost - _max_rewards(m)
        cost += _topup_mileage(m, covered)
        cost += w.W1 * max(0, concurrency_floor(m) - signed)
        return cost


def _has_rewards(m: MilpInstance) -> bool:
    w = m.weights
    return bool(
        (w.W4 and w.gap_preference)
        or (w.W5 and w.trip_preference)
        or (w.W6 and w.signon_preference)
    )


def _max_rewards(m: MilpInstance) -> Number:
    w = m.weights
    total: Number = 0
    for (aid, uid), _ in m.x_index.items():
        arc = m.graph.arc(aid)
        type_id = m.fleet.units[uid].type_id
        if arc.kind == TURNAROUND:
            total += abs(w.W4 * w.gap_preference.get((type_id, aid), 0))
        if arc.src != SOURCE:
            total += abs(w.W5 * w.trip_preference.get((type_id, arc.src), 0))
        if arc.kind in (SIGN_ON, SIGN_OFF):
            total += abs(w.W6 * w.signon_preference.get((type_id, aid), 0))
    return total


def _topup_mileage(m: MilpInstance, covered: Mapping[str, int]) -> Number:
    w = m.weights
    fleet = m.fleet
    total: Number = 0
    for trip in m.graph.trips:
        short = trip.demand - covered.get(trip.id, 0)
        if short <= 0:
            continue
        types = fleet.allowed_types(trip.id)
        caps = [fleet.unit_type(t).capacity for t in types]
        mus = [w.trip_mileage(t, trip) for t in types]
        if not caps:
            continue
        need = -(-short // max(caps))
        total += w.W2 * need * min(mus)
    return total


def concurrency_floor(m: MilpInstance) -> int:
    """Peak over time of the summed minimum unit counts of active trips."""
    fleet = m.fleet
    needs = []
    for trip in m.graph.trips:
        types = fleet.allowed_types(trip.id)
        caps = [fleet.unit_type(t).capacity for t in types]
        if not caps or trip.demand <= 0:
            n = 1 if trip.demand > 0 else 0
        else:
            n = -(-trip.demand // max(caps))
        needs.append((trip.dep_time, trip.arr_time, max(n, 1)))
    best = 0
    for t, _, _ in needs:
        active = sum(n for dep, arr, n in needs if dep <= t < arr)
        best = max(best, active)
    return best


class ScipyLpBackend(RelaxationBackend):
    """Optional LP-relaxation bound over the materialized linear rows.

    Solves the continuous relaxation of the structural and order rows with
    scipy's HiGHS interface; a relaxation over a row subset is still a valid
    lower bound.  Only available when scipy is importable.
    """

    lp_relaxation = True

    def bound(self, m: MilpInstance, f1: frozenset[int], f0: frozenset[int]) -> Number:
        import numpy as np
        from scipy.optimize import linprog

        n = m.num_vars
        c = np.zeros(n)
        for idx, coeff in m.objective.items():
            c[idx] = float(coeff)
        a_ub, b_ub, a_eq, b_eq = [], [], [], []
        for rowc in m.rows:
            dense = np.zeros(n)
            for idx, coeff in rowc.terms:
                dense[idx] = float(coeff)
            if rowc.sense == "<=":
                a_ub.append(dense)
                b_ub.append(float(rowc.rhs))
            elif rowc.sense == ">=":
                a_ub.append(-dense)
                b_ub.append(-float(rowc.rhs))
            else:
                a_eq.append(dense)
                b_eq.append(float(rowc.rhs))
        bounds = []
        for var in m.variables:
            lo, hi = float(var.lb), float(var.ub)
            if var.index in f1:
                lo = hi = 1.0
            elif var.index in f0:
                lo = hi = 0.0
            bounds.append((lo, hi))
        res = linprog(
            c,
            A_ub=np.array(a_ub) if a_ub else None,
            b_ub=np.array(b_ub) if b_ub else None,
            A_eq=np.array(a_eq) if a_eq else None,
            b_eq=np.array(b_eq) if b_eq else None,
            bounds=bounds,
            method="highs",
        )
        if not res.success:
            return Fraction(10**12)  # infeasible fixings prune themselves
        return Fraction(str(res.fun)).limit_denominator(10**9)


# ---------------------------------------------------------------------------
# solve options / result


@dataclass(frozen=True)
class SolveOptions:
    orbital: bool = True
    deterministic: bool = True
    node_budget: Optional[int] = None
    census: bool = False  # exhaustive walk, no pruning; counts assignments
    dive_first: bool = True
    collect_log: bool = True
    log_limit: int = 100000


@dataclass
class SolveResult:
    status: str  # optimal | feasible | infeasible | unknown
    objective: Optional[Number] = None
    vector: Optional[list] = None
    schedule: Optional[UnitSchedule] = None
    nodes: int = 0
    assignments: int = 0
    proof: str = "none"  # optimal | feasible | none
    log: list[str] = field(default_factory=list)
    message: str = ""
    assignment_paths: Optional[list] = None  # census mode: every leaf


# ---------------------------------------------------------------------------
# engine internals


@dataclass(frozen=True)
class _Option:
    arc: Arc
    members: tuple[int, ...]  # unit ids, ascending; orbital class or singleton
    fresh: bool
    cost: Number
    covers: bool


class _Node:
    __slots__ = (
        "trip_idx",
        "rank",
        "chosen",
        "pos",
        "paths",
        "used_by_type",
        "signed",
        "mileage",
        "empties",
        "depth",
        "action",
        "bound",
        "options",
    )

    def __init__(self, trip_idx, rank, chosen, pos, paths, used_by_type, signed, mileage, empties, depth, action):
        self.trip_idx = trip_idx
        self.rank = rank
        self.chosen = chosen  # tuple[(uid, aid), ...] for the current trip
        self.pos = pos  # dict uid -> trip id (last served); absent = depot
        self.paths = paths  # dict uid -> tuple of trips
        self.used_by_type = used_by_type  # dict type -> count signed on
        self.signed = signed
        self.mileage = mileage
        self.empties = empties
        self.depth = depth
        self.action = action
        self.bound: Number = 0
        self.options: Optional[list[_Option]] = None


def _class_key(paths: Mapping[int, tuple], uid: int, fleet: FleetConfig) -> tuple:
    return (fleet.units[uid].type_id, paths.get(uid, ()))


class _Engine:
    def __init__(self, m: MilpInstance, backend: RelaxationBackend, opts: SolveOptions):
        self.m = m
        self.g = m.graph
        self.fleet = m.fleet
        self.tt = m.graph.timetable
        self.opts = opts
        self.backend = backend
        self.trips = self.g.trips
        self.w = m.weights
        self.conc_floor = concurrency_floor(m)
        self.has_rewards = _has_rewards(m) or bool(m.weights.W7 and (m.options.blockflow or m.z_index))
        self.max_reward = _max_rewards(m)
        self.incumbent: Optional[SolveResult] = None
        self.nodes = 0
        self.assignments = 0
        self.log: list[str] = []
        self.assignment_paths: list = [] if opts.census else None
        fam_caps = [f.max_units for f in self.fleet.families]
        self.formation_cap = max(fam_caps) if (m.options.families and fam_caps) else self.fleet.total_fleet
        # static per-trip cheapest top-up mileage for the look-ahead bound
        self._trip_floor: dict[str, Number] = {}
        for trip in self.trips:
            types = self.fleet.allowed_types(trip.id)
            caps = [self.fleet.unit_type(t).capacity for t in types]
            mus = [self.w.trip_mileage(t, trip) for t in types]
            if caps and trip.demand > 0:
                self._trip_floor[trip.id] = self.w.W2 * (-(-trip.demand // max(caps))) * min(mus)
            else:
                self._trip_floor[trip.id] = 0

    # -- options -----------------------------------------------------------

    def _options_for(self, node: _Node) -> list[_Option]:
        trip = self.trips[node.trip_idx]
        allowed = self.fleet.allowed_types(trip.id)
        classes: dict[tuple, list[int]] = {}
        for unit in self.fleet.units:
            if unit.type_id not in allowed:
                continue
            pos = node.pos.get(unit.uid)
            if pos is None:
                arc = None
                try:
                    arc = self.g.sign_on_arc(trip.id)
                except KeyError:
                    continue
                if unit.type_id not in arc.allowed_types:
                    continue
            else:
                arc = self.g.turnaround_arc(pos, trip.id)
                if arc is None or unit.type_id not in arc.allowed_types:
                    continue
            if self.opts.orbital:
                key = (arc.aid,) + _class_key(node.paths, unit.uid, self.fleet)
            else:
                key = (arc.aid, unit.uid)
            classes.setdefault(key, []).append(unit.uid)

        options = []
        for key, uids in classes.items():
            aid = key[0]
            arc = self.g.arc(aid)
            uids.sort()
            type_id = self.fleet.units[uids[0]].type_id
            ut = self.fleet.unit_type(type_id)
            fresh = arc.kind == SIGN_ON
            cost: Number = self.w.W2 * self.w.trip_mileage(type_id, trip)
            if fresh:
                cost += self.w.W1
            if arc.empty_running:
                cost += self.w.W3
            covers = ut.capacity >= trip.demand
            options.append(_Option(arc, tuple(uids), fresh, cost, covers))

        remaining_fleet = {
            ut.id: ut.fleet_size - node.used_by_type.get(ut.id, 0) for ut in self.fleet.unit_types
        }
        options.sort(
            key=lambda o: (
                o.cost,
                0 if o.covers else 1,
                -remaining_fleet[self.fleet.units[o.members[0]].type_id],
                o.arc.aid,
                o.members[0],
            )
        )
        return options

    # -- constraint filters --------------------------------------------------

    def _family_ok(self, types: list[str], cars: int) -> bool:
        if not self.m.options.families:
            return True
        for fam in self.fleet.families:
            if all(t in fam.types for t in types) and len(types) <= fam.max_units and cars <= fam.max_cars:
                return True
        return False

    def _take_ok(self, node: _Node, option: _Option, uid: int) -> bool:
        trip = self.trips[node.trip_idx]
        if len(node.chosen) >= self.formation_cap:
            return False
        types = [self.fleet.units[u].type_id for u, _ in node.chosen] + [self.fleet.units[uid].type_id]
        cars = sum(self.fleet.unit_type(t).num_cars for t in types)
        if not self._family_ok(types, cars):
            return False
        lengths = [
            self.fleet.platform_length(s)
            for s in (trip.dep_station, trip.arr_station)
            if self.fleet.platform_length(s) is not None
        ]
        if self.m.options.platform and lengths:
            total_len = sum(self.fleet.unit_type(t).length for t in types)
            if total_len > min(lengths):
                return False
        rules = self.fleet.station_rules.get(trip.dep_station)
        if rules is not None and rules.coupling_banned_departure and node.chosen:
            if node.chosen[0][1] != option.arc.aid:
                return False
        # arrival-side decoupling ban at the unit's previous trip
        pos = node.pos.get(uid)
        if pos is not None:
            prev = self.tt.trip(pos)
            prules = self.fleet.station_rules.get(prev.arr_station)
            if prules is not None and prules.coupling_banned_arrival:
                for other, opath in node.paths.items():
                    if other == uid or pos not in opath:
                        continue
                    k = opath.index(pos)
                    if k + 1 < len(opath):
                        nxt = opath[k + 1]
                        if self.g.turnaround_arc(pos, nxt) is not None and nxt != trip.id:
                            return False
        return True

    # -- bounding ------------------------------------------------------------

    def _bound(self, node: _Node) -> Number:
        cost = self.w.W1 * node.signed + self.w.W2 * node.mileage + self.w.W3 * node.empties
        if self.has_rewards:
            return cost - self.max_reward
        togo: Number = 0
        trip = self.trips[node.trip_idx] if node.trip_idx < len(self.trips) else None
        if trip is not None:
            cap_now = sum(self.fleet.type_of(u).capacity for u, _ in node.chosen)
            short = trip.demand - cap_now
            if short > 0:
                types = self.fleet.allowed_types(trip.id)
                caps = [self.fleet.unit_type(t).capacity for t in types]
                mus = [self.w.trip_mileage(t, trip) for t in types]
                if caps:
                    togo += self.w.W2 * (-(-short // max(caps))) * min(mus)
        for k in range(node.trip_idx + 1, len(self.trips)):
            togo += self._trip_floor[self.trips[k].id]
        togo += self.w.W1 * max(0, self.conc_floor - node.signed)
        return cost + togo

    # -- leaf handling ---------------------------------------------------------

    def _assemble_candidate(self, node: _Node) -> Optional[tuple[Number, list, UnitSchedule]]:
        paths = {u.uid: node.paths.get(u.uid, ()) for u in self.fleet.units}
        theta = complete_orders(paths, self.tt, self.g)
        if theta is None:
            return None
        vec = assemble_vector(self.m, paths, theta)
        problems = self.m.check(vec)
        if problems:
            soft = ("couple_time", "block_link", "couple_ban", "decouple_ban", "platform", "family", "demand")
            if all(any(p.split("row ")[-1].startswith(s) for s in soft) for p in problems):
                return None
            raise SolverInternalError(f"engine produced an invalid candidate: {problems[:5]}")
        obj = self.m.objective_value(vec)
        schedule = UnitSchedule(paths={k: v for k, v in paths.items()}, orders=theta)
        oracle_violations = verify(schedule, self.tt, self.fleet, self.g)
        blocking = [v for v in oracle_violations if v.kind not in ("coverage",)]
        if any(self.tt.trip(t.id).demand > 0 for t in self.tt) and blocking:
            raise SolverInternalError(
                f"candidate passed rows but failed the independent check: {blocking[:3]}"
            )
        return obj, vec, schedule

    def _log(self, node: _Node):
        if not self.opts.collect_log or len(self.log) >= self.opts.log_limit:
            return
        if node.options is not None:
            sizes = "|".join(str(len(o.members)) for o in node.options)
        else:
            sizes = ""
        self.log.append(f"{node.depth},{node.bound},{sizes},{node.action}")

    # -- main loop ---------------------------------------------------------------

    def run(self) -> SolveResult:
        root = _Node(0, 0, (), {}, {}, {}, 0, 0, 0, 0, "root")
        root.bound = self._bound(root)
        counter = itertools.count()
        frontier: list = [(root.bound, next(counter), root)]
        heap_mode = False
        best_obj: Optional[Number] = None

        def push(node: _Node):
            entry = (node.bound, next(counter), node)
            if heap_mode:
                heapq.heappush(frontier, entry)
            else:
                frontier.append(entry)

        while frontier:
            if self.opts.node_budget is not None and self.nodes >= self.opts.node_budget:
                return self._finish(budget_exhausted=True)
            if heap_mode:
                _, _, node = heapq.heappop(frontier)
            else:
                _, _, node = frontier.pop()
            self.nodes += 1
            if not self.opts.census and best_obj is not None and node.bound >= best_obj:
                self._log(node)
                continue

            if node.trip_idx >= len(self.trips):
                self.assignments += 1
                self._log(node)
                if self.opts.census:
                    paths = {u.uid: node.paths.get(u.uid, ()) for u in self.fleet.units}
                    feasible = complete_orders(paths, self.tt, self.g) is not None
                    self.assignment_paths.append((paths, feasible))
                    continue
                candidate = self._assemble_candidate(node)
                if candidate is None:
                    continue
                obj, vec, schedule = candidate
                if best_obj is None or obj < best_obj:
                    best_obj = obj
                    self.incumbent = SolveResult(
                        status="feasible",
                        objective=obj,
                        vector=vec,
                        schedule=schedule,
                        proof="feasible",
                    )
                    if not heap_mode and self.opts.dive_first:
                        frontier = [e for e in frontier if self.opts.census or e[2].bound < best_obj]
                        heapq.heapify(frontier)
                        heap_mode = True
                continue

            if node.options is None:
                node.options = self._options_for(node)
            self._log(node)
            trip = self.trips[node.trip_idx]
            cap_now = sum(self.fleet.type_of(u).capacity for u, _ in node.chosen)
            demand_met = cap_now >= trip.demand

            children: list[_Node] = []
            if node.rank >= len(node.options):
                if demand_met:
                    child = self._close(node)
                    if child is not None:
                        children.append(child)
            else:
                option = node.options[node.rank]
                taken = {u for u, _ in node.chosen}
                free = [u for u in option.members if u not in taken]
                skip_rank = node.rank + 1
                take_rank = node.rank if (self.opts.orbital and len(free) > 1) else node.rank + 1

                skip = _Node(
                    node.trip_idx, skip_rank, node.chosen, node.pos, node.paths,
                    node.used_by_type, node.signed, node.mileage, node.empties,
                    node.depth + 1, f"skip:t{trip.id}:a{option.arc.aid}",
                )
                skip.options = node.options
                skip.bound = node.bound
                children.append(skip)

                if free:
                    uid = free[0]
                    if self._take_ok(node, option, uid):
                        take = _Node(
                            node.trip_idx, take_rank, node.chosen + ((uid, option.arc.aid),),
                            node.pos, node.paths, node.used_by_type,
                            node.signed + (1 if option.fresh else 0),
                            node.mileage + self.w.trip_mileage(self.fleet.units[uid].type_id, trip),
                            node.empties + (1 if option.arc.empty_running else 0),
                            node.depth + 1, f"take:t{trip.id}:a{option.arc.aid}:h{uid}",
                        )
                        take.options = node.options
                        take.bound = self._bound(take)
                        children.append(take)
                # prefer the child that makes covering progress when diving
                if not heap_mode:
                    if demand_met:
                        children.sort(key=lambda c: 0 if c.action.startswith("take") else 1)
                    else:
                        children.sort(key=lambda c: 0 if c.action.startswith("skip") else 1)

            for child in children:
                if not self.opts.census and best_obj is not None and child.bound >= best_obj:
                    continue
                push(child)

        return self._finish(budget_exhausted=False)

    def _close(self, node: _Node) -> Optional[_Node]:
        trip = self.trips[node.trip_idx]
        if trip.demand > 0 and not node.chosen:
            return None
        pos = dict(node.pos)
        paths = dict(node.paths)
        used = dict(node.used_by_type)
        for uid, aid in node.chosen:
            arc = self.g.arc(aid)
            if arc.kind == SIGN_ON:
                t_id = self.fleet.units[uid].type_id
                used[t_id] = used.get(t_id, 0) + 1
                if used[t_id] > self.fleet.unit_type(t_id).fleet_size:
                    return None
            pos[uid] = trip.id
            paths[uid] = paths.get(uid, ()) + (trip.id,)
        child = _Node(
            node.trip_idx + 1, 0, (), pos, paths, used,
            node.signed, node.mileage, node.empties,
            node.depth + 1, f"close:t{trip.id}:q{len(node.chosen)}",
        )
        child.bound = self._bound(child)
        if not self.opts.census or True:
            if not prefix_consistent(paths, self.tt, self.g):
                return None
        return child

    def _finish(self, budget_exhausted: bool) -> SolveResult:
        if self.opts.census:
            res = SolveResult(status="unknown", proof="none")
            res.assignment_paths = self.assignment_paths
        elif self.incumbent is not None:
            res = self.incumbent
            if budget_exhausted:
                res.status = "feasible"
                res.proof = "feasible"
                res.message = "node budget exhausted; best incumbent returned"
            else:
                res.status = "optimal"
                res.proof = "optimal"
        else:
            if budget_exhausted:
                res = SolveResult(status="unknown", proof="none", message="node budget exhausted without incumbent")
            else:
                res = SolveResult(status="infeasible", proof="none", message="search tree exhausted: no feasible assignment")
        res.nodes = self.nodes
        res.assignments = self.assignments
        res.log = self.log
        return res


# ---------------------------------------------------------------------------
# public API


def solve(
    m: MilpInstance,
    backend: Optional[RelaxationBackend] = None,
    opts: Optional[SolveOptions] = None,
) -> SolveResult:
    """Branch-and-bound search for a proven-optimal schedule.

    Returns the incumbent with ``proof='optimal'`` when the tree is
    exhausted, the best feasible one with ``proof='feasible'`` when the node
    budget runs out first, or an infeasibility verdict on an exhausted empty
    tree.  Deterministic by default: fixed option order, representative =
    lowest unit id, best-bound frontier with FIFO tie-break after an initial
    depth-first dive."""
    opts = opts or SolveOptions()
    backend = backend or CombinatorialBackend()
    engine = _Engine(m, backend, opts)
    return engine.run()


def assemble_vector(m: MilpInstance, paths: Mapping[int, Sequence[str]], theta: Mapping[tuple[str, int], int]) -> list:
    """Build a full assignment vector from unit paths and coupling orders.

    z variables are set minimally from the flows (plus the forced choice at
    coupling-ban stations), y variables pick the first family compatible
    with each trip's formation."""
    g = m.graph
    fleet = m.fleet
    vec = [0] * m.num_vars
    for uid in sorted(paths):
        path = list(paths[uid])
        if not path:
            continue
        arcs = [g.sign_on_arc(path[0])]
        for i, j in zip(path, path[1:]):
            arc = g.turnaround_arc(i, j)
            if arc is None:
                raise ValueError(f"no arc {i}->{j} for unit {uid}")
            arcs.append(arc)
        arcs.append(g.sign_off_arc(path[-1]))
        for arc in arcs:
            vec[m.x(arc.aid, uid)] = 1
    for (trip_id, uid), idx in m.theta_index.items():
        vec[idx] = theta.get((trip_id, uid), 0)
    for (trip_id, h1, h2), idx in m.u_index.items():
        t1, t2 = theta.get((trip_id, h1), 0), theta.get((trip_id, h2), 0)
        vec[idx] = 1 if (t1 > 0 and t2 > 0 and t1 > t2) else 0
    if m.y_index:
        riders: dict[str, list[int]] = {}
        for uid, path in paths.items():
            for t in path:
                riders.setdefault(t, []).append(uid)
        for trip in g.trips:
            fams = [f for f in fleet.families if f.types & fleet.allowed_types(trip.id)]
            members = riders.get(trip.id, [])
            types = [fleet.units[u].type_id for u in members]
            cars = sum(fleet.unit_type(t).num_cars for t in types)
            pick = None
            for f in fams:
                if all(t in f.types for t in types) and len(types) <= f.max_units and cars <= f.max_cars:
                    pick = f
                    break
            if pick is None and fams:
                pick = fams[0]
            if pick is not None and (trip.id, pick.name) in m.y_index:
                vec[m.y_index[(trip.id, pick.name)]] = 1
    if m.z_index:
        flowed = set()
        for (aid, uid), idx in m.x_index.items():
            if vec[idx]:
                flowed.add(aid)
        for aid, idx in m.z_index.items():
            vec[idx] = 1 if aid in flowed else 0
        # coupling-ban rows need exactly one incident z even without flow
        for trip in g.trips:
            rules = fleet.station_rules.get(trip.dep_station)
            if rules is not None and rules.coupling_banned_departure:
                incident = [a.aid for a in g.delta_minus(trip.id) if a.aid in m.z_index]
                if incident and not any(vec[m.z_index[a]] for a in incident):
                    vec[m.z_index[min(incident)]] = 1
            rules = fleet.station_rules.get(trip.arr_station)
            if rules is not None and rules.coupling_banned_arrival:
                incident = [a.aid for a in g.delta_plus(trip.id) if a.aid in m.z_index]
                if incident and not any(vec[m.z_index[a]] for a in incident):
                    vec[m.z_index[min(incident)]] = 1
    return vec


# ---------------------------------------------------------------------------
# exhaustive reference search (test oracle)


REFERENCE_LIMITS = {"trips": 12, "units": 16, "arcs": 90}


def reference_solve(m: MilpInstance, limits: Optional[dict] = None) -> SolveResult:
    """Exhaustive baseline: enumerate per-trip unit subsets depth-first and
    check coupling orders by explicit permutation against the model rows.

    Guarded to desk-size instances; raises :class:`ReferenceSizeError`
    beyond them.  Independent of :func:`solve`: different enumeration,
    different order handling, shared only the instance data."""
    lim = dict(REFERENCE_LIMITS)
    if limits:
        lim.update(limits)
    g = m.graph
    fleet = m.fleet
    tt = g.timetable
    trips = g.trips
    if len(trips) > lim["trips"] or fleet.total_fleet > lim["units"] or len(g.arcs) > lim["arcs"]:
        raise ReferenceSizeError(
            f"instance ({len(trips)} trips, {fleet.total_fleet} units, {len(g.arcs)} arcs) "
            f"exceeds reference limits {lim}"
        )
    w = m.weights
    order_rows = [
        r
        for r in m.iter_rows()
        if r.tag.split(":", 1)[0]
        in (
            "couple_opposite",
            "couple_same",
            "decouple_opposite",
            "decouple_same",
            "order_propagation",
            "order_lower",
            "order_upper",
            "order_presence",
            "order_alldiff_hi",
            "order_alldiff_lo",
        )
    ]
    fam_caps = [f.max_units for f in fleet.families]
    cap = max(fam_caps) if (m.options.families and fam_caps) else fleet.total_fleet

    best: dict = {"obj": None, "vec": None, "paths": None, "theta": None}
    floor_after = [0] * (len(trips) + 1)
    for k in range(len(trips) - 1, -1, -1):
        trip = trips[k]
        caps = [fleet.unit_type(t).capacity for t in fleet.allowed_types(trip.id)]
        mus = [w.trip_mileage(t, trip) for t in fleet.allowed_types(trip.id)]
        extra = w.W2 * (-(-trip.demand // max(caps))) * min(mus) if caps and trip.demand > 0 else 0
        floor_after[k] = floor_after[k + 1] + extra

    nodes = 0

    def candidates(k: int, pos: dict, used: dict):
        trip = trips[k]
        allowed = fleet.allowed_types(trip.id)
        cands = []
        for unit in fleet.units:
            if unit.type_id not in allowed:
                continue
            p = pos.get(unit.uid)
            if p is None:
                continue
            arc = g.turnaround_arc(p, trip.id)
            if arc is not None and unit.type_id in arc.allowed_types:
                cands.append((unit.uid, arc))
        for ut in fleet.unit_types:
            if ut.id not in allowed:
                continue
            fresh = [
                u.uid for u in fleet.units if u.type_id == ut.id and u.uid not in pos
            ][: cap]
            try:
                arc = g.sign_on_arc(trip.id)
            except KeyError:
                continue
            for uid in fresh:
                cands.append((uid, arc))
        return cands

    def family_ok(uids: Sequence[int]) -> bool:
        if not m.options.families or not uids:
            return True
        types = [fleet.units[u].type_id for u in uids]
        cars = sum(fleet.unit_type(t).num_cars for t in types)
        return any(
            all(t in f.types for t in types) and len(types) <= f.max_units and cars <= f.max_cars
            for f in fleet.families
        )

    def canonical(subset) -> bool:
        # fresh units of a type must be taken in ascending uid order
        fresh_by_type: dict[str, list[int]] = {}
        for uid, arc in subset:
            if arc.kind == SIGN_ON:
                fresh_by_type.setdefault(fleet.units[uid].type_id, []).append(uid)
        for type_id, uids in fresh_by_type.items():
            pool = sorted(
                u.uid for u in fleet.units if u.type_id == type_id and u.uid in available_fresh
            )
            if sorted(uids) != pool[: len(uids)]:
                return False
        return True

    available_fresh: set = set()

    def leaf(paths: dict, cost: Number):
        nonlocal nodes
        # orders by explicit permutation, checked against the model rows
        riders: dict[str, list[int]] = {}
        for uid, path in paths.items():
            for t in path:
                riders.setdefault(t, []).append(uid)
        multi = [t for t in riders if len(riders[t]) > 1]
        base_theta = {
            (t, uids[0]): 1 for t, uids in riders.items() if len(uids) == 1
        }
        perm_space = [
            [(t, perm) for perm in itertools.permutations(sorted(riders[t]))] for t in sorted(multi)
        ]
        for combo in itertools.product(*perm_space) if perm_space else [()]:
            theta = dict(base_theta)
            for t, perm in combo:
                for k, uid in enumerate(perm):
                    theta[(t, uid)] = k + 1
            vec = assemble_vector(m, paths, theta)
            if any(r.violated_by(vec) for r in order_rows):
                continue
            obj = m.objective_value(vec)
            if best["obj"] is None or obj < best["obj"]:
                best.update(obj=obj, vec=vec, paths=dict(paths), theta=theta)
            return

    def walk(k: int, pos: dict, used: dict, paths: dict, cost: Number):
        nonlocal nodes, available_fresh
        nodes += 1
        if best["obj"] is not None and cost + floor_after[k] >= best["obj"]:
            return
        if k == len(trips):
            leaf(paths, cost)
            return
        trip = trips[k]
        cands = candidates(k, pos, used)
        available_fresh = {uid for uid, arc in cands if arc.kind == SIGN_ON}
        max_size = min(cap, len(cands))
        sizes = range(0, max_size + 1) if trip.demand == 0 else range(1, max_size + 1)
        for size in sizes:
            for subset in itertools.combinations(cands, size):
                uids = [uid for uid, _ in subset]
                if len(set(uids)) != size:
                    continue
                cap_sum = sum(fleet.type_of(u).capacity for u in uids)
                if cap_sum < trip.demand:
                    continue
                if not family_ok(uids):
                    continue
                if not canonical(subset):
                    continue
                new_pos = dict(pos)
                new_paths = dict(paths)
                new_used = dict(used)
                add_cost: Number = 0
                ok = True
                for uid, arc in subset:
                    type_id = fleet.units[uid].type_id
                    if arc.kind == SIGN_ON:
                        new_used[type_id] = new_used.get(type_id, 0) + 1
                        if new_used[type_id] > fleet.unit_type(type_id).fleet_size:
                            ok = False
                            break
                        add_cost += w.W1
                    if arc.empty_running:
                        add_cost += w.W3
                    add_cost += w.W2 * w.trip_mileage(type_id, trip)
                    new_pos[uid] = trip.id
                    new_paths[uid] = new_paths.get(uid, ()) + (trip.id,)
                if not ok:
                    continue
                walk(k + 1, new_pos, new_used, new_paths, cost + add_cost)
                available_fresh = {uid for uid, arc in cands if arc.kind == SIGN_ON}

    walk(0, {}, {}, {}, 0)
    if best["obj"] is None:
        return SolveResult(status="infeasible", proof="none", nodes=nodes, message="exhaustive search found no feasible schedule")
    paths = {u.uid: best["paths"].get(u.uid, ()) for u in fleet.units}
    schedule = UnitSchedule(paths=paths, orders=best["theta"])
    return SolveResult(
        status="optimal",
        objective=best["obj"],
        vector=best["vec"],
        schedule=schedule,
        proof="optimal",
        nodes=nodes,
    )
