"""Coupling-order completion for integral flow assignments.

Once every unit's trip path is fixed, the within-train order of each trip is
constrained pairwise:

* at a joint trip, feeder directions and arrival times force one unit in
  front of the other (unless a feeder is the depot or times tie);
* at a split trip, onward directions and departure times do the same;
* a pair riding one connection together keeps its relative order when the
  two trips point the same way and flips it otherwise.

Pair orientations are boolean literals; stay-coupled links are parity
(equal / opposite) relations between literals of consecutive trips.  The
system is solved with a parity union-find, then each trip's pair
orientations are assembled into a total order; orientation components left
free by the data are enumerated (lowest unit in front first) until every
trip's tournament is acyclic.  Returns the order map or ``None`` when the
assignment admits no blockage-free ordering.
"""

from __future__ import annotations

import itertools
from typing import Mapping, Optional, Sequence

from .graph import SchedulingGraph, TURNAROUND
from .timetable import Timetable

DEPOT = None  # predecessor / successor marker for sign-on / sign-off


def couple_sign(d_joint: int, d1: int, d2: int, arr1: int, arr2: int) -> int:
    """Required sign of (theta1 - theta2) when two feeders merge, 0 if free."""
    if d1 != d2:
        return 1 if d_joint * (d1 - d2) > 0 else -1
    if arr1 == arr2:
        return 0
    return 1 if d_joint * d1 * (arr1 - arr2) > 0 else -1


def decouple_sign(d_split: int, d1: int, d2: int, dep1: int, dep2: int) -> int:
    """Required sign of (theta1 - theta2) when a formation splits, 0 if free."""
    if d1 != d2:
        return -1 if d_split * (d1 - d2) > 0 else 1
    if dep1 == dep2:
        return 0
    return 1 if d_split * d1 * (dep1 - dep2) > 0 else -1


class _ParityUnionFind:
    """Union-find over literals with edge parity (0 equal, 1 opposite)."""

    def __init__(self):
        self.parent: dict = {}
        self.parity: dict = {}  # parity of key relative to its parent

    def add(self, key):
        if key not in self.parent:
            self.parent[key] = key
            self.parity[key] = 0

    def find(self, key):
        self.add(key)
        root, par = key, 0
        while self.parent[root] != root:
            par ^= self.parity[root]
            root = self.parent[root]
        # path compression
        node, acc = key, par
        while self.parent[node] != node:
            nxt, p = self.parent[node], self.parity[node]
            self.parent[node], self.parity[node] = root, acc
            acc ^= p
            node = nxt
        return root, par

    def union(self, a, b, parity: int) -> bool:
        """Assert a == b (parity 0) or a != b (parity 1); False on conflict."""
        ra, pa = self.find(a)
        rb, pb = self.find(b)
        if ra == rb:
            return (pa ^ pb) == parity
        self.parent[rb] = ra
        self.parity[rb] = pa ^ parity ^ pb
        return True


def _pair_constraints(
    paths: Mapping[int, Sequence[str]],
    tt: Timetable,
    g: SchedulingGraph,
):
    """Derive (forced, parity_edges, trip_pairs, ties).

    forced: {(trip, h1, h2): sign}; parity edges: ((key_i, key_j), parity);
    trip_pairs: {trip: [(h1, h2), ...]}; ties: advisory (trip, h1, h2) where
    equal times made a constraint vacuous.
    """
    units_on: dict[str, list[int]] = {}
    pred: dict[tuple[str, int], Optional[str]] = {}
    succ: dict[tuple[str, int], Optional[str]] = {}
    for uid in sorted(paths):
        path = list(paths[uid])
        for k, trip_id in enumerate(path):
            units_on.setdefault(trip_id, []).append(uid)
            pred[(trip_id, uid)] = path[k - 1] if k > 0 else DEPOT
            succ[(trip_id, uid)] = path[k + 1] if k + 1 < len(path) else DEPOT

    forced: dict[tuple[str, int, int], int] = {}
    edges: list[tuple[tuple, tuple, int]] = []
    trip_pairs: dict[str, list[tuple[int, int]]] = {}
    ties: list[tuple[str, int, int, str]] = []
    conflict: list[tuple[str, int, int]] = []

    def force(key, sign):
        old = forced.get(key)
        if old is not None and old != sign:
            conflict.append(key)
        else:
            forced[key] = sign

    def shunted(i: str, j: str) -> bool:
        arc = g.turnaround_arc(i, j)
        return arc is not None and arc.shunt_allowed

    for trip_id, members in units_on.items():
        trip = tt.trip(trip_id)
        pairs = list(itertools.combinations(sorted(members), 2))
        trip_pairs[trip_id] = pairs
        for h1, h2 in pairs:
            key = (trip_id, h1, h2)
            p1, p2 = pred[(trip_id, h1)], pred[(trip_id, h2)]
            if p1 is not DEPOT and p2 is not DEPOT and p1 != p2:
                if not shunted(p1, trip_id) and not shunted(p2, trip_id):
                    t1, t2 = tt.trip(p1), tt.trip(p2)
                    s = couple_sign(trip.direction, t1.direction, t2.direction, t1.arr_time, t2.arr_time)
                    if s:
                        force(key, s)
                    elif t1.direction == t2.direction:
                        ties.append((trip_id, h1, h2, "arrival-tie"))
            s1, s2 = succ[(trip_id, h1)], succ[(trip_id, h2)]
            if s1 is not DEPOT and s2 is not DEPOT and s1 != s2:
                if not shunted(trip_id, s1) and not shunted(trip_id, s2):
                    t1, t2 = tt.trip(s1), tt.trip(s2)
                    s = decouple_sign(trip.direction, t1.direction, t2.direction, t1.dep_time, t2.dep_time)
                    if s:
                        force(key, s)
                    elif t1.direction == t2.direction:
                        ties.append((trip_id, h1, h2, "departure-tie"))
            if s1 is not DEPOT and s1 == s2 and not shunted(trip_id, s1):
                nxt = tt.trip(s1)
                parity = 0 if trip.direction == nxt.direction else 1
                edges.append((key, (s1, h1, h2), parity))

    if conflict:
        return None
    return forced, edges, trip_pairs, ties


def _assemble(trip_pairs, orientation, paths) -> Optional[dict[tuple[str, int], int]]:
    """Turn pair orientations into per-trip positions; None if some trip
    has a cyclic tournament."""
    theta: dict[tuple[str, int], int] = {}
    for trip_id, pairs in trip_pairs.items():
        members = sorted({h for p in pairs for h in p})
        if not members:
            continue
        behind_count = {h: 0 for h in members}
        for h1, h2 in pairs:
            s = orientation[(trip_id, h1, h2)]
            # s = sign(theta1 - theta2); +1 puts h1 behind h2
            if s > 0:
                behind_count[h1] += 1
            else:
                behind_count[h2] += 1
        ranks = sorted(behind_count.values())
        if ranks != list(range(len(members))):
            return None  # cyclic tournament
        for h, behind in behind_count.items():
            theta[(trip_id, h)] = behind + 1
    return theta


def complete_orders(
    paths: Mapping[int, Sequence[str]],
    tt: Timetable,
    g: SchedulingGraph,
) -> Optional[dict[tuple[str, int], int]]:
    """Assign coupling orders to a full set of unit paths.

    Returns {(trip, uid): theta} covering every trip a unit rides (single
    riders get theta=1), or ``None`` when the paths force a blockage.
    Deterministic: free orientation components are tried lowest-unit-front
    first.  Free components touching disjoint trip sets are enumerated
    independently, so the search stays local to each coupled formation.
    """
    derived = _pair_constraints(paths, tt, g)
    if derived is None:
        return None
    forced, edges, trip_pairs, _ties = derived

    uf = _ParityUnionFind()
    for key_i, key_j, parity in edges:
        if not uf.union(key_i, key_j, parity):
            return None

    # component value: orientation of the component root literal
    comp_value: dict = {}
    for key, sign in forced.items():
        root, par = uf.find(key)
        want = (1 if sign > 0 else 0) ^ par
        if root in comp_value and comp_value[root] != want:
            return None
        comp_value[root] = want

    key_root: dict[tuple, tuple] = {}
    key_par: dict[tuple, int] = {}
    for trip_id, pairs in trip_pairs.items():
        for h1, h2 in pairs:
            key = (trip_id, h1, h2)
            key_root[key], key_par[key] = uf.find(key)

    # trips whose pairs are all forced can be assembled outright
    free_by_trip: dict[str, list] = {}
    for key, root in key_root.items():
        if root not in comp_value:
            free_by_trip.setdefault(key[0], []).append(root)

    def orient(key, assign) -> int:
        root = key_root[key]
        base = comp_value.get(root)
        if base is None:
            base = assign[root]
        return 1 if (base ^ key_par[key]) else -1

    theta: dict[tuple[str, int], int] = {}
    fixed_trips = [tid for tid in trip_pairs if tid not in free_by_trip]
    if fixed_trips:
        orientation = {
            (tid, h1, h2): orient((tid, h1, h2), {})
            for tid in fixed_trips
            for h1, h2 in trip_pairs[tid]
        }
        part = _assemble({tid: trip_pairs[tid] for tid in fixed_trips}, orientation, paths)
        if part is None:
            return None
        theta.update(part)

    # group free roots into components that share a trip, enumerate each
    root_trips: dict[tuple, set[str]] = {}
    for tid, roots in free_by_trip.items():
        for r in roots:
            root_trips.setdefault(r, set()).add(tid)
    unseen = sorted(root_trips)
    while unseen:
        comp_roots = [unseen[0]]
        comp_trips = set(root_trips[unseen[0]])
        grew = True
        while grew:
            grew = False
            for r in unseen:
                if r not in comp_roots and root_trips[r] & comp_trips:
                    comp_roots.append(r)
                    comp_trips |= root_trips[r]
                    grew = True
        comp_roots.sort()
        unseen = [r for r in unseen if r not in comp_roots]
        sub_pairs = {tid: trip_pairs[tid] for tid in sorted(comp_trips)}
        solved = None
        for bits in itertools.product((0, 1), repeat=len(comp_roots)):
            assign = dict(zip(comp_roots, bits))
            orientation = {
                (tid, h1, h2): orient((tid, h1, h2), assign)
                for tid in sub_pairs
                for h1, h2 in sub_pairs[tid]
            }
            solved = _assemble(sub_pairs, orientation, paths)
            if solved is not None:
                break
        if solved is None:
            return None
        theta.update(solved)

    for uid in sorted(paths):
        for trip_id in paths[uid]:
            theta.setdefault((trip_id, uid), 1)
    return theta


def prefix_consistent(
    paths: Mapping[int, Sequence[str]],
    tt: Timetable,
    g: SchedulingGraph,
) -> bool:
    """Cheap necessary check on a partial assignment: the parity system of
    the constraints visible so far must be conflict-free.  (Unknown onward
    moves impose nothing yet, so this never rejects an extendable prefix.)"""
    derived = _pair_constraints(paths, tt, g)
    if derived is None:
        return False
    forced, edges, trip_pairs, _ties = derived
    uf = _ParityUnionFind()
    for key_i, key_j, parity in edges:
        if not uf.union(key_i, key_j, parity):
            return False
    comp_value: dict = {}
    for key, sign in forced.items():
        root, par = uf.find(key)
        want = (1 if sign > 0 else 0) ^ par
        if root in comp_value and comp_value[root] != want:
            return False
        comp_value[root] = want
    # fully forced trips must already be acyclic
    orientation = {}
    for trip_id, pairs in trip_pairs.items():
        for h1, h2 in pairs:
            key = (trip_id, h1, h2)
            root, par = uf.find(key)
            if root in comp_value:
                orientation[key] = 1 if (comp_value[root] ^ par) else -1
    for trip_id, pairs in trip_pairs.items():
        if pairs and all((trip_id, h1, h2) in orientation for h1, h2 in pairs):
            sub = {trip_id: pairs}
            if _assemble(sub, orientation, paths) is None:
                return False
    return True
