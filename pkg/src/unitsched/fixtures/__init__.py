"""Shipped scheduling instances.

``example1`` .. ``example3`` are the synthetic one-day networks, and
``anglo_scottish`` the real-route instance; their connection rules are
calibrated (see each fleet.cfg) so the built graphs have the documented
trip and arc counts: 9/38, 10/54, 30/234 and 32/172.  ``fragment`` is the
two-trip symmetry fragment and ``deadend`` a single-ended-terminus case.
"""

from __future__ import annotations

from pathlib import Path

from ..timetable import FleetConfig, Timetable, parse_fleet_config, parse_timetable

_ROOT = Path(__file__).parent

FIXTURES = ("example1", "example2", "example3", "anglo_scottish", "fragment", "deadend")

# (trips, total arcs) the calibrated connection rules reproduce
EXPECTED_SHAPES = {
    "example1": (9, 38),
    "example2": (10, 54),
    "example3": (30, 234),
    "anglo_scottish": (32, 172),
}


def fixture_dir(name: str) -> Path:
    if name not in FIXTURES:
        raise KeyError(f"unknown fixture {name!r}; have {FIXTURES}")
    return _ROOT / name


def load_fixture(name: str) -> tuple[Timetable, FleetConfig]:
    base = fixture_dir(name)
    return parse_timetable(base / "timetable.csv"), parse_fleet_config(base / "fleet.cfg")
