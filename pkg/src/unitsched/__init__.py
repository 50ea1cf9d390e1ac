"""Train unit scheduling with per-unit coupling-order guarantees.

Assigns individual train units to timetabled trips over a DAG of feasible
connections, decides the coupling order of every unit within each train, and
keeps platform operations blockage-free.  The pipeline is:

    timetable -> scheduling graph -> integer model -> branch and bound
              -> decoded unit schedule -> independent ordering check
"""

from .timetable import (
    FamilyRule,
    FleetConfig,
    StationRules,
    Timetable,
    TimetableError,
    Trip,
    Unit,
    UnitType,
    ValidationReport,
    parse_fleet_config,
    parse_timetable,
    serialize_timetable,
    validate_instance,
)
from .graph import SOURCE, SINK, Arc, SchedulingGraph, build_dag

__version__ = "0.1.0"
