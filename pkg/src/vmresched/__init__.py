"""VM rescheduling workbench: simulator, baselines, exact oracle and a two-stage attention policy."""
from .cluster import (BOTH, VM_TYPES, ClusterState, InfeasibleMigration, InvalidParameter,
                      MigrationAction, MigrationPlan, ValidationError, VirtualMachine,
                      fragment_of_numa, fragment_rate, total_fragments)
from .objectives import ObjectiveSpec, parse_objective

__version__ = "0.1.0"
