"""Topology-guided selective retraining toolkit.

Scores the layers of a network by the loop structure of their activation
clouds, selects a budgeted subset to unfreeze, and retrains only those.
Ships with a reference dense-network trainer, a Fisher-information baseline
scorer, clustering diagnostics, and a file-based activation exchange format.
"""

__version__ = "0.1.0"

from .errors import AdabetError, DataError, InternalError, UsageError
from .homology import (
    Bar,
    BettiVector,
    PersistenceDiagram,
    betti_at_threshold,
    count_b1,
    enclosing_radius,
    pairwise_distances,
    rips_persistence,
)

__all__ = [
    "AdabetError",
    "DataError",
    "InternalError",
    "UsageError",
    "Bar",
    "BettiVector",
    "PersistenceDiagram",
    "betti_at_threshold",
    "count_b1",
    "enclosing_radius",
    "pairwise_distances",
    "rips_persistence",
    "__version__",
]
