"""mvec: an embeddable, disk-resident, updatable ANN vector store.

Vectors live in a single transactional file clustered into IVF partitions;
new rows stage in a reserved delta partition that every search scans, so
results never miss fresh writes. Hybrid attribute filtering, batch query
execution, and incremental index maintenance are built on the same snapshot
reads.
"""

from .db import Database
from .kernel import Metric
from .storage import DELTA_PARTITION, DbConfig

__all__ = ["Database", "DbConfig", "Metric", "DELTA_PARTITION"]
__version__ = "0.1.0"
