"""Stream analytics engine around key pointer arrays in two-tier memory.

The fast pool stands in for on-package high-bandwidth memory and the
slow pool for channel DRAM; grouping work runs over compact (key, ref)
arrays placed between the tiers by a feedback knob.
"""
from .model import (
    Aggregate,
    AggregateKind,
    Bundle,
    ImpactTag,
    PoolKind,
    Schema,
    Watermark,
    WindowKind,
    WindowSpec,
    assign_tag,
    assign_windows,
    pane_of,
)

__all__ = [
    "Aggregate",
    "AggregateKind",
    "Bundle",
    "ImpactTag",
    "PoolKind",
    "Schema",
    "Watermark",
    "WindowKind",
    "WindowSpec",
    "assign_tag",
    "assign_windows",
    "pane_of",
]

__version__ = "0.1.0"
