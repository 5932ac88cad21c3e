"""Evolutionary search over multi-stream, multi-resolution video CNN graphs."""
from .graph import (ArchitectureGraph, BlockNode, Edge, decode_table, encode_table, export_dot,
                    longest_path_depth, parameter_breakdown, parameter_count, validate_graph)
from .schedule import DESK_BUDGET, DESK_SCHEDULE, LayerSchedule

__version__ = "0.1.0"

__all__ = [
    "ArchitectureGraph", "BlockNode", "Edge", "LayerSchedule", "DESK_BUDGET", "DESK_SCHEDULE",
    "decode_table", "encode_table", "export_dot", "longest_path_depth", "parameter_breakdown",
    "parameter_count", "validate_graph",
]
