"""Workbench for comparing self-attention layouts on tabular time-series.

The package trains and probes five encoder layouts over fixed-size grids of
tokenized table cells: a flat single-stage encoder, an interleaved dual-stream
grid encoder, row- and column-hierarchical two-stage encoders, and a
field-hierarchical two-stage encoder that contextualizes every cell along both
its row and its column before a second stage attends over all fields.
"""

__version__ = "0.1.0"
