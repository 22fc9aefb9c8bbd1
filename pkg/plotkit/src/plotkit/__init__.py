"""Offline plots for distillation-lab artifacts.

Reads the heatmap CSVs and analysis report JSON emitted by the lab CLI and
renders token-level sensitivity maps and regional-decomposition bar charts.
This package deliberately shares no code with the lab; the text formats are
the contract.
"""

__version__ = "0.1.0"
