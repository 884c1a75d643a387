"""Hybrid SSM/attention language-model kit: layers, allocation, cost model, tasks."""

__version__ = "0.1.0"
