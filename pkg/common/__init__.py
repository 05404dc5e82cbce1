"""Graphs, tasks, records and datasets shared by the engine and the cli."""
from .graph import KnowledgeGraph, Triple  # noqa: F401
from .models import TrainConfig  # noqa: F401
