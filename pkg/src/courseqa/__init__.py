"""Modular question answering for course forums.

Submodules
----------
corpus     data model, JSONL ingestion, synthetic corpus generation
provider   chat/embedding backends, tool calling, record/replay
retrieval  structure-aware hierarchical retrieval and vector baselines
functions  the four course-retrieval tools and their dispatch
pipelines  the seven answer-generation strategies
judge      rubric-based scoring and TA alignment
bench      metric aggregation and reports
cli        operator entry point
"""

__version__ = "0.1.0"
