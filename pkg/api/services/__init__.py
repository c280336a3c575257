"""Data, retrieval, prompting, metrics, benchmarking and run orchestration."""
