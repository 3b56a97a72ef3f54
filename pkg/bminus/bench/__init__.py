"""Benchmark workloads, crash exploration and result output."""
