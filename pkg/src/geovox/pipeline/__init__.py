"""Run configuration, persistence, orchestration and reporting."""
