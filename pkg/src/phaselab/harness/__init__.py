"""Experiment orchestration: plans, run ledgers, commands and the CLI."""
