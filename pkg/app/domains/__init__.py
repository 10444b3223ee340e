"""Domain packages: environment pairs, the exact tabular oracle and training records."""
