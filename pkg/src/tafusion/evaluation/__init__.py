"""Training loop, metrics, statistical tests, baselines and experiment grids."""
