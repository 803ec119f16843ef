"""Synthetic data, optimiser, training/evaluation loops, configs and file formats."""
