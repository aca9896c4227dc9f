"""Hybrid simulation rig: a simulated world drives vehicle AI clients through
emulated inference, and a detector compares their estimates with ground truth."""

__version__ = "0.1.0"
