"""Evidential subnetworks over diffusion-tensor channels, fused by evidence.

Five small convolutional subnetworks, one per input channel (FA, MD and the
three tensor eigenvalues), each output non-negative per-class evidence.  At
every voxel the ensemble adopts the prediction of the subnetwork with the
lowest evidential uncertainty, and reports the entropy of the averaged
beliefs as an uncertainty heatmap.
"""

__version__ = "0.1.0"
