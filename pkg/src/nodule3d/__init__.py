"""Volumetric CNN engine and CT lung-nodule screening pipeline."""

from .network import NetworkSpec, build_network, canonical_spec, small_spec
from .optim import OptimizerState, nesterov_step
from .volume_io import Annotation, Category, ScanMeta, Volume, read_mhd, write_mhd

__version__ = "0.1.0"
