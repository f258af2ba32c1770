"""Simulator for selective (smart) encryption and counter colocation in CNN accelerators."""

from .crypto import CipherMode
from .memsim import Metrics, SimConfig, derive_timing, simulate
from .model import Model, generate_synthetic
from .planner import EncryptionPlan, build_plan, verify_closure

__version__ = "0.1.0"

__all__ = ["CipherMode", "EncryptionPlan", "Metrics", "Model", "SimConfig", "build_plan",
           "derive_timing", "generate_synthetic", "simulate", "verify_closure"]
