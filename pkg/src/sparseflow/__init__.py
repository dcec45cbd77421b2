"""Event-driven, depth-first simulation of sparse ANN/SNN optical-flow networks
on a multi-core neuromorphic processor model."""

from ._accel import backend_name

__version__ = "0.1.0"
__all__ = ["backend_name", "__version__"]
