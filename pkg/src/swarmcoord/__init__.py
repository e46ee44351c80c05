"""Communication-efficient DMPC coordination for simulated UAV swarms."""

__version__ = "0.1.0"
