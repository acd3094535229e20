"""Entity-based multi-agent RL lab with masked-entity inference."""

__version__ = "0.1.0"
