"""Desk-scale simulator of personalized wireless federated fine-tuning.

Subsystems:
- ``autodiff``: numpy-backed reverse-mode tensor core
- ``model``: tiny transformer LM with adapter/LoRA injection and scoring heads
- ``tasks``: synthetic instruction tasks, oracles, non-IID partitioning
- ``channel``: Shannon-rate delay/energy cost model
- ``fed``: client/server protocol engine and upload strategies
- ``rlhf``: federated reward learning and multi-objective PPO alignment
- ``cli``: experiment orchestrator (``pwff-sim`` entry point)
"""

__version__ = "0.1.0"
