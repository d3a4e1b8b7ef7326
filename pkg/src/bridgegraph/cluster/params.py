from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class UmapParams:
    n_neighbors: int = 15
    min_dist: float = 0.1
    n_components: int = 2
    n_epochs: int = 200
    learning_rate: float = 1.0
    negative_samples: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_neighbors < 2:
            raise ValueError("n_neighbors must be >= 2")
        if self.min_dist < 0:
            raise ValueError("min_dist must be >= 0")
        if self.n_components != 2:
            raise ValueError("only 2-D embeddings are supported")
        if self.n_epochs < 1:
            raise ValueError("n_epochs must be >= 1")


@dataclass(frozen=True)
class HdbscanParams:
    min_cluster_size: int = 20
    min_samples: int = 10
    selection: str = "eom"

    def __post_init__(self):
        if self.min_cluster_size < 2:
            raise ValueError("min_cluster_size must be >= 2")
        if self.min_samples < 1:
            raise ValueError("min_samples must be >= 1")
        if self.selection != "eom":
            raise ValueError("only Excess-of-Mass selection is implemented")
