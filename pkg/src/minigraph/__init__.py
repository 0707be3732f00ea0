"""Distributed minibatch GNN training with a historical embedding cache.

The package trains GraphSAGE and GAT models over partitioned graphs. Each
rank samples minibatches from its own partition, reads remote (halo)
embeddings from a per-layer historical embedding cache, and pushes its own
boundary embeddings to other ranks asynchronously with a fixed delay.
"""

from minigraph.errors import CommError, ConfigError, ParseError, ProtocolError, ShapeError
from minigraph.graph import CsrGraph, generate_sbm, load_graph, save_graph
from minigraph.hec import DbHalo, Hec, create_db, map_solids, sample_by_degree
from minigraph.partition import Partition, import_partition_assignment, partition
from minigraph.sampler import Block, Minibatch, create_minibatches, sample_blocks
from minigraph.trainer import TrainConfig, run_training

__version__ = "0.1.0"

__all__ = [
    "Block",
    "CommError",
    "ConfigError",
    "CsrGraph",
    "DbHalo",
    "Hec",
    "Minibatch",
    "ParseError",
    "Partition",
    "ProtocolError",
    "ShapeError",
    "TrainConfig",
    "create_db",
    "create_minibatches",
    "generate_sbm",
    "import_partition_assignment",
    "load_graph",
    "map_solids",
    "partition",
    "run_training",
    "sample_blocks",
    "sample_by_degree",
    "save_graph",
]
