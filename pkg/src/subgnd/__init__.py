"""Ego-aware subgraph node classification with induced random-walk sampling."""

from .estimator import SubGNDClassifier, SubgraphSampler
from .graph import (
    DataFormatError,
    GraphStore,
    SplitAssignment,
    SyntheticSpec,
    ingest_graph,
    make_split,
    synth_graph,
    write_graph,
)
from .model import ModelConfig, ModelParams, base_forward, forward, init_params
from .sampler import InducedSubgraph, WalkConfig, sample_dataset, sample_subgraph
from .trainer import (
    DivergenceError,
    SearchSpace,
    TrainConfig,
    evaluate,
    fit,
    random_search,
    run_experiment,
)

__version__ = "0.1.0"

__all__ = [
    "DataFormatError", "DivergenceError", "GraphStore", "InducedSubgraph", "ModelConfig",
    "ModelParams", "SearchSpace", "SplitAssignment", "SubGNDClassifier", "SubgraphSampler",
    "SyntheticSpec", "TrainConfig", "WalkConfig", "base_forward", "evaluate", "fit", "forward",
    "ingest_graph", "init_params", "make_split", "random_search", "run_experiment",
    "sample_dataset", "sample_subgraph", "synth_graph", "write_graph",
]
