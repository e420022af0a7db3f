"""Evolutionary filter pruning for convolutional networks.

Encodes the conv filters of a CNN, ResNet, or DenseNet as binary genomes,
evolves them with a (mu + lambda) strategy against two objectives (training
error and FLOPs), and returns three pruned models with different trade-offs:
the knee, the boundary heavy, and the boundary light solution.
"""

__version__ = "0.1.0"

from .arch import (ArchError, ArchSpec, FlopsReport, LayerSpec, PRESETS, ShapeError,
                   build_preset, count_flops, load_arch, propagate_shapes, save_arch)
from .data import Dataset, DataError, load_cifar_binary, stratified_sample, synthetic
from .engine import (EngineError, ModelInstance, TrainConfig, error_rate, forward,
                     init_model, load_model, save_model, train)
from .estimators import EvolutionaryFilterPruner, NetworkClassifier
from .evolve import (ESConfig, EvolveError, Individual, RunResult, TriSolution,
                     init_population, evaluate, knee_boundary_select, make_offspring,
                     read_trace, run, write_trace)
from .genome import (Genome, GenomeError, GenomeLayout, Segment, all_ones, decode,
                     layout_for, load_genome, mutate, save_genome, transfer_weights)

__all__ = [
    "ArchError", "ArchSpec", "DataError", "Dataset", "ESConfig", "EngineError",
    "EvolutionaryFilterPruner", "EvolveError", "FlopsReport", "Genome", "GenomeError",
    "GenomeLayout", "Individual", "LayerSpec", "ModelInstance", "NetworkClassifier",
    "PRESETS", "RunResult", "Segment", "ShapeError", "TrainConfig", "TriSolution",
    "all_ones", "build_preset", "count_flops", "decode", "error_rate", "evaluate",
    "forward", "init_model", "init_population", "knee_boundary_select", "layout_for",
    "load_arch", "load_cifar_binary", "load_genome", "load_model", "make_offspring",
    "mutate", "propagate_shapes", "read_trace", "run", "save_arch", "save_genome",
    "save_model", "stratified_sample", "synthetic", "train", "transfer_weights",
    "write_trace",
]
