"""(mu + lambda) evolution loop over filter-pruning genomes.

Each candidate is scored on two objectives: f1, the training error on a
fixed stratified subset after a short tuning run, and f2, the pruned
network's forward-pass FLOPs. Selection keeps exactly three parents per
round: the knee (smallest sum of min-max normalized objectives), the
boundary heavy (smallest f1), and the boundary light (smallest f2). The
plus variant selects from parents and offspring together; the comma variant
from offspring only.
"""

from __future__ import annotations

import copy
import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arch import ArchSpec, count_flops
from .data import Dataset, stratified_sample
from .engine import ModelInstance, TrainConfig, error_rate, train
from .genome import Genome, all_ones, decode, layout_for, mutate, transfer_weights

# stream tags keeping the run's derived random streams independent
_SUBSET, _INIT, _OFFSPRING, _EVAL, _FINE = 101, 202, 303, 404, 505


class EvolveError(RuntimeError):
    """Invalid population state or configuration."""


@dataclass
class ESConfig:
    lambda_size: int = 20
    generations: int = 10
    p_m: float = 0.1
    e_eval: int = 5
    alpha_eval: float = 0.1
    e_fine: int = 50
    alpha_fine: float = 0.01
    variant: str = "plus"
    seed: int = 0
    batch_size: int = 64
    subset_per_class: int | None = None  # None: 1000 images split evenly over classes
    workers: int = 1

    def __post_init__(self):
        if self.lambda_size < 1:
            raise EvolveError("lambda_size must be >= 1")
        if self.generations < 1:
            raise EvolveError("generations must be >= 1")
        if not 0.0 <= self.p_m <= 1.0:
            raise EvolveError("p_m must be in [0, 1]")
        if self.variant not in ("plus", "comma"):
            raise EvolveError(f"variant must be 'plus' or 'comma', got {self.variant!r}")


@dataclass
class Individual:
    genome: Genome
    id: int
    parent_id: int | None = None
    f1: float | None = None  # training error on the evaluation subset
    f2: int | None = None  # FLOPs of the decoded network
    evaluated: bool = False
    weights: dict | None = field(default=None, repr=False)


@dataclass
class TriSolution:
    knee: Individual
    heavy: Individual
    light: Individual

    def __post_init__(self):
        k, h, l = self.knee, self.heavy, self.light
        if not (h.f1 <= k.f1 and h.f1 <= l.f1 and l.f2 <= k.f2 and l.f2 <= h.f2):
            raise EvolveError(
                "selection invariant violated: "
                f"knee=({k.f1}, {k.f2}) heavy=({h.f1}, {h.f2}) light=({l.f1}, {l.f2})"
            )

    def roles(self):
        return {"knee": self.knee, "heavy": self.heavy, "light": self.light}


@dataclass(frozen=True)
class TraceRow:
    generation: int
    individual: int
    parent: int | None
    f1: float
    f2: int
    bits_set: int
    total_bits: int


@dataclass
class RunResult:
    tri: TriSolution
    models: dict  # role -> fine-tuned ModelInstance
    final_f1: dict  # role -> training error on the full set after fine-tuning
    base_flops: int
    trace: list


def _child_seed(*keys) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Population operators
# ---------------------------------------------------------------------------

def init_population(lambda_size: int, base: ArchSpec, p_m: float, seed: int) -> list:
    """3 + lambda_size individuals: copies of the full network, each mutated once."""
    layout = layout_for(base)
    ones = all_ones(layout)
    population = []
    for i in range(3 + lambda_size):
        rng = np.random.default_rng(_child_seed(seed, _INIT, i))
        population.append(Individual(genome=mutate(ones, p_m, rng), id=i))
    return population


def evaluate(ind: Individual, base_model: ModelInstance, subset: Dataset,
             cfg: ESConfig) -> Individual:
    """Fill in (f1, f2) and the tuned weights; already-evaluated individuals pass through."""
    if ind.evaluated:
        return ind
    if len(subset) == 0:
        raise EvolveError("evaluation subset is empty")
    pruned_arch = decode(ind.genome, base_model.arch)
    f2 = count_flops(pruned_arch).total
    weights = transfer_weights(base_model.arch, base_model.weights, ind.genome)
    model = ModelInstance(pruned_arch, weights)
    if cfg.e_eval > 0:
        model = train(model, subset, TrainConfig(
            epochs=cfg.e_eval, learning_rate=cfg.alpha_eval,
            batch_size=cfg.batch_size, seed=_child_seed(cfg.seed, _EVAL, ind.id)))
    ind.f1 = error_rate(model, subset)
    ind.f2 = f2
    ind.weights = model.weights
    ind.evaluated = True
    return ind


def knee_boundary_select(population: list) -> TriSolution:
    """Pick the knee and the two boundary solutions from an evaluated population.

    The knee minimizes the sum of both min-max normalized objectives; when an
    objective is constant across the population its normalized term is 0 for
    everyone. All argmin ties break toward the lowest population index.
    """
    if not population:
        raise EvolveError("cannot select from an empty population")
    if any(not ind.evaluated for ind in population):
        raise EvolveError("population contains unevaluated individuals")
    f1 = np.array([ind.f1 for ind in population], dtype=float)
    f2 = np.array([ind.f2 for ind in population], dtype=float)
    heavy = population[int(np.argmin(f1))]
    light = population[int(np.argmin(f2))]
    dist = np.zeros(len(population))
    for f in (f1, f2):
        spread = f.max() - f.min()
        if spread > 0:
            dist += (f - f.min()) / spread
    knee = population[int(np.argmin(dist))]
    return TriSolution(knee=knee, heavy=heavy, light=light)


def make_offspring(parents: TriSolution, cfg: ESConfig, generation: int,
                   next_id: int) -> list:
    """lambda_size children, each mutated from one uniformly chosen parent.

    Only the three retained parents breed; fresh offspring never parent other
    offspring within the same generation.
    """
    pool = (parents.knee, parents.heavy, parents.light)
    offspring = []
    for k in range(cfg.lambda_size):
        rng = np.random.default_rng(_child_seed(cfg.seed, _OFFSPRING, generation, k))
        parent = pool[int(rng.integers(3))]
        offspring.append(Individual(
            genome=mutate(parent.genome, cfg.p_m, rng),
            id=next_id + k, parent_id=parent.id))
    return offspring


# ---------------------------------------------------------------------------
# Parallel evaluation
# ---------------------------------------------------------------------------

_WORKER: dict = {}


def _init_worker(base_model, subset, cfg):
    _WORKER["args"] = (base_model, subset, cfg)


def _eval_task(payload):
    genome, ind_id = payload
    base_model, subset, cfg = _WORKER["args"]
    ind = evaluate(Individual(genome=genome, id=ind_id), base_model, subset, cfg)
    return ind.f1, ind.f2, ind.weights


def _evaluate_all(population, base_model, subset, cfg):
    todo = [ind for ind in population if not ind.evaluated]
    if cfg.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers, initializer=_init_worker,
                                 initargs=(base_model, subset, cfg)) as pool:
            results = list(pool.map(_eval_task, [(ind.genome, ind.id) for ind in todo]))
        for ind, (f1, f2, weights) in zip(todo, results):
            ind.f1, ind.f2, ind.weights, ind.evaluated = f1, f2, weights, True
    else:
        for ind in todo:
            evaluate(ind, base_model, subset, cfg)


# ---------------------------------------------------------------------------
# Main loop
# ---------------------------------------------------------------------------

def run(base_model: ModelInstance, data: Dataset, cfg: ESConfig,
        trace_path=None, on_generation=None) -> RunResult:
    """Full pruning run: evolve, then fine-tune the three survivors.

    The evaluation subset is drawn once (seeded) and reused for every
    candidate so errors stay comparable across the run. Selection happens on
    the initial population and then once per offspring batch; the final
    three are tuned on the full training set for e_fine epochs. When
    ``trace_path`` is given the trace collected so far is flushed there even
    if the run aborts.
    """
    trace: list[TraceRow] = []
    try:
        return _run(base_model, data, cfg, trace, on_generation)
    finally:
        if trace_path is not None:
            write_trace(trace, trace_path)


def _run(base_model, data, cfg, trace, on_generation):
    per_class = cfg.subset_per_class
    if per_class is None:
        # the default evaluation budget is 1000 images split evenly
        per_class = max(1, min(1000 // data.num_classes, _min_class_count(data)))
    subset = stratified_sample(data, per_class, seed=_child_seed(cfg.seed, _SUBSET))

    population = init_population(cfg.lambda_size, base_model.arch, cfg.p_m, cfg.seed)
    next_id = len(population)

    _evaluate_all(population, base_model, subset, cfg)
    trace.extend(_trace_pool(0, population))
    parents = knee_boundary_select(population)
    if on_generation:
        on_generation(0, population, parents)

    for g in range(1, cfg.generations + 1):
        offspring = make_offspring(parents, cfg, g, next_id)
        next_id += len(offspring)
        _evaluate_all(offspring, base_model, subset, cfg)
        if cfg.variant == "plus":
            pool, seen = [], set()
            # one parent can hold several roles; keep each individual once
            for ind in (parents.knee, parents.heavy, parents.light, *offspring):
                if ind.id not in seen:
                    seen.add(ind.id)
                    pool.append(ind)
        else:
            pool = list(offspring)
        trace.extend(_trace_pool(g, pool))
        parents = knee_boundary_select(pool)
        if on_generation:
            on_generation(g, pool, parents)

    models, final_f1 = {}, {}
    tuned: dict[int, tuple] = {}
    for role, ind in parents.roles().items():
        if ind.id not in tuned:
            model = ModelInstance(decode(ind.genome, base_model.arch),
                                  copy.deepcopy(ind.weights))
            if cfg.e_fine > 0:
                model = train(model, data, TrainConfig(
                    epochs=cfg.e_fine, learning_rate=cfg.alpha_fine,
                    batch_size=cfg.batch_size, seed=_child_seed(cfg.seed, _FINE, ind.id)))
            tuned[ind.id] = (model, error_rate(model, data))
        models[role], final_f1[role] = tuned[ind.id]

    return RunResult(tri=parents, models=models, final_f1=final_f1,
                     base_flops=count_flops(base_model.arch).total, trace=trace)


def _min_class_count(data: Dataset) -> int:
    counts = np.bincount(data.labels, minlength=data.num_classes)
    return int(counts.min())


def _trace_pool(generation, pool):
    return [TraceRow(generation=generation, individual=ind.id, parent=ind.parent_id,
                     f1=ind.f1, f2=ind.f2, bits_set=ind.genome.bits_set(),
                     total_bits=ind.genome.layout.total_bits)
            for ind in pool]


# ---------------------------------------------------------------------------
# Trace files
# ---------------------------------------------------------------------------

_TRACE_FIELDS = ("generation", "individual", "parent", "f1", "f2", "bits_set", "total_bits")


def write_trace(rows, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_TRACE_FIELDS)
        for r in rows:
            writer.writerow([r.generation, r.individual,
                             "" if r.parent is None else r.parent,
                             repr(float(r.f1)), r.f2, r.bits_set, r.total_bits])


def read_trace(path: str | Path) -> list:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(TraceRow(
                generation=int(rec["generation"]), individual=int(rec["individual"]),
                parent=None if rec["parent"] == "" else int(rec["parent"]),
                f1=float(rec["f1"]), f2=int(rec["f2"]),
                bits_set=int(rec["bits_set"]), total_bits=int(rec["total_bits"])))
    return rows
