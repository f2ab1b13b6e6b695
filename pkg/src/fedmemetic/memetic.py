"""Memetic search over architecture chromosomes.

A generation evaluates the population, breeds ``population - 1`` offspring by
tournament selection, uniform crossover and Gaussian mutation, hill-climbs each
offspring, and carries the best individual over unchanged (elitism), so the
best fitness never decreases.

Fitness is pluggable: :class:`TrainingFitness` trains a small model and scores
validation accuracy; :class:`LandscapeFitness` wraps any pure function of the
genes, which is what the tests use to compare against exhaustive search.
"""
from __future__ import annotations

import json
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import metrics
from .model import BACKBONES, DeepBlockSpec, ModelSpec, TrainingDivergedError, build_model, predict, train_epochs
from .numerics import NonFiniteGradientError, OptimizerState

__all__ = [
    "ConfigError",
    "LayoutError",
    "Gene",
    "Chromosome",
    "Individual",
    "MaoConfig",
    "architecture_layout",
    "chromosome_to_spec",
    "FitnessResult",
    "TrainingFitness",
    "LandscapeFitness",
    "init_population",
    "evaluate_fitness",
    "tournament_select",
    "uniform_crossover",
    "mutate",
    "local_search",
    "GenerationRecord",
    "MaoResult",
    "run_mao",
]

REAL_STEP = 2 ** 0.25


class ConfigError(ValueError):
    pass


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class Gene:
    name: str
    low: float
    high: float
    integer: bool = True

    @property
    def span(self) -> float:
        return self.high - self.low

    def repair(self, value: float) -> float:
        value = min(max(value, self.low), self.high)
        if self.integer:
            value = float(min(max(round(value), math.ceil(self.low)), math.floor(self.high)))
        return value


@dataclass(frozen=True)
class Chromosome:
    genes: tuple[float, ...]
    layout: tuple[Gene, ...]

    def __post_init__(self):
        if len(self.genes) != len(self.layout):
            raise LayoutError(f"{len(self.genes)} genes for a layout of {len(self.layout)}")
        object.__setattr__(self, "genes", tuple(float(g) for g in self.genes))

    def __getitem__(self, name: str) -> float:
        for g, v in zip(self.layout, self.genes):
            if g.name == name:
                return v
        raise KeyError(name)

    @property
    def key(self) -> tuple[float, ...]:
        return self.genes

    def as_dict(self) -> dict[str, float | int]:
        return {g.name: (int(v) if g.integer else v) for g, v in zip(self.layout, self.genes)}

    def valid(self) -> bool:
        return all(g.low <= v <= g.high and (not g.integer or v == int(v))
                   for g, v in zip(self.layout, self.genes))


@dataclass
class Individual:
    chromosome: Chromosome
    fitness: float | None = None
    cost: int = 0
    flagged: bool = False

    def __post_init__(self):
        if self.fitness is not None and not 0.0 <= self.fitness <= 1.0:
            raise ValueError(f"fitness {self.fitness} outside [0, 1]")


@dataclass(frozen=True)
class MaoConfig:
    population: int = 11
    generations: int = 15
    tournament: int = 3
    p_mutation: float = 0.2
    mutation_scale: float = 0.1
    budget_epochs: int = 2
    local_budget: int | None = None    # evaluations per local search; None climbs to a local optimum
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.population < 2:
            raise ConfigError(f"population must be >= 2, got {self.population}")
        if not 1 <= self.tournament <= self.population:
            raise ConfigError(f"tournament must be in [1, {self.population}], got {self.tournament}")
        if not 0.0 <= self.p_mutation <= 1.0:
            raise ConfigError(f"p_mutation must be in [0, 1], got {self.p_mutation}")
        if self.mutation_scale < 0:
            raise ConfigError(f"mutation_scale must be >= 0, got {self.mutation_scale}")
        if self.generations < 0 or self.budget_epochs < 0 or (self.local_budget or 0) < 0:
            raise ConfigError("generations, budget_epochs and local_budget must be >= 0")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")


# ---------------------------------------------------------------------------
# architecture genes


def architecture_layout(registry: Sequence[str] = tuple(BACKBONES)) -> tuple[Gene, ...]:
    return (
        Gene("backbone", 0, len(registry) - 1),
        Gene("hidden", 8, 64),
        Gene("depth", 1, 3),
        Gene("block_width", 4, 64),
        Gene("block_loops", 1, 3),
        Gene("block_repeats", 1, 4),
        Gene("seq_width", 4, 64),
        Gene("learning_rate", 1e-4, 1e-2, integer=False),
    )


def chromosome_to_spec(c: Chromosome, registry: Sequence[str], class_count: int,
                       input_shape: tuple[int, int, int], seed: int = 0) -> ModelSpec:
    block = DeepBlockSpec(int(c["block_width"]), int(c["block_loops"]),
                          int(c["block_repeats"]), int(c["seq_width"]))
    return ModelSpec(registry[int(c["backbone"])], class_count, input_shape,
                     deep_block=block, hidden=int(c["hidden"]), depth=int(c["depth"]), seed=seed)


@dataclass
class FitnessResult:
    fitness: float
    cost: int = 0
    flagged: bool = False


class _Cached:
    def __init__(self):
        self._cache: dict[tuple, FitnessResult] = {}
        self._lock = threading.Lock()
        self.evaluations = 0

    def __call__(self, c: Chromosome) -> FitnessResult:
        with self._lock:
            hit = self._cache.get(c.key)
        if hit is not None:
            return hit
        result = self.compute(c)
        with self._lock:
            self._cache.setdefault(c.key, result)
            self.evaluations += 1
        return result

    def compute(self, c: Chromosome) -> FitnessResult:
        raise NotImplementedError


class LandscapeFitness(_Cached):
    """Fitness as a pure function of the gene vector; no training."""

    def __init__(self, fn: Callable[[np.ndarray], float]):
        super().__init__()
        self.fn = fn

    def compute(self, c):
        return FitnessResult(float(self.fn(np.asarray(c.genes))))


class TrainingFitness(_Cached):
    """Validation accuracy after a short training run of the decoded model."""

    def __init__(self, train, val, budget_epochs: int, registry: Sequence[str] = tuple(BACKBONES),
                 batch_size: int = 32, seed: int = 0):
        super().__init__()
        self.train, self.val = train, val
        self.budget_epochs = budget_epochs
        self.registry = list(registry)
        self.batch_size = batch_size
        self.seed = seed

    def compute(self, c):
        spec = chromosome_to_spec(c, self.registry, self.train.n_classes,
                                  self.train.image_shape, seed=self.seed)
        model = build_model(spec)
        opt = OptimizerState("adam", lr=c["learning_rate"])
        try:
            train_epochs(model, self.train, opt, self.budget_epochs, self.batch_size, self.seed)
            preds = predict(model, self.val.images)
        except (TrainingDivergedError, NonFiniteGradientError):
            return FitnessResult(0.0, self.budget_epochs, flagged=True)
        return FitnessResult(metrics.accuracy(preds, self.val.labels), self.budget_epochs)


def evaluate_fitness(ind: Individual, train, val, budget_epochs: int,
                     registry: Sequence[str] = tuple(BACKBONES), seed: int = 0) -> float:
    """Train the individual's model for ``budget_epochs`` and record validation accuracy."""
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train and validation sets must be nonempty")
    result = TrainingFitness(train, val, budget_epochs, registry, seed=seed).compute(ind.chromosome)
    ind.fitness, ind.cost, ind.flagged = result.fitness, ind.cost + result.cost, result.flagged
    return result.fitness


def _score(ind: Individual, fitness) -> Individual:
    r = fitness(ind.chromosome)
    return replace(ind, fitness=r.fitness, cost=ind.cost + r.cost, flagged=r.flagged)


# ---------------------------------------------------------------------------
# operators


def init_population(config: MaoConfig, layout: Sequence[Gene],
                    rng: np.random.Generator) -> list[Individual]:
    """Uniform draws within bounds. A gene named ``backbone`` is dealt so the
    population covers as many distinct values as it can."""
    layout = tuple(layout)
    pop = []
    slot = next((i for i, g in enumerate(layout) if g.name == "backbone"), None)
    cover = []
    if slot is not None:
        g = layout[slot]
        cover = list(rng.permutation(np.arange(int(g.low), int(g.high) + 1)))
    for i in range(config.population):
        genes = []
        for g in layout:
            v = rng.integers(int(g.low), int(g.high) + 1) if g.integer else rng.uniform(g.low, g.high)
            genes.append(float(v))
        if slot is not None and i < len(cover):
            genes[slot] = float(cover[i])
        pop.append(Individual(Chromosome(tuple(genes), layout)))
    return pop


def tournament_select(pop: Sequence[Individual], k: int, rng: np.random.Generator) -> Individual:
    """Best of ``k`` members drawn without replacement; ties go to the lower index."""
    if k < 1 or k > len(pop):
        raise ValueError(f"tournament size {k} invalid for population of {len(pop)}")
    if any(ind.fitness is None for ind in pop):
        raise ValueError("tournament needs an evaluated population")
    entrants = sorted(int(i) for i in rng.choice(len(pop), size=k, replace=False))
    best = entrants[0]
    for i in entrants[1:]:
        if pop[i].fitness > pop[best].fitness:
            best = i
    return pop[best]


def uniform_crossover(p1: Chromosome, p2: Chromosome, rng: np.random.Generator,
                      mask: np.ndarray | None = None) -> Chromosome:
    """Per-gene fair-coin choice: ``child = M*p1 + (1-M)*p2``."""
    if p1.layout != p2.layout:
        raise LayoutError("parents have different gene layouts")
    if mask is None:
        mask = rng.random(len(p1.genes)) < 0.5
    mask = np.asarray(mask, dtype=bool)
    child = np.where(mask, p1.genes, p2.genes)
    return Chromosome(tuple(child), p1.layout)


def mutate(c: Chromosome, p_mutation: float, scale: float,
           rng: np.random.Generator) -> Chromosome:
    """Add ``Normal(0, scale * gene_span)`` to each gene with probability
    ``p_mutation``; clamp to bounds and round integer genes."""
    if scale < 0:
        raise ValueError(f"mutation scale must be >= 0, got {scale}")
    genes = list(c.genes)
    for i, g in enumerate(c.layout):
        if rng.random() < p_mutation:
            genes[i] = g.repair(genes[i] + rng.normal(0.0, scale * g.span) if scale > 0 else genes[i])
    return Chromosome(tuple(genes), c.layout)


def _neighbours(c: Chromosome, i: int) -> list[Chromosome]:
    g = c.layout[i]
    v = c.genes[i]
    cands = (v + 1, v - 1) if g.integer else (v * REAL_STEP, v / REAL_STEP)
    out = []
    for cand in cands:
        cand = g.repair(cand)
        if cand != v:
            genes = list(c.genes)
            genes[i] = cand
            out.append(Chromosome(tuple(genes), c.layout))
    return out


def local_search(ind: Individual, fitness, budget: int | None) -> Individual:
    """Coordinate-wise hill climb.

    Genes are visited in layout order; each tries one grid step up and down
    (integers) or a factor of 2**0.25 either way (reals). The better neighbour
    replaces the current point only on strict improvement. Stops after
    ``budget`` evaluations or a full pass without improvement; ``None`` means
    no evaluation limit.
    """
    if ind.fitness is None:
        raise ValueError("local search needs an evaluated individual")
    if budget is None:
        budget = math.inf
    best = ind
    used = 0
    improved = True
    while improved and used < budget:
        improved = False
        for i in range(len(best.chromosome.genes)):
            step_best = None
            for cand in _neighbours(best.chromosome, i):
                if used >= budget:
                    break
                trial = _score(Individual(cand, cost=best.cost), fitness)
                used += 1
                if trial.fitness > best.fitness and (step_best is None or trial.fitness > step_best.fitness):
                    step_best = trial
            if step_best is not None:
                best = step_best
                improved = True
            if used >= budget:
                break
    return best


# ---------------------------------------------------------------------------
# driver


@dataclass
class GenerationRecord:
    generation: int
    best_fitness: float
    mean_fitness: float
    best_chromosome: dict

    def to_json(self) -> str:
        return json.dumps({"generation": self.generation, "best_fitness": self.best_fitness,
                           "mean_fitness": self.mean_fitness,
                           "best_chromosome": self.best_chromosome}, sort_keys=True)


@dataclass
class MaoResult:
    best: Individual
    population: list[Individual]
    log: list[GenerationRecord] = field(default_factory=list)

    def log_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.log)


def _best(pop: Sequence[Individual]) -> Individual:
    best = pop[0]
    for ind in pop[1:]:
        if ind.fitness > best.fitness:
            best = ind
    return best


def _record(gen: int, pop: Sequence[Individual]) -> GenerationRecord:
    best = _best(pop)
    return GenerationRecord(gen, float(best.fitness),
                            float(np.mean([i.fitness for i in pop])), best.chromosome.as_dict())


def run_mao(config: MaoConfig, fitness, layout: Sequence[Gene] | None = None) -> MaoResult:
    """Run the search; ``fitness`` maps a Chromosome to a :class:`FitnessResult`."""
    layout = tuple(layout or architecture_layout())
    rng = np.random.default_rng(config.seed)

    def map_(fn, items):
        if config.workers == 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(config.workers) as ex:
            return list(ex.map(fn, items))   # results keep input order

    pop = map_(lambda ind: _score(ind, fitness), init_population(config, layout, rng))
    log = [_record(0, pop)]
    for gen in range(1, config.generations + 1):
        elite = _best(pop)
        children = []
        for _ in range(config.population - 1):
            a = tournament_select(pop, config.tournament, rng)
            b = tournament_select(pop, config.tournament, rng)
            child = uniform_crossover(a.chromosome, b.chromosome, rng)
            children.append(Individual(mutate(child, config.p_mutation, config.mutation_scale, rng)))

        def refine(ind):
            return local_search(_score(ind, fitness), fitness, config.local_budget)

        pop = [elite] + map_(refine, children)
        log.append(_record(gen, pop))
    return MaoResult(_best(pop), pop, log)
