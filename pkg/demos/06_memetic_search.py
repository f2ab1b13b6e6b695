"""Memetic search first on a cheap gene landscape, then over real
architectures scored by short training runs."""
import numpy as np

from fedmemetic.data import SplitSpec, generate_synthetic_dataset, split_dataset
from fedmemetic.memetic import (
    Gene, LandscapeFitness, MaoConfig, TrainingFitness, architecture_layout, chromosome_to_spec, run_mao,
)

# %% Two peaks on a 10x10x10 grid; the broad one is the global optimum
grid = [Gene(f"x{i}", 0, 9) for i in range(3)]


def landscape(x):
    a = np.exp(-np.sum((x - [7, 2, 8]) ** 2) / 12)
    b = 0.8 * np.exp(-np.sum((x - [1, 8, 1]) ** 2) / 4)
    return max(a, b)


res = run_mao(MaoConfig(generations=10, seed=0), LandscapeFitness(landscape), grid)
print("best genes:", res.best.chromosome.genes, "fitness", round(res.best.fitness, 4))
print("best fitness per generation:", [round(r.best_fitness, 3) for r in res.log])

# %% Architecture search with a one-epoch training budget per candidate
ds = generate_synthetic_dataset(4, 40, 16, 16, seed=0)
train, val, _ = split_dataset(ds, SplitSpec(seed=0))
registry = ["mlp-s", "cnn-s"]
fitness = TrainingFitness(train, val, budget_epochs=1, registry=registry, batch_size=16)
cfg = MaoConfig(population=5, generations=2, tournament=2, local_budget=2, seed=0)
res = run_mao(cfg, fitness, architecture_layout(registry))
print(res.log_jsonl(), end="")
print(chromosome_to_spec(res.best.chromosome, registry, 4, ds.image_shape))
