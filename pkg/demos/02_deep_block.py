"""Backbones with and without the deep block: shapes, parameter counts and a
short training run on synthetic leaves."""
import numpy as np

from fedmemetic.data import SplitSpec, generate_synthetic_dataset, split_dataset
from fedmemetic.metrics import accuracy
from fedmemetic.model import BACKBONES, DeepBlockSpec, ModelSpec, build_model, predict, train_epochs
from fedmemetic.numerics import OptimizerState

block = DeepBlockSpec(width=32, loops=2, repeats=3, seq_width=32)

# %% The block widens features by loops*width, then lifts to repeats x seq_width
for name in sorted(BACKBONES):
    plain = build_model(ModelSpec(name, 8, (32, 32, 1)))
    deep = build_model(ModelSpec(name, 8, (32, 32, 1), deep_block=block))
    print(f"{name:8s} features {plain.feature_dim:4d}  params {plain.parameter_count:6d} -> {deep.parameter_count:6d}")

# %% Train one model for a few epochs
ds = generate_synthetic_dataset(8, 60, 32, 32, seed=1)
train, val, _ = split_dataset(ds, SplitSpec(seed=1))
model = build_model(ModelSpec("cnn-m", 8, ds.image_shape, deep_block=block, seed=1))
model, hist = train_epochs(model, train, OptimizerState("adam", lr=0.001), epochs=8, batch_size=32)
print("train loss by epoch:", np.round(hist.loss, 3))
print("validation accuracy:", accuracy(predict(model, val.images), val.labels))
