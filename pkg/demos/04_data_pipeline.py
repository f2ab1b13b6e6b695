"""Synthetic dataset on disk, stratified splitting, client shards and class
balancing by augmentation."""
import tempfile

import numpy as np

from fedmemetic.data import (
    AugmentSpec, ShardStrategy, SplitSpec, balance_with_augmentation, generate_synthetic_dataset,
    load_dataset, save_dataset, shard_to_clients, split_dataset,
)

# %% Generate, write as class folders of PGM files, read back
ds = generate_synthetic_dataset(4, 50, 24, 24, seed=7)
with tempfile.TemporaryDirectory() as root:
    save_dataset(ds, root)
    back = load_dataset(root)
print("round trip identical:", back.images.tobytes() == ds.images.tobytes())

# %% 70:10:20 within every class
train, val, test = split_dataset(ds, SplitSpec(seed=7))
print("split sizes:", len(train), len(val), len(test))

# %% Three ways to hand the training set to five clients
for strategy in ("iid", "dirichlet:0.3", "label_skew:2"):
    plan = shard_to_clients(train.labels, 5, ShardStrategy.parse(strategy), seed=7)
    print(f"{strategy:14s}", [np.bincount(train.labels[s], minlength=4).tolist() for s in plan.shards])

# %% Top up minority classes with flipped, rotated or shifted copies
skewed = train.subset(np.r_[0:35, 35:50, 70:80, 105:140])
print("before:", skewed.class_counts().tolist())
print("after: ", balance_with_augmentation(skewed, AugmentSpec(seed=7)).class_counts().tolist())
