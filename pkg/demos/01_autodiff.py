"""Reverse-mode gradients on a tiny dense network, checked against finite
differences, then a few Adam steps."""
import numpy as np

from fedmemetic.numerics import (
    OptimizerState, Tape, adam_step, dense_forward, grad_check, relu_forward, softmax_ce_loss,
)

# %% A two-layer classifier written directly against the primitives
rng = np.random.default_rng(0)
x = rng.normal(size=(16, 5))
y = np.eye(3)[rng.integers(0, 3, 16)]
params = {
    "W1": rng.normal(scale=0.5, size=(5, 8)), "b1": np.zeros(8),
    "W2": rng.normal(scale=0.5, size=(8, 3)), "b2": np.zeros(3),
}


def loss_fn(P, tape):
    h = relu_forward(dense_forward(x, P["W1"], P["b1"], tape), tape)
    return softmax_ce_loss(dense_forward(h, P["W2"], P["b2"], tape), y, tape)


# %% Tape gradients agree with central differences in float64
report = grad_check(loss_fn, params)
print("worst relative error:", f"{report.max_rel_error:.2e}")

# %% Training in float32 with Adam
params = {k: v.astype(np.float32) for k, v in params.items()}
opt = OptimizerState("adam", lr=0.05)
for step in range(51):
    tape = Tape()
    P = {k: tape.watch(k, v) for k, v in params.items()}
    loss = loss_fn(P, tape)
    params = adam_step(params, tape.backward(loss), opt)
    if step % 10 == 0:
        print(f"step {step:2d}  loss {float(loss.value):.4f}")
