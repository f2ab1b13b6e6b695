"""Dense-array arithmetic with a reverse-mode gradient tape, plus SGD and Adam.

Values are plain numpy arrays. A :class:`Var` wraps one array together with its
gradient accumulator; every primitive below takes ``Var`` inputs and returns a
``Var``. When a :class:`Tape` is passed, the primitive appends its backward
closure to the tape, and :meth:`Tape.backward` replays those closures in exact
reverse order.

Training runs in float32. Passing float64 arrays keeps everything in float64,
which is what :func:`grad_check` relies on.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "DimensionError",
    "NonFiniteGradientError",
    "OneHotError",
    "Var",
    "Tape",
    "dense_forward",
    "relu_forward",
    "concat_forward",
    "repeat_vector",
    "reshape",
    "add",
    "conv2d_forward",
    "avgpool2d",
    "softmax",
    "softmax_ce_loss",
    "sgd_step",
    "adam_step",
    "OptimizerState",
    "GradCheckReport",
    "grad_check",
]


class DimensionError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


class OneHotError(ValueError):
    pass


class Var:
    """An array plus its accumulated gradient."""

    __slots__ = ("value", "grad", "name", "requires_grad")

    def __init__(self, value, name: str | None = None, requires_grad: bool = True):
        self.value = np.asarray(value)
        self.grad = None
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.shape}, dtype={self.value.dtype})"


class Tape:
    """Ordered record of backward closures for one forward pass.

    A tape belongs to a single forward/backward pair and must not be shared
    between threads. Distinct tapes are independent.
    """

    def __init__(self):
        self._ops: list[tuple[str, Callable[[], None]]] = []
        self.watched: dict[str, Var] = {}

    def __len__(self) -> int:
        return len(self._ops)

    @property
    def op_names(self) -> list[str]:
        return [name for name, _ in self._ops]

    def watch(self, name: str, value: np.ndarray) -> Var:
        if name in self.watched:
            raise KeyError(f"parameter {name!r} already watched")
        v = Var(value, name=name)
        self.watched[name] = v
        return v

    def record(self, name: str, backward: Callable[[], None]) -> None:
        self._ops.append((name, backward))

    def backward(self, out: Var, grad: np.ndarray | None = None,
                 trace: list[str] | None = None) -> dict[str, np.ndarray]:
        """Propagate from ``out`` and return gradients of watched parameters.

        Parameters that did not influence ``out`` get zero gradients.
        """
        seed = np.ones_like(out.value) if grad is None else np.asarray(grad, dtype=out.value.dtype)
        if seed.shape != out.shape:
            raise DimensionError(f"seed gradient shape {seed.shape} != output shape {out.shape}")
        out.accumulate(seed)
        for name, fn in reversed(self._ops):
            if trace is not None:
                trace.append(name)
            fn()
        grads = {}
        for name, v in self.watched.items():
            grads[name] = v.grad if v.grad is not None else np.zeros_like(v.value)
        return grads


def _const(x) -> Var:
    # raw arrays are treated as data: no gradient is kept for them
    return x if isinstance(x, Var) else Var(x, requires_grad=False)


# ---------------------------------------------------------------------------
# primitives


def dense_forward(x: Var, W: Var, b: Var, tape: Tape | None = None) -> Var:
    """``x @ W + b`` for ``x`` of shape (n, d), ``W`` (d, h), ``b`` (h,)."""
    x, W, b = _const(x), _const(W), _const(b)
    if x.value.ndim != 2 or W.value.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"dense: cannot multiply x{x.shape} by W{W.shape}")
    if b.shape != (W.shape[1],):
        raise DimensionError(f"dense: bias {b.shape} does not match W{W.shape}")
    out = Var(x.value @ W.value + b.value)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            if x.requires_grad:
                x.accumulate(g @ W.value.T)
            W.accumulate(x.value.T @ g)
            b.accumulate(g.sum(axis=0))
        tape.record("dense", backward)
    return out


def relu_forward(x: Var, tape: Tape | None = None) -> Var:
    x = _const(x)
    mask = x.value > 0
    out = Var(np.where(mask, x.value, 0).astype(x.value.dtype, copy=False))
    if tape is not None:
        def backward():
            if out.grad is not None:
                x.accumulate(np.where(mask, out.grad, 0))
        tape.record("relu", backward)
    return out


def concat_forward(a: Var, b: Var, tape: Tape | None = None) -> Var:
    """Join along the last axis; leading dimensions must agree."""
    a, b = _const(a), _const(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat: leading dimensions differ, a{a.shape} vs b{b.shape}")
    d = a.shape[-1]
    out = Var(np.concatenate([a.value, b.value], axis=-1))
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            a.accumulate(g[..., :d])
            b.accumulate(g[..., d:])
        tape.record("concat", backward)
    return out


def repeat_vector(x: Var, r: int, tape: Tape | None = None) -> Var:
    """Lift (n, d) to (n, r, d) by repeating each row ``r`` times."""
    x = _const(x)
    if r < 1:
        raise ValueError(f"repeat count must be >= 1, got {r}")
    if x.value.ndim != 2:
        raise DimensionError(f"repeat_vector expects (n, d), got {x.shape}")
    out = Var(np.repeat(x.value[:, None, :], r, axis=1))
    if tape is not None:
        def backward():
            if out.grad is not None:
                x.accumulate(out.grad.sum(axis=1))
        tape.record("repeat_vector", backward)
    return out


def reshape(x: Var, shape: tuple[int, ...], tape: Tape | None = None) -> Var:
    x = _const(x)
    src = x.shape
    out = Var(x.value.reshape(shape))
    if tape is not None:
        def backward():
            if out.grad is not None:
                x.accumulate(out.grad.reshape(src))
        tape.record("reshape", backward)
    return out


def add(a: Var, b: Var, tape: Tape | None = None) -> Var:
    a, b = _const(a), _const(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes differ, {a.shape} vs {b.shape}")
    out = Var(a.value + b.value)
    if tape is not None:
        def backward():
            if out.grad is not None:
                a.accumulate(out.grad)
                b.accumulate(out.grad)
        tape.record("add", backward)
    return out


def _im2col3(x: np.ndarray) -> np.ndarray:
    # x: (n, H, W, C) -> (n, H, W, 3, 3, C), zero "same" padding
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    # sliding_window_view puts the window axes last: (n, H, W, C, 3, 3)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def conv2d_forward(x: Var, K: Var, b: Var, tape: Tape | None = None) -> Var:
    """3x3 convolution, stride 1, zero 'same' padding.

    ``x`` is (n, H, W, C), ``K`` is (3, 3, C, F), ``b`` is (F,).
    """
    x, K, b = _const(x), _const(K), _const(b)
    if x.value.ndim != 4 or K.shape[:2] != (3, 3) or K.shape[2] != x.shape[3]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {K.shape}")
    n, H, W, C = x.shape
    F = K.shape[3]
    cols = _im2col3(x.value).reshape(n * H * W, 9 * C)
    Kmat = K.value.reshape(9 * C, F)
    out = Var((cols @ Kmat + b.value).reshape(n, H, W, F))
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            g2 = g.reshape(n * H * W, F)
            K.accumulate((cols.T @ g2).reshape(3, 3, C, F))
            b.accumulate(g2.sum(axis=0))
            if not x.requires_grad:
                return
            dcols = (g2 @ Kmat.T).reshape(n, H, W, 3, 3, C)
            dxp = np.zeros((n, H + 2, W + 2, C), dtype=x.value.dtype)
            for i in range(3):
                for j in range(3):
                    dxp[:, i:i + H, j:j + W, :] += dcols[:, :, :, i, j, :]
            x.accumulate(dxp[:, 1:H + 1, 1:W + 1, :])
        tape.record("conv2d", backward)
    return out


def avgpool2d(x: Var, tape: Tape | None = None) -> Var:
    """2x2 average pooling with stride 2; a trailing odd row/column is dropped."""
    x = _const(x)
    n, H, W, C = x.shape
    h, w = H // 2, W // 2
    if h == 0 or w == 0:
        raise DimensionError(f"avgpool2d: input {x.shape} too small")
    blocks = x.value[:, :2 * h, :2 * w, :].reshape(n, h, 2, w, 2, C)
    out = Var(blocks.mean(axis=(2, 4)))
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            full = np.zeros_like(x.value)
            quarter = (g / 4).astype(x.value.dtype, copy=False)
            full[:, :2 * h, :2 * w, :] = np.repeat(np.repeat(quarter, 2, axis=1), 2, axis=2)
            x.accumulate(full)
        tape.record("avgpool2d", backward)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_onehot(onehot: np.ndarray, shape: tuple[int, ...]) -> None:
    if onehot.shape != shape:
        raise DimensionError(f"one-hot targets {onehot.shape} do not match logits {shape}")
    ok = np.all((onehot == 0) | (onehot == 1), axis=1) & (onehot.sum(axis=1) == 1)
    if not ok.all():
        bad = int(np.flatnonzero(~ok)[0])
        raise OneHotError(f"row {bad} of targets is not one-hot")


def softmax_ce_loss(logits: Var, onehot: np.ndarray, tape: Tape | None = None) -> Var:
    """Mean categorical cross-entropy of softmax(logits) against one-hot rows."""
    logits = _const(logits)
    onehot = np.asarray(onehot, dtype=logits.value.dtype)
    _check_onehot(onehot, logits.shape)
    z = logits.value
    n = z.shape[0]
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    log_p = z - lse
    loss = Var(np.asarray(-(onehot * log_p).sum() / n, dtype=z.dtype))
    if tape is not None:
        def backward():
            if loss.grad is None:
                return
            p = np.exp(log_p)
            logits.accumulate(loss.grad * (p - onehot) / n)
        tape.record("softmax_ce", backward)
    return loss


# ---------------------------------------------------------------------------
# optimizers


def _check_finite(grads: Mapping[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)


def _check_shapes(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
    for name, p in params.items():
        if name not in grads:
            raise KeyError(f"missing gradient for parameter {name!r}")
        if np.shape(grads[name]) != np.shape(p):
            raise DimensionError(
                f"gradient for {name!r} has shape {np.shape(grads[name])}, parameter has {np.shape(p)}")


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             lr: float) -> dict[str, np.ndarray]:
    """Return ``p - lr * g`` for every parameter; inputs are left untouched."""
    _check_shapes(params, grads)
    _check_finite(grads)
    out = {}
    for name, p in params.items():
        p = np.asarray(p)
        out[name] = (p - p.dtype.type(lr) * grads[name]).astype(p.dtype, copy=False)
    return out


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"optimizer kind must be 'sgd' or 'adam', got {self.kind!r}")

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.kind, self.lr, self.beta1, self.beta2, self.eps, self.step,
                              {k: a.copy() for k, a in self.m.items()},
                              {k: a.copy() for k, a in self.v.items()})

    def apply(self, params: Mapping[str, np.ndarray],
              grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        if self.kind == "sgd":
            new = sgd_step(params, grads, self.lr)
            self.step += 1
            return new
        return adam_step(params, grads, self)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: OptimizerState) -> dict[str, np.ndarray]:
    """Bias-corrected Adam. Advances ``state`` in place and returns new parameters."""
    if state.kind != "adam":
        raise ValueError(f"adam_step needs an adam state, got {state.kind!r}")
    _check_shapes(params, grads)
    _check_finite(grads)
    t = state.step + 1
    out = {}
    for name, p in params.items():
        p = np.asarray(p)
        dt = p.dtype.type
        g = np.asarray(grads[name], dtype=p.dtype)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = dt(state.beta1) * m + dt(1 - state.beta1) * g
        v = dt(state.beta2) * v + dt(1 - state.beta2) * (g * g)
        m_hat = m / dt(1 - state.beta1 ** t)
        v_hat = v / dt(1 - state.beta2 ** t)
        out[name] = (p - dt(state.lr) * m_hat / (np.sqrt(v_hat) + dt(state.eps))).astype(p.dtype, copy=False)
        state.m[name] = m
        state.v[name] = v
    state.step = t
    return out


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def grad_check(model_fn: Callable[[Mapping[str, Var], Tape | None], Var],
               params: Mapping[str, np.ndarray], tolerance: float = 1e-4,
               step: float = 1e-5) -> GradCheckReport:
    """Compare tape gradients of a scalar function to central differences.

    ``model_fn(vars, tape)`` receives a mapping of parameter name to ``Var`` and
    must return a scalar ``Var``. Everything is evaluated in float64. The error
    for each parameter is ``|g_tape - g_fd| / max(|g_tape|, |g_fd|)`` in the
    Euclidean norm.
    """
    base = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    tape = Tape()
    watched = {k: tape.watch(k, v.copy()) for k, v in base.items()}
    out = model_fn(watched, tape)
    if out.value.size != 1:
        raise DimensionError(f"grad_check needs a scalar output, got shape {out.shape}")
    analytic = tape.backward(out)

    def evaluate(values: dict[str, np.ndarray]) -> float:
        return float(model_fn({k: Var(v) for k, v in values.items()}, None).value)

    per_param = {}
    for name, p in base.items():
        numeric = np.zeros_like(p)
        flat = p.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = evaluate(base)
            flat[i] = orig - step
            f_minus = evaluate(base)
            flat[i] = orig
            nflat[i] = (f_plus - f_minus) / (2 * step)
        per_param[name] = _rel_error(analytic[name], numeric)
    worst = max(per_param.values(), default=0.0)
    return GradCheckReport(worst, per_param, tolerance)
