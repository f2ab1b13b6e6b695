import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedmemetic.checkpoint import (
    BadMagicError,
    PayloadMismatchError,
    TruncatedTensorError,
    VersionMismatchError,
    dumps,
    load_checkpoint,
    loads,
    save_checkpoint,
)
from fedmemetic.model import (
    BACKBONES,
    DeepBlockSpec,
    ModelSpec,
    UnknownBackboneError,
    build_backbone,
    build_model,
    build_with_deep_block,
    forward_batch,
    train_epochs,
)
from fedmemetic.numerics import DimensionError, OptimizerState, Var, grad_check, softmax_ce_loss


def test_registry_has_required_backbones():
    assert {"mlp-s", "mlp-m", "cnn-s", "cnn-m", "dense-s"} <= set(BACKBONES)


def test_mlp_s_parameter_count_closed_form():
    spec = ModelSpec("mlp-s", 4, (16, 16, 1), hidden=32)
    assert build_backbone(spec).parameter_count == 256 * 32 + 32 + 32 * 4 + 4 == 8356


@pytest.mark.parametrize("bb", sorted(BACKBONES))
def test_same_seed_same_parameters(bb):
    spec = ModelSpec(bb, 3, (16, 16, 1), deep_block=DeepBlockSpec(), seed=7)
    a, b = build_model(spec), build_model(spec)
    assert list(a.params) == list(b.params)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    other = build_model(ModelSpec(bb, 3, (16, 16, 1), deep_block=DeepBlockSpec(), seed=8))
    assert any(not np.array_equal(a.params[k], other.params[k]) for k in a.params)


def test_unknown_backbone_lists_registry():
    with pytest.raises(UnknownBackboneError, match="mlp-s"):
        ModelSpec("nope", 4)


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec("mlp-s", 1)
    with pytest.raises(ValueError):
        ModelSpec("mlp-s", 3, (4, 4, 1))
    with pytest.raises(ValueError):
        DeepBlockSpec(width=0)


def test_deep_block_shape_chain_example():
    spec = ModelSpec("mlp-s", 5, (8, 8, 1), hidden=64,
                     deep_block=DeepBlockSpec(width=32, loops=2, repeats=3, seq_width=32))
    m = build_with_deep_block(spec)
    assert m.feature_dim == 64
    assert m.block().chain == [64, 96, 128, (3, 128), (3, 32), 96]
    assert m.shapes[-1] == ("head", (5,))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 4), st.integers(1, 4), st.integers(1, 12),
       st.sampled_from(sorted(BACKBONES)))
def test_deep_block_shape_algebra(w, L, r, s, bb):
    spec = ModelSpec(bb, 3, (8, 8, 1), hidden=10, deep_block=DeepBlockSpec(w, L, r, s))
    m = build_with_deep_block(spec)
    d0 = m.feature_dim
    chain = m.block().chain
    assert chain[L] == d0 + L * w
    assert chain[-1] == r * s
    assert forward_batch(m, np.zeros((2, 8, 8, 1), np.float32)).shape == (2, 3)
    base = build_backbone(spec)
    body = lambda g: sum(v.size for k, v in g.params.items() if not k.startswith("head"))
    assert body(m) > body(base)
    if r * s >= d0:
        # the classifier does not shrink, so the whole model grows
        assert m.parameter_count > base.parameter_count


def test_identity_step_dense_reproduces_baseline():
    # L=1, r=1, seq_width=d1 with identity per-step dense and a classifier that
    # ignores the new features gives exactly the baseline logits.
    base_spec = ModelSpec("mlp-s", 4, (8, 8, 1), hidden=6, seed=3)
    base = build_backbone(base_spec)
    spec = ModelSpec("mlp-s", 4, (8, 8, 1), hidden=6, seed=3,
                     deep_block=DeepBlockSpec(width=5, loops=1, repeats=1, seq_width=11))
    deep = build_with_deep_block(spec)
    p = dict(deep.params)
    for k, v in base.params.items():
        if k.startswith("backbone"):
            p[k] = v
    p["block.step.W"] = np.eye(11, dtype=np.float32)
    p["block.step.b"] = np.zeros(11, np.float32)
    head = np.zeros((11, 4), np.float32)
    head[:6] = base.params["head.W"]
    p["head.W"] = head
    p["head.b"] = base.params["head.b"]
    deep.set_params(p)
    x = np.random.default_rng(0).random((5, 8, 8, 1)).astype(np.float32)
    np.testing.assert_allclose(forward_batch(deep, x), forward_batch(base, x), rtol=1e-6, atol=1e-6)


@pytest.mark.parametrize("bb", ["mlp-m", "cnn-s", "dense-s"])
def test_full_deep_block_model_grad_check(bb):
    spec = ModelSpec(bb, 3, (8, 8, 1), hidden=5,
                     deep_block=DeepBlockSpec(width=3, loops=2, repeats=2, seq_width=4), seed=1)
    m = build_with_deep_block(spec)
    rng = np.random.default_rng(0)
    x = rng.random((4, 8, 8, 1))
    y = np.eye(3)[[0, 1, 2, 1]]

    def fn(P, tape):
        return softmax_ce_loss(m.forward(x, tape, params=P), y, tape)

    rep = grad_check(fn, {k: v.astype(np.float64) for k, v in m.params.items()})
    assert rep.max_rel_error < 1e-4, rep.per_param


def test_forward_contracts():
    m = build_model(ModelSpec("cnn-s", 6, (16, 16, 1), deep_block=DeepBlockSpec()))
    x = np.random.default_rng(1).random((7, 16, 16, 1)).astype(np.float32)
    before = {k: v.copy() for k, v in m.params.items()}
    a, b = forward_batch(m, x), forward_batch(m, x)
    assert a.shape == (7, 6)
    np.testing.assert_array_equal(a, b)
    assert np.isfinite(a).all()
    for k in before:
        np.testing.assert_array_equal(before[k], m.params[k])
    with pytest.raises(DimensionError):
        forward_batch(m, np.zeros((2, 8, 8, 1)))


def _toy(n=64, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.random((n, 8, 8, 1)).astype(np.float32) * 0.2
    x[y == 1, :4] += 0.7      # top half bright for class 1
    return x, y


def test_train_zero_epochs_is_identity():
    m = build_model(ModelSpec("mlp-s", 2, (8, 8, 1)))
    before = {k: v.copy() for k, v in m.params.items()}
    m, hist = train_epochs(m, _toy(), OptimizerState(), 0)
    assert hist.loss == []
    for k in before:
        np.testing.assert_array_equal(before[k], m.params[k])


def test_train_reduces_loss_on_separable_set():
    m = build_model(ModelSpec("mlp-s", 2, (8, 8, 1), hidden=8, deep_block=DeepBlockSpec(4, 1, 2, 4)))
    _, hist = train_epochs(m, _toy(), OptimizerState(lr=0.001), 30, batch_size=16, rng_seed=1)
    assert len(hist.loss) == 30
    assert hist.loss[-1] < hist.loss[0]
    assert hist.accuracy[-1] == 1.0


def test_train_is_bitwise_deterministic():
    spec = ModelSpec("cnn-s", 2, (8, 8, 1), deep_block=DeepBlockSpec(), seed=5)
    runs = []
    for _ in range(2):
        m, _ = train_epochs(build_model(spec), _toy(), OptimizerState(), 3, 16, rng_seed=9)
        runs.append(m.params)
    for k in runs[0]:
        np.testing.assert_array_equal(runs[0][k], runs[1][k])


def test_train_rejects_empty():
    with pytest.raises(ValueError):
        train_epochs(build_model(ModelSpec("mlp-s", 2, (8, 8, 1))),
                     (np.zeros((0, 8, 8, 1)), np.zeros(0, int)), OptimizerState(), 1)


def test_train_split_epochs_match_one_run():
    spec = ModelSpec("mlp-s", 2, (8, 8, 1), seed=2)
    a = build_model(spec)
    opt_a = OptimizerState()
    train_epochs(a, _toy(), opt_a, 4, 16, rng_seed=3)
    b = build_model(spec)
    opt_b = OptimizerState()
    train_epochs(b, _toy(), opt_b, 2, 16, rng_seed=3)
    train_epochs(b, _toy(), opt_b, 2, 16, rng_seed=3, start_epoch=2)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


# -- checkpoints ---------------------------------------------------------------

@pytest.fixture
def trained():
    spec = ModelSpec("dense-s", 3, (8, 8, 1), deep_block=DeepBlockSpec(4, 2, 2, 3), seed=11)
    m = build_model(spec)
    x = np.random.default_rng(0).random((6, 8, 8, 1)).astype(np.float32)
    train_epochs(m, (x, np.array([0, 1, 2, 0, 1, 2])), OptimizerState(), 2, 4)
    return m, x


def test_checkpoint_round_trip_bit_exact(trained, tmp_path):
    m, x = trained
    path = tmp_path / "m.fsyn"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert back.spec == m.spec
    np.testing.assert_array_equal(forward_batch(back, x), forward_batch(m, x))
    for k in m.params:
        assert back.params[k].tobytes() == m.params[k].tobytes()
    assert dumps(back) == path.read_bytes()


def test_checkpoint_header_layout(trained):
    m, _ = trained
    buf = dumps(m)
    assert buf[:4] == b"FSYN"
    assert int.from_bytes(buf[4:8], "little") == 1
    spec_len = int.from_bytes(buf[8:12], "little")
    first = next(iter(m.params.values()))
    rank = int.from_bytes(buf[12 + spec_len:16 + spec_len], "little")
    assert rank == first.ndim


def test_checkpoint_distinct_errors(trained):
    m, _ = trained
    buf = dumps(m)
    with pytest.raises(BadMagicError, match="bad magic"):
        loads(b"XXXX" + buf[4:])
    with pytest.raises(VersionMismatchError):
        loads(buf[:4] + (2).to_bytes(4, "little") + buf[8:])
    with pytest.raises(TruncatedTensorError):
        loads(buf[:-3])
    with pytest.raises(PayloadMismatchError):
        loads(buf + b"\0\0\0\0")
    assert len({BadMagicError, VersionMismatchError, TruncatedTensorError}) == 3


def test_checkpoint_spec_payload_mismatch(trained):
    m, _ = trained
    other = build_model(ModelSpec("dense-s", 3, (8, 8, 1), hidden=16,
                                  deep_block=DeepBlockSpec(4, 2, 2, 3), seed=11))
    spec_part = dumps(m)
    spec_len = int.from_bytes(spec_part[8:12], "little")
    header = spec_part[:12 + spec_len]
    body = dumps(other)[12 + int.from_bytes(dumps(other)[8:12], "little"):]
    with pytest.raises(PayloadMismatchError):
        loads(header + body)
