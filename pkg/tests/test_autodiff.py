import threading

import numpy as np
import pytest

from graphter import autodiff as ad
from graphter.autodiff import Tape, Tensor, backward
from graphter.autodiff import checkpoint as ckpt
from graphter.autodiff.gradcheck import REGISTRY, check_function, gradcheck, register


def naive_matmul(a, b):
    n, m = a.shape
    _, p = b.shape
    out = np.zeros((n, p))
    for i in range(n):
        for j in range(p):
            s = 0.0
            for t in range(m):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def test_relu_definition():
    assert ad.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_leaky_relu_paper_slope():
    out = ad.leaky_relu(Tensor(np.array([-1.0, 2.0])), 0.2).data
    assert out.tolist() == pytest.approx([-0.2, 2.0], abs=1e-15)


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((3, 4))
    out = ad.matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(out, naive_matmul(a, b), rtol=0, atol=1e-12)


def test_square_gradient():
    x = Tensor(np.array(3.0), requires_grad=True)
    backward(ad.multiply(x, x))
    assert x.grad == pytest.approx(6.0)


def test_max_gradient_routes_to_argmax_only():
    x = Tensor(np.array([[1.0, 5.0, 2.0], [7.0, 7.0, 0.0]]), requires_grad=True)
    vals, idx = ad.max_over_axis(x, 1)
    assert idx.tolist() == [1, 0]  # tie goes to the lowest index
    backward(ad.sum_over_axis(vals))
    assert x.grad.tolist() == [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]


@pytest.mark.parametrize("op", sorted(REGISTRY))
def test_every_op_matches_finite_differences(op):
    report = gradcheck(op, trials=10, tolerance=1e-4)
    assert report.passed, report.summary()
    assert len(report.errors) == 10


def test_gradcheck_named_examples():
    assert gradcheck("matmul", 10, 1e-4).passed
    assert gradcheck("batchnorm", 10, 1e-4).passed


def test_gradcheck_unknown_op():
    with pytest.raises(KeyError):
        gradcheck("no_such_op")


def test_gradcheck_catches_corrupted_backward():
    def bad_square(a):
        # backward deliberately off by a factor of 2
        return ad.record_op("bad_square", a.data * a.data, (a,), lambda g: (g * a.data,))

    register("bad_square", lambda r: [r.standard_normal((3, 3))], bad_square)
    try:
        report = gradcheck("bad_square", 5, 1e-4)
        assert not report.passed
        assert report.max_error > 0.1
    finally:
        REGISTRY.pop("bad_square")


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.ShapeError):
        backward(ad.multiply(x, 2.0))


def test_backward_twice_raises():
    x = Tensor(np.array(2.0), requires_grad=True)
    y = ad.multiply(x, x)
    backward(y)
    with pytest.raises(ad.TapeError):
        backward(y)


def test_backward_on_untaped_tensor_raises():
    with pytest.raises(ad.TapeError):
        backward(Tensor(np.array(1.0)))


def test_tape_records_in_topological_order_and_resets():
    with Tape() as tape:
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        y = ad.relu(ad.add(x, 1.0))
        z = ad.sum_over_axis(y)
        assert [r.op for r in tape.records] == ["add", "relu", "sum"]
        seen = set()
        for r in tape.records:
            for inp in r.inputs:
                if inp._record is not None:
                    assert id(inp._record) in seen
            seen.add(id(r))
        backward(z)
        assert len(tape) == 0


def test_no_grad_records_nothing():
    with Tape() as tape:
        x = Tensor(np.ones(3), requires_grad=True)
        with ad.no_grad():
            y = ad.multiply(x, x)
        assert len(tape) == 0
        assert not y.requires_grad


def test_shared_leaf_accumulates():
    w = Tensor(np.array([2.0]), requires_grad=True)
    a = ad.multiply(w, 3.0)
    b = ad.multiply(w, w)
    backward(ad.sum_over_axis(ad.add(a, b)))
    assert w.grad.tolist() == [3.0 + 4.0]


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ad.ShapeError, match=r"matmul.*\(2, 3\).*\(4, 5\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(ad.ShapeError, match=r"add.*\(2, 3\).*\(4,\)"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


def test_invalid_axis():
    with pytest.raises(ad.ShapeError):
        ad.max_over_axis(Tensor(np.ones((2, 3))), 2)
    with pytest.raises(ad.ShapeError):
        ad.concat([Tensor(np.ones((2, 3)))], axis=-3)


def test_log_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(0).standard_normal((20, 7)) * 5)
    out = ad.log_softmax(x, 1).data
    np.testing.assert_allclose(np.exp(out).sum(axis=1), 1.0, atol=1e-9)


def test_batchnorm_train_output_statistics():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((8, 16, 4)) * 3 + 2)
    state = ad.BatchNormState.create(4, np.float64)
    out = ad.batchnorm(x, state.gamma, state.beta, state, training=True).data.reshape(-1, 4)
    assert np.all(np.abs(out.mean(axis=0)) < 1e-6)
    assert np.all(np.abs(out.var(axis=0) - 1.0) < 1e-4)


def test_batchnorm_running_stats_momentum():
    x = np.array([[0.0], [2.0]])
    state = ad.BatchNormState.create(1, np.float64)
    ad.batchnorm(Tensor(x), state.gamma, state.beta, state, training=True)
    assert state.running_mean[0] == pytest.approx(0.1 * 1.0)
    assert state.running_var[0] == pytest.approx(0.9 + 0.1 * 2.0)  # unbiased var of [0, 2] is 2


def test_dropout_eval_identity_and_train_scaling():
    x = Tensor(np.ones((50, 40)))
    assert ad.dropout(x, 0.5, None, training=False) is x
    out = ad.dropout(x, 0.5, np.random.default_rng(0), training=True).data
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert 0.4 < (out > 0).mean() < 0.6


def test_identical_seeds_bitwise_identical():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((16, 8)).astype(np.float32))
        w = Tensor(rng.standard_normal((8, 8)).astype(np.float32))
        h = ad.leaky_relu(ad.matmul(x, w), 0.2)
        return ad.dropout(h, 0.5, rng, training=True).data

    assert run().tobytes() == run().tobytes()


def test_concurrent_tapes_are_independent():
    errors = []

    def worker(seed):
        try:
            rng = np.random.default_rng(seed)
            for _ in range(20):
                with Tape():
                    a = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
                    backward(ad.sum_over_axis(ad.multiply(a, a)))
                    np.testing.assert_allclose(a.grad, 2 * a.data)
        except Exception as exc:  # pragma: no cover - surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=(s,)) for s in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors


def test_check_function_float64_path():
    rng = np.random.default_rng(0)
    err = check_function(lambda a, b: ad.matmul(a, b), [rng.standard_normal((2, 3)), rng.standard_normal((3, 2))], rng)
    assert err < 1e-6


def test_checkpoint_roundtrip(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5], dtype=np.float32)}
    path = tmp_path / "x.gter"
    ckpt.save(path, arrays, {"kind": "rotation"})
    raw = path.read_bytes()
    assert raw[:4] == b"GTER"
    assert int.from_bytes(raw[4:8], "little") == ckpt.VERSION
    back, meta = ckpt.load(path)
    assert meta == {"kind": "rotation"}
    for k in arrays:
        assert back[k].tobytes() == arrays[k].tobytes()


def test_checkpoint_rejects_unknown_version_and_magic(tmp_path):
    raw = bytearray(ckpt.dumps({"a": np.zeros(2, np.float32)}))
    raw[4:8] = (99).to_bytes(4, "little")
    with pytest.raises(ckpt.CheckpointError, match="version"):
        ckpt.loads(bytes(raw))
    with pytest.raises(ckpt.CheckpointError, match="magic"):
        ckpt.loads(b"XXXX" + bytes(raw[4:]))
