"""Tensor-engine unit tests: frozen examples, error contracts, gradchecks."""

import math

import numpy as np
import pytest

from adapt3d import numerics as nm
from oracles import fd_check


class TestMatmul:
    def test_identity(self, rng):
        a = rng.normal(size=(3, 3)).astype(np.float32)
        eye = nm.tensor(np.eye(3, dtype=np.float32))
        out = nm.matmul(eye, nm.tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_hand_example(self):
        out = nm.matmul(nm.tensor([[1.0, 2.0], [3.0, 4.0]]), nm.tensor([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_shape_error_mentions_both_shapes(self):
        with pytest.raises(nm.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            nm.matmul(nm.tensor(np.zeros((2, 3))), nm.tensor(np.zeros((2, 3))))

    def test_batched_broadcast(self, rng):
        a = rng.normal(size=(4, 2, 3, 5)).astype(np.float32)
        b = rng.normal(size=(5, 7)).astype(np.float32)
        out = nm.matmul(nm.tensor(a), nm.tensor(b))
        assert out.shape == (4, 2, 3, 7)
        np.testing.assert_array_equal(out.data, a @ b)

    def test_gradcheck(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        fd_check(lambda x, y: nm.sum(nm.matmul(x, y)), [a, b], label="matmul")

    def test_gradcheck_batched(self, rng):
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(4, 3))
        fd_check(lambda x, y: nm.sum(nm.matmul(x, y)), [a, b], label="matmul batched")


class TestSoftmax:
    def test_uniform(self):
        out = nm.softmax(nm.tensor([0.0, 0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-7)

    def test_closed_form(self):
        out = nm.softmax(nm.tensor([0.0, math.log(2.0)]), axis=0)
        np.testing.assert_allclose(out.data, [1 / 3, 2 / 3], atol=1e-7)

    def test_rows_sum_to_one(self, rng):
        x = rng.normal(size=(5, 7)) * 10
        out = nm.softmax(nm.tensor(x), axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(5), atol=1e-6)

    def test_shift_invariance(self, rng):
        x = rng.normal(size=(4, 6))
        a = nm.softmax(nm.tensor(x), axis=-1).data
        b = nm.softmax(nm.tensor(x + 123.0), axis=-1).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_large_logits_stable(self):
        out = nm.softmax(nm.tensor([1000.0, 0.0]), axis=0)
        assert np.isfinite(out.data).all()

    def test_non_finite_rejected(self):
        bad = nm.tensor([0.0, 1.0])
        bad.data[0] = np.nan
        with pytest.raises(nm.NumericError):
            nm.softmax(bad, axis=0)

    def test_gradcheck(self, rng):
        x = rng.normal(size=(3, 5))
        w = rng.normal(size=(3, 5))
        fd_check(
            lambda a: nm.sum(nm.mul(nm.softmax(a, axis=-1), nm.tensor(w, dtype=np.float64))),
            [x],
            label="softmax",
        )


class TestLayerNorm:
    def test_constant_token_collapses_to_bias(self):
        x = nm.tensor(np.full((4,), 3.5))
        out = nm.layer_norm(x, nm.tensor(np.ones(4)), nm.tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, np.zeros(4), atol=1e-5)

    def test_two_point_closed_form(self):
        out = nm.layer_norm(
            nm.tensor([1.0, 3.0]), nm.tensor(np.ones(2)), nm.tensor(np.zeros(2))
        )
        np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=2e-5)

    def test_output_statistics(self, rng):
        x = rng.normal(size=(6, 32)) * 3 + 1
        out = nm.layer_norm(
            nm.tensor(x), nm.tensor(np.ones(32)), nm.tensor(np.zeros(32))
        ).data
        assert np.abs(out.mean(axis=-1)).max() <= 1e-6
        np.testing.assert_allclose(out.var(axis=-1), np.ones(6), atol=1e-4)

    def test_gradcheck(self, rng):
        x = rng.normal(size=(3, 6))
        g = rng.normal(size=(6,))
        b = rng.normal(size=(6,))
        w = rng.normal(size=(3, 6))
        fd_check(
            lambda xx, gg, bb: nm.sum(
                nm.mul(nm.layer_norm(xx, gg, bb), nm.tensor(w, dtype=np.float64))
            ),
            [x, g, b],
            label="layer_norm",
        )


class TestGluePrimitives:
    def test_gelu_zero(self):
        assert float(nm.gelu(nm.tensor([0.0])).data[0]) == 0.0

    def test_concat_shapes(self, rng):
        a = nm.tensor(rng.normal(size=(2, 3)))
        b = nm.tensor(rng.normal(size=(2, 5)))
        assert nm.concat([a, b], axis=1).shape == (2, 8)

    def test_concat_mismatch(self, rng):
        a = nm.tensor(rng.normal(size=(2, 3)))
        b = nm.tensor(rng.normal(size=(3, 5)))
        with pytest.raises(nm.ShapeError):
            nm.concat([a, b], axis=1)

    def test_add_suffix_broadcast(self, rng):
        x = rng.normal(size=(4, 3, 5)).astype(np.float32)
        b = rng.normal(size=(5,)).astype(np.float32)
        out = nm.add(nm.tensor(x), nm.tensor(b))
        np.testing.assert_array_equal(out.data, x + b)

    def test_add_rejects_interior_broadcast(self, rng):
        x = nm.tensor(rng.normal(size=(4, 1, 5)))
        y = nm.tensor(rng.normal(size=(4, 3, 5)))
        with pytest.raises(nm.ShapeError):
            nm.add(x, y)

    def test_split_roundtrip(self, rng):
        x = rng.normal(size=(2, 7)).astype(np.float32)
        parts = nm.split(nm.tensor(x), [3, 4], axis=1)
        np.testing.assert_array_equal(parts[0].data, x[:, :3])
        np.testing.assert_array_equal(parts[1].data, x[:, 3:])

    def test_transpose_not_permutation(self, rng):
        with pytest.raises(nm.ShapeError):
            nm.transpose(nm.tensor(rng.normal(size=(2, 3))), (0, 0))

    def test_broadcast_to(self, rng):
        x = rng.normal(size=(1, 4)).astype(np.float32)
        out = nm.broadcast_to(nm.tensor(x), (3, 2, 4))
        assert out.shape == (3, 2, 4)
        with pytest.raises(nm.ShapeError):
            nm.broadcast_to(nm.tensor(x), (3, 5))

    @pytest.mark.parametrize(
        "name,build,shapes",
        [
            ("add", lambda a, b: nm.sum(nm.add(a, b)), [(3, 4), (4,)]),
            ("mul", lambda a, b: nm.sum(nm.mul(a, b)), [(3, 4), (3, 4)]),
            ("scale", lambda a: nm.sum(nm.scale(a, -2.5)), [(3, 4)]),
            ("mean_all", lambda a: nm.mean(a), [(3, 4)]),
            ("mean_axis", lambda a: nm.sum(nm.mean(a, axis=1)), [(3, 4, 2)]),
            ("sum_axis", lambda a: nm.sum(nm.sum(a, axis=0)), [(3, 4)]),
            ("gelu", lambda a: nm.sum(nm.gelu(a)), [(3, 4)]),
            ("reshape", lambda a: nm.sum(nm.reshape(a, (2, 6))), [(3, 4)]),
            ("transpose", lambda a: nm.sum(nm.transpose(a, (1, 0))), [(3, 4)]),
            ("narrow", lambda a: nm.sum(nm.narrow(a, 1, 1, 2)), [(3, 4)]),
            ("concat", lambda a, b: nm.sum(nm.concat([a, b], axis=0)), [(2, 3), (1, 3)]),
            ("broadcast", lambda a: nm.sum(nm.broadcast_to(a, (4, 2, 3))), [(2, 3)]),
        ],
    )
    def test_gradcheck_each(self, rng, name, build, shapes):
        arrays = [rng.normal(size=s) for s in shapes]
        fd_check(build, arrays, label=name)


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = nm.cross_entropy(nm.tensor([[0.0, 0.0]]), np.array([0]))
        assert float(loss.data) == pytest.approx(math.log(2.0), rel=1e-6)

    def test_saturated_correct(self):
        loss = nm.cross_entropy(nm.tensor([[20.0, -20.0]]), np.array([0]))
        assert float(loss.data) == pytest.approx(0.0, abs=1e-6)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="label out of range"):
            nm.cross_entropy(nm.tensor([[0.0, 0.0]]), np.array([2]))

    def test_gradcheck(self, rng):
        logits = rng.normal(size=(4, 2))
        labels = np.array([0, 1, 1, 0])
        fd_check(lambda x: nm.cross_entropy(x, labels), [logits], label="cross_entropy")


class TestBackward:
    def test_sum_grad_is_ones(self, rng):
        x = nm.tensor(rng.normal(size=(3, 4)).astype(np.float32), requires_grad=True)
        with nm.Tape() as tape:
            loss = nm.sum(x)
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((3, 4), dtype=np.float32))

    def test_product_rule(self, rng):
        xv = rng.normal(size=(5,)).astype(np.float32)
        yv = rng.normal(size=(5,)).astype(np.float32)
        x, y = nm.tensor(xv, requires_grad=True), nm.tensor(yv, requires_grad=True)
        with nm.Tape() as tape:
            tape.backward(nm.sum(nm.mul(x, y)))
        np.testing.assert_array_equal(x.grad, yv)
        np.testing.assert_array_equal(y.grad, xv)

    def test_loss_grad_wrt_itself_is_one(self, rng):
        x = nm.tensor([2.0], requires_grad=True)
        with nm.Tape() as tape:
            loss = nm.sum(x)
            tape.backward(loss)
        np.testing.assert_array_equal(loss.grad, np.ones(()))

    def test_non_scalar_loss_rejected(self, rng):
        x = nm.tensor(rng.normal(size=(3,)), requires_grad=True)
        with nm.Tape() as tape:
            out = nm.scale(x, 2.0)
            with pytest.raises(nm.ShapeError):
                tape.backward(out)

    def test_consumed_tape_rejected(self):
        x = nm.tensor([1.0], requires_grad=True)
        with nm.Tape() as tape:
            loss = nm.sum(x)
            tape.backward(loss)
            with pytest.raises(nm.TapeError):
                tape.backward(loss)

    def test_backward_without_tape_rejected(self):
        x = nm.tensor([1.0], requires_grad=True)
        loss = nm.sum(x)  # no active tape
        with pytest.raises(nm.TapeError):
            nm.backward(loss)

    def test_shared_input_accumulates(self):
        x = nm.tensor([3.0], requires_grad=True)
        with nm.Tape() as tape:
            tape.backward(nm.sum(nm.mul(x, x)))
        np.testing.assert_allclose(x.grad, [6.0])

    def test_module_level_backward(self):
        x = nm.tensor([1.0, 2.0], requires_grad=True)
        with nm.Tape():
            loss = nm.sum(x)
        nm.backward(loss)
        np.testing.assert_array_equal(x.grad, [1.0, 1.0])


class TestHygiene:
    def test_parallel_tapes_on_distinct_threads(self, rng):
        import threading

        xs = [rng.normal(size=(16,)).astype(np.float32) for _ in range(4)]
        grads = [None] * 4

        def work(i):
            x = nm.tensor(xs[i], requires_grad=True)
            with nm.Tape() as tape:
                tape.backward(nm.sum(nm.mul(x, x)))
            grads[i] = x.grad

        threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for x, g in zip(xs, grads):
            np.testing.assert_allclose(g, 2 * x, rtol=1e-6)

    def test_nested_tape_rejected(self):
        with nm.Tape():
            with pytest.raises(nm.TapeError):
                with nm.Tape():
                    pass

    def test_tensor_rejects_non_finite(self):
        with pytest.raises(nm.NumericError):
            nm.tensor([np.inf, 1.0])

    def test_determinism(self, rng):
        x = rng.normal(size=(4, 4))
        a = nm.softmax(nm.gelu(nm.tensor(x)), axis=-1).data
        b = nm.softmax(nm.gelu(nm.tensor(x)), axis=-1).data
        assert (a == b).all()

    def test_float32_by_default(self):
        assert nm.tensor([1, 2, 3]).dtype == np.float32

    def test_grad_absent_until_backward(self):
        x = nm.tensor([1.0], requires_grad=True)
        y = nm.scale(x, 2.0)
        assert x.grad is None and y.grad is None
