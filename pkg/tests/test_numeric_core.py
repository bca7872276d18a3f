import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kinepose import numeric_core as nc
from kinepose.gradcheck import check_ops
from kinepose.numeric_core import NonFiniteError, ShapeError, Tape, Tensor, grad_check

from oracles import conv2d_loop, dyadic, matmul_loop, mse_loop, softmax_rows_mp


@pytest.fixture
def g():
    return np.random.default_rng(1234)


class TestTensor:
    def test_rejects_nan_and_inf(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])
        with pytest.raises(NonFiniteError):
            Tensor([[np.inf]])

    def test_rejects_empty_dims(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((0, 3)))

    def test_immutable(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0

    def test_copies_input(self):
        src = np.ones(3)
        t = Tensor(src)
        src[0] = 7.0
        assert t.data[0] == 1.0

    def test_op_overflow_is_an_error(self):
        with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
            nc.scale(Tensor([1e300]), 1e300)


class TestMatmul:
    def test_identity(self):
        out = nc.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
        assert out.data.tolist() == [[3, 4], [5, 6]]

    def test_row_by_column(self):
        assert nc.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]

    def test_matches_loop_oracle_exactly(self, g):
        a, b = dyadic(g, 3, 4), dyadic(g, 4, 2)
        np.testing.assert_array_equal(nc.matmul(Tensor(a), Tensor(b)).data, matmul_loop(a, b))

    def test_random_floats_close_to_loop_oracle(self, g):
        a, b = g.normal(size=(5, 7)), g.normal(size=(7, 3))
        np.testing.assert_allclose(nc.matmul(Tensor(a), Tensor(b)).data, matmul_loop(a, b), rtol=1e-14, atol=1e-15)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestConvexMix:
    def test_matches_product_on_exact_inputs(self, g):
        w = np.array([[0.5, 0.25, 0.25], [0.0, 1.0, 0.0]])
        v = dyadic(g, 3, 4)
        np.testing.assert_array_equal(nc.convex_mix(Tensor(w), Tensor(v)).data, matmul_loop(w, v))

    def test_stays_in_column_range(self, g):
        for _ in range(200):
            w = nc.softmax_rows(Tensor(g.normal(size=(5, 5)) * 20)).data
            v = g.normal(size=(5, 7))
            out = nc.convex_mix(Tensor(w), Tensor(v)).data
            assert np.all(out >= v.min(axis=0)) and np.all(out <= v.max(axis=0))

    def test_constant_column_is_reproduced(self, g):
        w = nc.softmax_rows(Tensor(g.normal(size=(4, 4)))).data
        v = np.full((4, 3), 0.1)
        assert nc.convex_mix(Tensor(w), Tensor(v)).data.tobytes() == v[:4].tobytes()


class TestSoftmaxRows:
    def test_uniform_row(self):
        out = nc.softmax_rows(Tensor([[0.0, 0.0, 0.0]]), 1.0)
        np.testing.assert_allclose(out.data, [[1 / 3] * 3], rtol=1e-15)

    def test_large_logits_do_not_overflow(self):
        out = nc.softmax_rows(Tensor([[1000.0, 0.0]]), 1.0)
        assert out.data[0, 0] == 1.0
        assert out.data[0, 1] == 0.0 or out.data[0, 1] < 1e-300

    def test_matches_extended_precision_oracle(self, g):
        x = g.normal(size=(3, 3)) * 3
        ref = softmax_rows_mp(x, 1.5)
        out = nc.softmax_rows(Tensor(x), 1.5).data
        for i in range(3):
            for j in range(3):
                assert abs(out[i, j] - float(ref[i][j])) <= 1e-14 * float(ref[i][j])

    def test_non_square(self, g):
        out = nc.softmax_rows(Tensor(g.normal(size=(2, 5))))
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)

    def test_rejects_nonpositive_scale(self):
        with pytest.raises(ValueError):
            nc.softmax_rows(Tensor(np.zeros((2, 2))), 0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=9, max_size=9), st.floats(0.1, 10))
    def test_rows_are_distributions(self, values, scale):
        out = nc.softmax_rows(Tensor(np.array(values).reshape(3, 3)), scale).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(out >= 0) and np.all(out <= 1)


class TestConv2d:
    def test_identity_1x1(self, g):
        x = g.normal(size=(4, 5, 6))
        w = np.eye(4).reshape(4, 4, 1, 1)
        np.testing.assert_array_equal(nc.conv2d(Tensor(x), Tensor(w)).data, x)

    def test_zero_weights(self, g):
        out = nc.conv2d(Tensor(g.normal(size=(2, 4, 4))), Tensor(np.zeros((3, 2, 3, 3))))
        assert out.shape == (3, 4, 4)
        assert not out.data.any()

    def test_3x3_matches_loop_oracle_exactly(self, g):
        x, w = dyadic(g, 2, 4, 4), dyadic(g, 3, 2, 3, 3)
        np.testing.assert_array_equal(nc.conv2d(Tensor(x), Tensor(w)).data, conv2d_loop(x, w))

    def test_stride2_matches_loop_oracle_exactly(self, g):
        x, w = dyadic(g, 3, 8, 6), dyadic(g, 2, 3, 3, 3)
        out = nc.conv2d(Tensor(x), Tensor(w), stride=2)
        assert out.shape == (2, 4, 3)
        np.testing.assert_array_equal(out.data, conv2d_loop(x, w, stride=2))

    def test_1x1_is_per_pixel_matrix_product(self, g):
        x, w = dyadic(g, 5, 3, 4), dyadic(g, 2, 5, 1, 1)
        out = nc.conv2d(Tensor(x), Tensor(w)).data
        wm = w[:, :, 0, 0]
        for i in range(3):
            for j in range(4):
                np.testing.assert_array_equal(out[:, i, j], matmul_loop(wm, x[:, i, j][:, None])[:, 0])

    def test_random_floats_close_to_loop_oracle(self, g):
        x, w = g.normal(size=(3, 5, 5)), g.normal(size=(4, 3, 3, 3))
        np.testing.assert_allclose(nc.conv2d(Tensor(x), Tensor(w)).data, conv2d_loop(x, w), rtol=1e-13, atol=1e-14)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            nc.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    def test_unsupported_kernel(self):
        with pytest.raises(ShapeError):
            nc.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 2, 5, 5))))


class TestRelu:
    def test_values(self):
        assert nc.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]

    def test_all_negative_has_zero_gradient(self):
        x = Tensor([-1.0, -2.0, -0.5])
        with Tape() as tape:
            y = nc.total(nc.relu(x))
        assert y.item() == 0.0
        assert not tape.gradient(y, [x])[0].any()

    def test_gradient_at_zero_is_zero(self):
        x = Tensor([0.0])
        with Tape() as tape:
            y = nc.total(nc.relu(x))
        assert tape.gradient(y, [x])[0].tolist() == [0.0]

    def test_abs_identity(self, g):
        x = g.normal(size=(4, 4))
        pos = nc.relu(Tensor(x)).data
        neg = nc.relu(Tensor(-x)).data
        np.testing.assert_array_equal(pos + neg, np.abs(x))


class TestMseLoss:
    def test_equal_is_zero(self, g):
        a = g.normal(size=(3, 4))
        assert nc.mse_loss(Tensor(a), Tensor(a)).item() == 0.0

    def test_offset_one(self, g):
        a = g.normal(size=(3, 4))
        assert nc.mse_loss(Tensor(a + 1.0), Tensor(a)).item() == pytest.approx(1.0, rel=1e-14)

    def test_loop_oracle(self, g):
        a, b = g.normal(size=(2, 3, 5)), g.normal(size=(2, 3, 5))
        assert nc.mse_loss(Tensor(a), Tensor(b)).item() == pytest.approx(mse_loop(a, b), rel=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            nc.mse_loss(Tensor(np.ones(3)), Tensor(np.ones(4)))


class TestTape:
    def test_diamond_accumulates_both_paths(self, g):
        # y = sum(relu(x) + 3x): x feeds two branches that rejoin.
        x = Tensor(g.normal(size=(3, 3)))

        def f(t):
            return nc.total(nc.add(nc.relu(t), nc.scale(t, 3.0)))

        with Tape() as tape:
            y = f(x)
        grad = tape.gradient(y, [x])[0]
        np.testing.assert_allclose(grad, np.where(x.data > 0, 4.0, 3.0))
        assert grad_check(f, x) < 1e-8

    def test_same_tensor_twice_in_one_op(self, g):
        a = Tensor(g.normal(size=(3, 3)))
        with Tape() as tape:
            y = nc.total(nc.matmul(a, a))
        grad = tape.gradient(y, [a])[0]
        ones = np.ones((3, 3))
        np.testing.assert_allclose(grad, ones @ a.data.T + a.data.T @ ones)

    def test_unrelated_source_gets_zero(self):
        a, b = Tensor([1.0]), Tensor([2.0])
        with Tape() as tape:
            y = nc.total(nc.scale(a, 2.0))
        assert tape.gradient(y, [b])[0].tolist() == [0.0]

    def test_nodes_in_topological_order(self, g):
        x = Tensor(g.normal(size=(2, 2)))
        with Tape() as tape:
            nc.total(nc.relu(nc.matmul(x, x)))
        produced = {id(x)}
        for node in tape.nodes:
            assert all(id(i) in produced for i in node.inputs)
            produced.add(id(node.output))

    def test_no_recording_outside_tape(self):
        tape = Tape()
        nc.relu(Tensor([1.0]))
        assert tape.nodes == []

    def test_target_must_be_scalar(self):
        x = Tensor([1.0, 2.0])
        with Tape() as tape:
            y = nc.relu(x)
        with pytest.raises(ShapeError):
            tape.gradient(y, [x])


class TestGradCheck:
    def test_linear_is_exact(self, g):
        x = Tensor(g.normal(size=(4,)))
        assert grad_check(lambda t: nc.total(nc.scale(t, 2.0)), x) < 1e-10

    def test_softmax_sum_is_constant(self, g):
        x = Tensor(g.normal(size=(3, 3)))
        f = lambda t: nc.total(nc.softmax_rows(t))  # noqa: E731
        assert grad_check(f, x) < 1e-8
        with Tape() as tape:
            y = f(x)
        assert np.abs(tape.gradient(y, [x])[0]).max() < 1e-12

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            grad_check(lambda t: nc.total(t), Tensor([1.0]), h=1e-2)

    @pytest.mark.parametrize("seed", range(20))
    def test_every_op(self, seed):
        errors = check_ops(seed)
        assert max(errors.values()) < 1e-5, errors


class TestTenFormat:
    def test_round_trip_bitwise(self, g):
        t = Tensor(g.normal(size=(2, 3, 4)))
        back = nc.tensor_from_bytes(nc.tensor_to_bytes(t))
        assert back.shape == t.shape
        assert back.data.tobytes() == t.data.tobytes()

    def test_layout(self):
        blob = nc.tensor_to_bytes(Tensor([[1.0, 2.0, 3.0]]))
        assert blob[:4] == b"KTEN"
        assert blob[4] == 1 and blob[5] == 2
        assert blob[6:14] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
        assert np.frombuffer(blob[14:], "<f8").tolist() == [1.0, 2.0, 3.0]
        assert len(blob) == 14 + 24

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            nc.read_tensor(io.BytesIO(b"NOPE\x01\x00"))

    def test_truncated(self):
        blob = nc.tensor_to_bytes(Tensor(np.ones(4)))
        with pytest.raises(ValueError):
            nc.tensor_from_bytes(blob[:-3])
