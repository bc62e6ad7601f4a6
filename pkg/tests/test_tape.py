import numpy as np
import pytest

from reidlab import ContractError, Tape, UnsupportedOpError, backward, finite_diff_check, ops
from reidlab.checks import check_op_gradients, op_gradient_case


class TestBackwardBasics:
    def test_sum_gradient_is_ones(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 5, 2))
        t = Tape()
        v = t.leaf(x)
        grads = backward(t, ops.sum_all(v))
        np.testing.assert_array_equal(grads[v], np.ones_like(x))

    def test_half_squared_norm_gradient_is_input(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 3))
        t = Tape()
        v = t.leaf(x)
        loss = ops.scale(ops.sum_all(ops.square(v)), 0.5)
        grads = backward(t, loss)
        np.testing.assert_allclose(grads[v], x, rtol=1e-12)

    def test_three_op_composite_matches_finite_differences(self):
        def f(tape, x, y):
            z = ops.relu(ops.matmul(x, y))
            return ops.sum_all(ops.square(z))

        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 4)) + 0.2
        y = rng.normal(size=(4, 2)) + 0.2
        assert finite_diff_check(f, x, y, h=1e-5) < 1e-6

    def test_fan_out_accumulates(self):
        # loss = sum(x*x) + sum(x): d/dx = 2x + 1
        rng = np.random.default_rng(3)
        x = rng.normal(size=(5,))
        t = Tape()
        v = t.leaf(x)
        loss = ops.sum_all(ops.square(v)) + ops.sum_all(v)
        grads = backward(t, loss)
        np.testing.assert_allclose(grads[v], 2 * x + 1, rtol=1e-12)

    def test_non_scalar_loss_rejected(self):
        t = Tape()
        v = t.leaf(np.ones((2, 2)))
        with pytest.raises(ContractError):
            backward(t, ops.square(v))

    def test_unknown_op_kind_rejected(self):
        t = Tape()
        v = t.leaf(np.ones(3))
        with pytest.raises(UnsupportedOpError):
            t.apply("not_an_op", v)

    def test_off_path_node_has_no_gradient(self):
        t = Tape()
        x = t.leaf(np.ones(3))
        y = t.leaf(np.ones(3))
        dead = ops.square(y)  # never feeds the loss
        loss = ops.sum_all(ops.square(x))
        grads = backward(t, loss)
        assert dead not in grads
        assert y not in grads
        np.testing.assert_array_equal(grads.dense(y), np.zeros(3))

    def test_backward_twice_identical(self):
        rng = np.random.default_rng(4)
        t = Tape()
        x = t.leaf(rng.normal(size=(3, 3)))
        y = t.leaf(rng.normal(size=(3, 3)))
        loss = ops.sum_all(ops.relu(ops.matmul(x, y)))
        g1 = backward(t, loss)
        g2 = backward(t, loss)
        assert np.array_equal(g1[x], g2[x])
        assert np.array_equal(g1[y], g2[y])

    def test_const_blocks_gradient_reporting(self):
        t = Tape()
        x = t.leaf(np.array([2.0, 3.0]))
        c = t.const(np.array([4.0, 5.0]))
        loss = ops.sum_all(ops.mul(x, c))
        grads = backward(t, loss)
        np.testing.assert_array_equal(grads[x], [4.0, 5.0])


class TestFiniteDiffCheck:
    def test_dot_with_self(self):
        # f(x) = x . x at [1, 2]: analytic gradient [2, 4]
        def f(tape, x):
            return ops.sum_all(ops.square(x))
        assert finite_diff_check(f, np.array([1.0, 2.0])) < 1e-8

    def test_reports_error_for_broken_gradient(self):
        # deliberately mismatched function pair: gradient of sum(x^2) checked
        # against values of sum(2 x^2) must show ~100% relative error
        calls = {"n": 0}

        def f(tape, x):
            calls["n"] += 1
            factor = 1.0 if calls["n"] == 1 else 2.0
            return ops.scale(ops.sum_all(ops.square(x)), factor)

        err = finite_diff_check(f, np.array([1.0, 2.0]))
        assert err > 0.4

    def test_coordinate_sampling(self):
        def f(tape, x):
            return ops.sum_all(ops.square(x))
        rng = np.random.default_rng(5)
        err = finite_diff_check(f, rng.normal(size=(20, 20)), max_coords=10)
        assert err < 1e-7

    def test_nonfinite_probe_raises_oracle_error(self):
        from reidlab import OracleError

        def f(tape, x):
            # log of a value that goes negative under probing
            v = ops.sum_all(x)
            probed = np.log(np.maximum(float(v.value), -1.0))  # may be nan
            if not np.isfinite(probed):
                return ops.scale(v, float("nan"))
            return ops.scale(v, probed)

        with pytest.raises(OracleError):
            finite_diff_check(f, np.array([-0.5]))

    def test_backward_rejects_unregistered_node(self):
        from reidlab.tape import TapeNode
        t = Tape()
        x = t.leaf(np.ones(2))
        loss = ops.sum_all(ops.square(x))
        # simulate a tape written by a newer producer with an unknown op kind
        t.nodes[loss.idx] = TapeNode("mystery_op", t.nodes[loss.idx].inputs,
                                     t.nodes[loss.idx].value, {})
        with pytest.raises(UnsupportedOpError):
            backward(t, loss)


class TestRegistryWideGradients:
    def test_every_registered_op_passes_gradcheck(self):
        results = check_op_gradients(cases=20, seed=0)
        failing = [r for r in results if not r.passed]
        assert not failing, "op gradient failures: " + ", ".join(
            f"{r.name}={r.error:.2e}" for r in failing)
        # every non-source op kind must be covered
        covered = {r.name.split("/")[1] for r in results}
        assert covered == set(ops.registered_kinds())

    def test_case_generator_covers_all_kinds(self):
        rng = np.random.default_rng(0)
        for kind in ops.registered_kinds():
            f, arrays = op_gradient_case(kind, rng)
            t = Tape()
            out = f(t, *[t.leaf(a) for a in arrays])
            assert out.value.shape == ()
