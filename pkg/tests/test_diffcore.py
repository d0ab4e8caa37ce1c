import numpy as np
import pytest

from kcn.diffcore import (
    CheckpointError,
    ComputeGraph,
    NotPositiveDefiniteError,
    ShapeError,
    Tensor,
    cholesky,
    finite_diff_check,
    jittered_cholesky,
    load_checkpoint,
    no_grad,
    ops,
    parameter,
    save_checkpoint,
    solve_triangular,
)
from kcn.diffcore.tensor import make_result


def _spd(rng, n):
    a = rng.normal(size=(n, n))
    return a @ a.T + n * np.eye(n)


def _lower(rng, n):
    L = np.tril(rng.normal(size=(n, n)), -1)
    L[np.diag_indices(n)] = rng.uniform(0.5, 2.0, size=n)
    return L


# Each entry: builder(rng) -> (list of parameter arrays, fn(*tensors) -> Tensor)
def _op_cases():
    return {
        "add": lambda r: ([r.normal(size=(3, 4)), r.normal(size=(4,))], lambda a, b: a + b),
        "sub": lambda r: ([r.normal(size=(3, 1)), r.normal(size=(3, 4))], lambda a, b: a - b),
        "mul": lambda r: ([r.normal(size=(2, 3)), r.normal(size=(2, 3))], lambda a, b: a * b),
        "div": lambda r: ([r.normal(size=(2, 3)), r.uniform(1, 2, size=(3,))], lambda a, b: a / b),
        "exp": lambda r: ([r.normal(size=(5,))], ops.exp),
        "log": lambda r: ([r.uniform(0.5, 2.0, size=(5,))], ops.log),
        "square": lambda r: ([r.normal(size=(2, 3))], ops.square),
        "sqrt": lambda r: ([r.uniform(0.5, 2.0, size=(4,))], ops.sqrt),
        "softplus": lambda r: ([r.normal(size=(6,))], ops.softplus),
        "relu": lambda r: ([r.normal(size=(3, 3)) + np.sign(r.normal(size=(3, 3))) * 0.1], ops.relu),
        "sum": lambda r: ([r.normal(size=(3, 4))], lambda a: ops.sum(a, axis=1)),
        "mean": lambda r: ([r.normal(size=(3, 4))], lambda a: ops.mean(a, axis=0, keepdims=True)),
        "reshape": lambda r: ([r.normal(size=(3, 4))], lambda a: ops.reshape(a, (2, 6))),
        "transpose": lambda r: ([r.normal(size=(2, 3, 4))], lambda a: ops.transpose(a, (2, 0, 1))),
        "getitem": lambda r: ([r.normal(size=(4, 3))], lambda a: a[np.array([0, 2, 2]), 1:]),
        "concat": lambda r: ([r.normal(size=(2, 3)), r.normal(size=(2, 2))], lambda a, b: ops.concat([a, b], axis=1)),
        "matmul": lambda r: ([r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))], ops.matmul),
        "einsum": lambda r: ([r.normal(size=(2, 3, 4)), r.normal(size=(3, 5, 4, 2))],
                             lambda a, b: ops.einsum("npd,pjdk->npjk", a, b)),
        "affine": lambda r: ([r.normal(size=(3, 4)), r.normal(size=(4, 2)), r.normal(size=(2,))], ops.affine),
        "l2_norm": lambda r: ([r.normal(size=(3, 4))], lambda a: ops.l2_norm(a, axis=-1, eps=1e-9)),
        "softmax": lambda r: ([r.normal(size=(3, 4))], lambda a: ops.softmax(a, axis=0)),
        "log_softmax": lambda r: ([r.normal(size=(3, 4))], lambda a: ops.log_softmax(a, axis=-1)),
        "conv2d": lambda r: ([r.normal(size=(2, 2, 5, 5)), r.normal(size=(3, 2, 3, 3)), r.normal(size=(3,))],
                             lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=1)),
        "max_pool2d": lambda r: ([r.normal(size=(1, 2, 4, 5))], ops.max_pool2d),
        "cholesky": lambda r: ([r.normal(size=(4, 4))],
                               lambda b: cholesky(ops.matmul(b, ops.transpose(b)) + Tensor(4 * np.eye(4)))),
        "solve_triangular": lambda r: ([_lower(r, 4), r.normal(size=(4, 3))],
                                       lambda a, b: solve_triangular(a, b, lower=True)),
        "solve_triangular_T": lambda r: ([_lower(r, 3), r.normal(size=(3,))],
                                         lambda a, b: solve_triangular(a, b, lower=True, trans=True)),
        "solve_triangular_upper": lambda r: ([_lower(r, 3).T, r.normal(size=(3, 2))],
                                             lambda a, b: solve_triangular(a, b, lower=False)),
    }


OP_CASES = _op_cases()


def _weighted_graph(arrays, fn, rng):
    params = {f"p{i}": parameter(a) for i, a in enumerate(arrays)}
    out_shape = fn(*[Tensor(a) for a in arrays]).shape
    weights = Tensor(rng.normal(size=out_shape))

    def body(p, _inputs):
        out = fn(*[p[f"p{i}"] for i in range(len(arrays))])
        return {"loss": ops.sum(out * weights)}
    return ComputeGraph(body, params)


class TestForwardExamples:
    def test_conv2d_ones(self):
        out = ops.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), stride=2)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))

    def test_conv2d_matches_direct_loops(self):
        rng = np.random.default_rng(3)
        x, w = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, 3, 2))
        out = ops.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(out)
        for n in range(2):
            for o in range(4):
                for i in range(out.shape[2]):
                    for j in range(out.shape[3]):
                        ref[n, o, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 2] * w[o])
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_softmax_uniform(self):
        np.testing.assert_allclose(ops.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)

    def test_cholesky_identity(self):
        np.testing.assert_array_equal(cholesky(Tensor(np.eye(3))).data, np.eye(3))

    def test_max_pool(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(ops.max_pool2d(Tensor(x)).data, [[[[5, 7], [13, 15]]]])


class TestErrors:
    def test_matmul_shape_error_names_op_and_shapes(self):
        with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(4, 5\)"):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_conv_channel_mismatch(self):
        with pytest.raises(ShapeError, match="conv2d"):
            ops.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 2, 2))))

    def test_cholesky_reports_leading_minor(self):
        a = np.diag([1.0, 2.0, -1.0, 4.0])
        with pytest.raises(NotPositiveDefiniteError) as info:
            cholesky(Tensor(a))
        assert info.value.minor == 3

    def test_jitter_rescues_singular_then_gives_up(self):
        L, jitter = jittered_cholesky(Tensor(np.ones((3, 3))))
        assert jitter == 1e-6
        assert np.all(np.diag(L.data) > 0)
        with pytest.raises(NotPositiveDefiniteError):
            jittered_cholesky(Tensor(-np.eye(2)))

    def test_non_finite_output_is_an_error(self):
        with pytest.raises(FloatingPointError):
            ops.exp(Tensor([1000.0]))

    def test_backward_before_forward(self):
        g = ComputeGraph(lambda p, i: {"y": ops.sum(p["w"])}, {"w": parameter(np.ones(2))})
        with pytest.raises(RuntimeError, match="before forward"):
            g.backward()

    def test_seed_shape_mismatch(self):
        g = ComputeGraph(lambda p, i: {"y": p["w"] * 2.0}, {"w": parameter(np.ones(3))})
        g.forward({})
        with pytest.raises(ShapeError):
            g.backward(seed=np.ones(2))

    def test_input_shape_declared(self):
        g = ComputeGraph(lambda p, i: {"y": ops.sum(i["x"] * p["w"])}, {"w": parameter(np.ones(3))},
                         inputs={"x": (3,)})
        with pytest.raises(ShapeError, match="'x'"):
            g.forward({"x": np.ones(4)})


class TestBackwardExamples:
    def test_sum_of_squares(self):
        x = parameter([1.0, 2.0, 3.0])
        ops.sum(ops.square(x)).backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_softmax_nll(self):
        z = parameter([0.0, 0.0])
        loss = -ops.sum(ops.log_softmax(z) * Tensor([1.0, 0.0]))
        loss.backward()
        np.testing.assert_allclose(z.grad, [-0.5, 0.5], atol=1e-15)

    def test_shared_node_visited_once(self):
        x = parameter([3.0])
        y = x * x
        loss = ops.sum(y + y)
        loss.backward()
        np.testing.assert_allclose(x.grad, [12.0])

    def test_no_grad_records_nothing(self):
        x = parameter([1.0])
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad and y.is_leaf

    def test_graph_nodes_topological(self):
        g = ComputeGraph(lambda p, i: {"y": ops.sum(ops.exp(p["w"]) * i["x"])},
                         {"w": parameter(np.ones(2))}, inputs={"x": (2,)})
        g.forward({"x": np.ones(2)})
        for k, node in enumerate(g.nodes):
            assert all(j < k for j in node.inputs)
        assert g.nodes[-1].op == "sum"

    def test_random_three_layer_net(self):
        rng = np.random.default_rng(11)
        params = {f"w{i}": parameter(rng.normal(size=s)) for i, s in enumerate([(4, 5), (5, 5), (5, 3)])}
        params.update({f"b{i}": parameter(rng.normal(size=s)) for i, s in enumerate([5, 5, 3])})
        x = rng.normal(size=(6, 4))
        y = np.eye(3)[rng.integers(0, 3, size=6)]

        def net(p, inp):
            h = ops.softplus(ops.affine(inp["x"], p["w0"], p["b0"]))
            h = ops.softplus(ops.affine(h, p["w1"], p["b1"]))
            logits = ops.affine(h, p["w2"], p["b2"])
            return {"loss": -ops.sum(ops.log_softmax(logits) * Tensor(y))}
        g = ComputeGraph(net, params)
        g.forward({"x": x})
        for name in params:
            res = finite_diff_check(g, name, tolerance=1e-4)
            assert res.passed, (name, res)


class TestFiniteDiffCheck:
    def test_linear_layer_passes(self):
        rng = np.random.default_rng(0)
        g = ComputeGraph(lambda p, i: {"l": ops.sum(ops.square(ops.affine(i["x"], p["w"], p["b"])))},
                         {"w": parameter(rng.normal(size=(3, 2))), "b": parameter(rng.normal(size=2))})
        g.forward({"x": rng.normal(size=(5, 3))})
        for name in ("w", "b"):
            res = finite_diff_check(g, name, 1e-4)
            assert res.passed and res.max_rel_error < 1e-4

    def test_corrupted_rule_fails(self):
        def bad_square(a):
            return make_result(a.data ** 2, (a,), lambda g: (3.0 * g * a.data,), "bad_square")
        g = ComputeGraph(lambda p, i: {"l": ops.sum(bad_square(p["w"]))}, {"w": parameter([1.0, -2.0])})
        g.forward({})
        assert not finite_diff_check(g, "w", 1e-4).passed

    def test_constant_graph_passes_vacuously(self):
        g = ComputeGraph(lambda p, i: {"l": ops.sum(Tensor([1.0, 2.0]))}, {"w": parameter(np.zeros(0))})
        g.forward({})
        assert finite_diff_check(g, "w", 1e-4).passed


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("op_name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(op_name, seed):
    rng = np.random.default_rng(seed)
    arrays, fn = OP_CASES[op_name](rng)
    g = _weighted_graph(arrays, fn, rng)
    g.forward({})
    for i in range(len(arrays)):
        res = finite_diff_check(g, f"p{i}", tolerance=1e-4)
        assert res.passed, (op_name, i, res)


class TestProperties:
    @pytest.mark.parametrize("seed", range(5))
    def test_backward_is_linear_in_the_loss(self, seed):
        rng = np.random.default_rng(seed)
        w0, x = rng.normal(size=(3, 4)), rng.normal(size=(5, 3))
        a, b = rng.normal(size=2)

        def grads(ca, cb):
            w = parameter(w0)
            h = ops.affine(Tensor(x), w)
            loss = ca * ops.sum(ops.square(h)) + cb * ops.sum(ops.exp(ops.softmax(h, axis=1)))
            loss.backward()
            return w.grad
        np.testing.assert_allclose(grads(a, b), a * grads(1, 0) + b * grads(0, 1), atol=1e-10)

    @pytest.mark.parametrize("seed", range(10))
    def test_softmax_is_distribution(self, seed):
        z = np.random.default_rng(seed).normal(scale=20, size=(7, 9))
        p = ops.softmax(Tensor(z), axis=1).data
        assert np.all((p >= 0) & (p <= 1))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_cholesky_recovers_factor(self, seed):
        rng = np.random.default_rng(seed)
        L = _lower(rng, 6)
        np.testing.assert_allclose(cholesky(Tensor(L @ L.T)).data, L, atol=1e-8)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {"a": rng.normal(size=(2, 3)), "b.c": rng.normal(size=4).astype(np.float32), "s": np.zeros(())}
        save_checkpoint(tmp_path / "x.ckpt", tensors, {"seed": 7})
        loaded, meta = load_checkpoint(tmp_path / "x.ckpt")
        assert meta == {"seed": 7}
        for k, v in tensors.items():
            assert loaded[k].dtype == v.dtype
            np.testing.assert_array_equal(loaded[k], v)

    def test_layout_is_little_endian_raw(self, tmp_path):
        import json
        import struct
        save_checkpoint(tmp_path / "x.ckpt", {"w": np.array([1.5, -2.0])})
        blob = (tmp_path / "x.ckpt").read_bytes()
        assert blob[:8] == b"KCNCKPT1"
        (hlen,) = struct.unpack("<Q", blob[8:16])
        entry = json.loads(blob[16:16 + hlen])["tensors"][0]
        assert entry == {"name": "w", "shape": [2], "dtype": "<f8", "offset": 0, "nbytes": 16}
        assert struct.unpack("<2d", blob[16 + hlen:]) == (1.5, -2.0)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"NOTACKPT" + bytes(8))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "bad")
