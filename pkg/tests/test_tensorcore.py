import numpy as np
import pytest

from src.errors import GraphError, NonFiniteError, ShapeError
from src.tensorcore import (
    OP_KINDS,
    Graph,
    ParamStore,
    Tensor,
    adam_step,
    backward,
    build_op,
    clip_grad_norm,
    concat,
    finite_diff_gradient,
    gaussian_logpdf,
    make_rng,
    mlp_apply,
    mlp_init,
    split,
    spawn_rngs,
)


def check_grad(fn, x, rtol=1e-6, atol=1e-8):
    leaf = Tensor(x, requires_grad=True, name="x")
    analytic = backward(fn(leaf))["x"].data
    numeric = finite_diff_gradient(fn, x).data
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


def relative_grad_error(fn, x):
    leaf = Tensor(x, requires_grad=True, name="x")
    analytic = backward(fn(leaf))["x"].data
    numeric = finite_diff_gradient(fn, x).data
    return np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)


def away_from_zero(rng, shape, low=0.2, high=1.5):
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def weighted(rng, shape):
    w = rng.standard_normal(shape)
    return lambda out: (out * w).sum()


def binary_case(combine, nonzero=False):
    def case(rng):
        draw = away_from_zero if nonzero else (lambda r, shape: r.standard_normal(shape))
        other, loss = draw(rng, (3, 4)), weighted(rng, (3, 4))
        return (lambda t: loss(combine(t, other))), draw(rng, (3, 4))
    return case


def unary_case(method, sample=lambda rng: rng.standard_normal(6)):
    def case(rng):
        loss = weighted(rng, 6)
        return (lambda t: loss(getattr(t, method)())), sample(rng)
    return case


def matmul_case(rng):
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 2))
    if rng.integers(2):
        loss = weighted(rng, (4, 2))
        return (lambda t: loss(t @ b)), a
    return (lambda t: (a @ t).square().sum()), b


def scale_case(rng):
    c, loss = rng.uniform(-3.0, 3.0), weighted(rng, 6)
    return (lambda t: loss(t.scale(c))), rng.standard_normal(6)


def reduction_case(method):
    def case(rng):
        axis = [None, 0, 1][rng.integers(3)]
        x = rng.standard_normal((3, 4))
        if axis is None:
            return (lambda t: getattr(t, method)().square()), x
        loss = weighted(rng, 4 if axis == 0 else 3)
        return (lambda t: loss(getattr(t, method)(axis=axis))), x
    return case


def layout_case(transform, out_shape):
    def case(rng):
        loss = weighted(rng, out_shape)
        return (lambda t: loss(transform(t))), rng.standard_normal((3, 4))
    return case


# each builder draws one (scalar function, point) pair
GRADIENT_CASES = {
    "add": binary_case(lambda t, o: t + o),
    "sub": binary_case(lambda t, o: o - t),
    "mul": binary_case(lambda t, o: t * o),
    "div": binary_case(lambda t, o: t / o + o / t, nonzero=True),
    "matmul": matmul_case,
    "exp": unary_case("exp", lambda rng: rng.uniform(-1.5, 1.5, 6)),
    "log": unary_case("log", lambda rng: rng.uniform(0.2, 2.0, 6)),
    "tanh": unary_case("tanh", lambda rng: rng.uniform(-2.0, 2.0, 6)),
    "relu": unary_case("relu", lambda rng: away_from_zero(rng, 6)),
    "square": unary_case("square"),
    "scale": scale_case,
    "sum": reduction_case("sum"),
    "mean": reduction_case("mean"),
    "concat": layout_case(lambda t: concat([t, t.square()], axis=1), (3, 8)),
    "split": layout_case(lambda t: split(t, [1, 3], axis=1)[1], (3, 3)),
    "reshape": layout_case(lambda t: t.reshape(2, 6), (2, 6)),
    "gaussian_logpdf": layout_case(gaussian_logpdf, 3),
}


class TestOpGradients:
    """Backward rules against central differences."""

    def test_every_registered_kind_has_a_gradient_case(self):
        assert set(GRADIENT_CASES) == set(OP_KINDS.names())

    @pytest.mark.parametrize("kind", sorted(OP_KINDS.names()))
    def test_backward_matches_finite_differences(self, kind):
        for seed in range(100):
            fn, x = GRADIENT_CASES[kind](make_rng(seed))
            assert relative_grad_error(fn, x) < 1e-6, f"{kind} at seed {seed}"

    @pytest.mark.parametrize("seed", range(5))
    def test_composite_expressions(self, seed):
        rng = make_rng(seed)
        w = rng.standard_normal((3, 4))
        other = away_from_zero(rng, (3, 4))
        x = away_from_zero(rng, (3, 4))
        check_grad(lambda t: ((t * other).tanh() / (t.square() + 1.0) * w).sum(), x)
        check_grad(lambda t: gaussian_logpdf(t.relu() @ other.T).sum(), x)

    def test_broadcast_gradient_is_reduced(self):
        x = np.array([[1.0], [2.0], [3.0]])
        bias = np.ones((3, 4))
        leaf = Tensor(x, requires_grad=True, name="x")
        grads = backward((leaf * bias).sum())
        np.testing.assert_allclose(grads["x"].data, np.full((3, 1), 4.0))

    def test_every_registered_kind_is_known(self):
        assert {"add", "sub", "mul", "div", "matmul", "exp", "log", "tanh", "relu", "square", "scale",
                "sum", "mean", "concat", "split", "reshape", "gaussian_logpdf"} <= set(OP_KINDS.names())


class TestBackward:
    @pytest.mark.parametrize("seed", range(10))
    def test_adjoints_are_linear_in_the_root(self, seed):
        rng = make_rng(seed)
        x = rng.standard_normal(5)
        w, a, b = rng.standard_normal(5), rng.standard_normal(), rng.standard_normal()

        def f(t):
            return (t.tanh() * w).sum()

        def g(t):
            return (t.square() * t.exp()).mean()

        def grad(fn):
            return backward(fn(Tensor(x, requires_grad=True, name="x")))["x"].data

        combined = grad(lambda t: f(t) * a + g(t) * b)
        np.testing.assert_allclose(combined, a * grad(f) + b * grad(g), rtol=1e-12, atol=1e-12)

    def test_leaf_with_grad_needs_name(self):
        with pytest.raises(GraphError):
            Tensor([1.0], requires_grad=True)

    def test_non_scalar_root(self):
        x = Tensor([1.0, 2.0], requires_grad=True, name="x")
        with pytest.raises(GraphError):
            backward(x * 2.0)

    def test_shared_names_accumulate(self):
        a = Tensor([1.0, 2.0], requires_grad=True, name="w")
        b = Tensor([3.0, 4.0], requires_grad=True, name="w")
        grads = backward((a * b).sum())
        np.testing.assert_allclose(grads["w"].data, [4.0, 6.0])

    def test_reused_node_gets_summed_adjoint(self):
        x = Tensor([3.0], requires_grad=True, name="x")
        y = x * x
        grads = backward((y + y).sum())
        np.testing.assert_allclose(grads["x"].data, [12.0])

    def test_constants_only_give_no_gradients(self):
        assert backward(Tensor([1.0, 2.0]).sum()) == {}

    def test_graph_is_topological(self):
        x = Tensor([1.0, 2.0], requires_grad=True, name="x")
        root = (x.exp() * x).sum()
        graph = Graph.from_root(root)
        for node in graph.nodes:
            assert all(parent < node.id for parent in node.parents)
        assert graph.tensors[-1] is root

    def test_detach_cuts_the_path(self):
        x = Tensor([2.0], requires_grad=True, name="x")
        grads = backward((x * x.detach()).sum())
        np.testing.assert_allclose(grads["x"].data, [2.0])


class TestChecks:
    def test_non_finite_input(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])

    def test_non_finite_output(self):
        with pytest.raises(NonFiniteError):
            Tensor([-1.0]).log()

    def test_zero_dim_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((0, 3)))

    def test_matmul_mismatch(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_bad_reshape(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones(6)).reshape(4, 2)

    def test_split_sizes_must_cover(self):
        with pytest.raises(ShapeError):
            split(Tensor(np.ones((2, 5))), [2, 2], axis=1)

    def test_numpy_left_operand_stays_a_tensor(self):
        out = np.ones(3) - Tensor([1.0, 2.0, 3.0], requires_grad=True, name="x")
        assert isinstance(out, Tensor)
        np.testing.assert_allclose(out.data, [0.0, -1.0, -2.0])

    def test_unknown_kind(self):
        with pytest.raises(Exception, match="unknown op-kind"):
            build_op("cosh", [Tensor([1.0])])

    def test_finite_diff_step_must_be_positive(self):
        with pytest.raises(ValueError):
            finite_diff_gradient(lambda t: t.sum(), [1.0], h=0.0)


class TestOptimizer:
    def test_adam_minimizes_quadratic(self):
        target = np.array([1.0, -2.0, 0.5])
        store = ParamStore.from_params({"w": np.zeros(3)})
        for _ in range(2000):
            params = store.tensors(trainable=True)
            loss = (params["w"] - target).square().sum()
            store = adam_step(store, backward(loss), lr=1e-2)
        np.testing.assert_allclose(store["w"], target, atol=1e-2)
        assert store.step == 2000

    def test_adam_first_step_moves_by_lr(self):
        store = ParamStore.from_params({"w": np.array([0.0, 0.0])})
        store = adam_step(store, {"w": np.array([3.0, -0.5])}, lr=0.1)
        np.testing.assert_allclose(store["w"], [-0.1, 0.1], rtol=1e-6)

    def test_adam_with_zero_lr_is_the_identity(self, rng):
        start = {"w": rng.standard_normal((3, 2)), "b": rng.standard_normal(2)}
        store = ParamStore.from_params(start)
        for _ in range(5):
            grads = {name: rng.standard_normal(value.shape) for name, value in start.items()}
            store = adam_step(store, grads, lr=0.0)
        for name, value in start.items():
            np.testing.assert_array_equal(store[name], value)
        assert store.step == 5

    def test_adam_rejects_unknown_and_misshapen(self):
        store = ParamStore.from_params({"w": np.zeros(2)})
        with pytest.raises(ShapeError):
            adam_step(store, {"v": np.zeros(2)})
        with pytest.raises(ShapeError):
            adam_step(store, {"w": np.zeros(3)})

    def test_clip_grad_norm(self):
        grads = {"a": Tensor([3.0]), "b": Tensor([4.0])}
        clipped, norm = clip_grad_norm(grads, 1.0)
        assert norm == pytest.approx(5.0)
        np.testing.assert_allclose([clipped["a"].item(), clipped["b"].item()], [0.6, 0.8])
        unchanged, _ = clip_grad_norm(grads, 10.0)
        assert unchanged["a"].item() == 3.0


class TestMLP:
    def test_zero_last_layer_outputs_zero(self, rng):
        params = ParamStore.from_params(mlp_init(rng, "net", [3, 8, 2], zero_last=True)).tensors(False)
        out = mlp_apply(params, "net", 2, Tensor(rng.standard_normal((5, 3))))
        np.testing.assert_array_equal(out.data, np.zeros((5, 2)))

    def test_parameter_gradients(self, rng):
        raw = mlp_init(rng, "net", [2, 4, 1])
        x = rng.standard_normal((3, 2))
        weight = raw["net/l0/W"]

        def loss(w):
            params = {name: Tensor(value) for name, value in raw.items()}
            params["net/l0/W"] = w
            return mlp_apply(params, "net", 2, Tensor(x)).square().sum()

        check_grad(loss, weight)


class TestRandomness:
    def test_same_seed_same_stream(self):
        np.testing.assert_array_equal(make_rng(7).standard_normal(10), make_rng(7).standard_normal(10))

    def test_spawned_streams_differ_and_repeat(self):
        a = [r.standard_normal(4) for r in spawn_rngs(make_rng(3), 2)]
        b = [r.standard_normal(4) for r in spawn_rngs(make_rng(3), 2)]
        np.testing.assert_array_equal(a[0], b[0])
        assert not np.allclose(a[0], a[1])
