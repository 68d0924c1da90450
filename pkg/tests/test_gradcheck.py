import numpy as np
import pytest

from arenatraj import tape as tp
from arenatraj.gradcheck import grad_check


def _weighted(rng, shape):
    return rng.normal(size=shape)


# scalar test functions per primitive; each closes over seeded constants
def _cases(rng):
    w34 = _weighted(rng, (3, 4))
    w43 = _weighted(rng, (4, 3))
    w234 = _weighted(rng, (2, 3, 4))
    w33 = _weighted(rng, (3, 3))
    w233 = _weighted(rng, (2, 3, 3))
    w37 = _weighted(rng, (3, 7))
    w24 = _weighted(rng, (2, 4))
    w2 = _weighted(rng, (2,))
    w423 = _weighted(rng, (4, 2, 3))
    return {
        "add": (lambda p: (tp.add(p["a"], p["b"]) * w34).sum(),
                {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4,))}),
        "sub": (lambda p: (tp.sub(p["a"], p["b"]) * w34).sum(),
                {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 1))}),
        "mul": (lambda p: (tp.mul(p["a"], p["b"]) * w34).sum(),
                {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4))}),
        "div": (lambda p: (tp.div(p["a"], p["b"]) * w34).sum(),
                {"a": rng.normal(size=(3, 4)), "b": rng.random((3, 4)) + 0.5}),
        "square": (lambda p: (tp.square(p["a"]) * w34).sum(),
                   {"a": rng.normal(size=(3, 4))}),
        "exp": (lambda p: (tp.exp(p["a"]) * w34).sum(),
                {"a": rng.normal(size=(3, 4))}),
        "log": (lambda p: (tp.log(p["a"]) * w34).sum(),
                {"a": rng.random((3, 4)) + 0.5}),
        "sigmoid": (lambda p: (tp.sigmoid(p["a"]) * w34).sum(),
                    {"a": rng.normal(size=(3, 4)) * 2}),
        "tanh": (lambda p: (tp.tanh(p["a"]) * w34).sum(),
                 {"a": rng.normal(size=(3, 4)) * 2}),
        "matmul": (lambda p: (tp.matmul(p["a"], p["b"]) * w33).sum(),
                   {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 3))}),
        "matmul_batched": (
            lambda p: (tp.matmul(p["a"], p["b"]) * w233).sum(),
            {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(4, 3))}),
        "concat": (lambda p: (tp.concat([p["a"], p["b"]], axis=-1)
                              * w37).sum(),
                   {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 3))}),
        "gather": (lambda p: (tp.gather(p["a"], np.array([2, 0, 2])) * w34).sum(),
                   {"a": rng.normal(size=(5, 4))}),
        "reduce_sum": (lambda p: (tp.reduce_sum(p["a"], axis=1) * w24).sum(),
                       {"a": rng.normal(size=(2, 3, 4))}),
        "reduce_mean": (lambda p: (tp.reduce_mean(p["a"], axis=(1, 2))
                                   * w2).sum(),
                        {"a": rng.normal(size=(2, 3, 4))}),
        "softmax": (lambda p: (tp.softmax(p["a"]) * w34).sum(),
                    {"a": rng.normal(size=(3, 4)) * 1.5}),
        "l2_normalize": (lambda p: (tp.l2_normalize(p["a"]) * w34).sum(),
                         {"a": rng.normal(size=(3, 4)) + 0.1}),
        "reshape": (lambda p: (tp.reshape(p["a"], (4, 3)) * w43).sum(),
                    {"a": rng.normal(size=(3, 4))}),
        "transpose": (lambda p: (tp.transpose(p["a"], (2, 0, 1))
                                 * w423).sum(),
                      {"a": rng.normal(size=(2, 3, 4))}),
        "broadcast_to": (lambda p: (tp.broadcast_to(p["a"], (2, 3, 4)) * w234).sum(),
                         {"a": rng.normal(size=(3, 4))}),
        "gru_sequence": (
            lambda p: tp.square(tp.gru_sequence(p["x"], p["w_ih"], p["w_hh"],
                                                p["b_ih"], p["b_hh"])).sum(),
            {"x": rng.normal(size=(2, 4, 3)),
             "w_ih": rng.normal(size=(9, 3)) * 0.4,
             "w_hh": rng.normal(size=(9, 3)) * 0.4,
             "b_ih": rng.normal(size=(9,)) * 0.1,
             "b_hh": rng.normal(size=(9,)) * 0.1}),
    }


PRIMITIVE_NAMES = sorted(_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("name", PRIMITIVE_NAMES)
def test_primitive_gradients_match_finite_differences(name):
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        f, params = _cases(rng)[name]
        rep = grad_check(f, params, h=1e-5, tol=1e-4, max_coords_per_param=12, seed=seed)
        assert rep.passed, f"{name} seed {seed}: {rep.failures[:3]}"


def test_constant_function_passes_with_zero_gradients():
    rep = grad_check(lambda p: (p["x"] * 0.0).sum(), {"x": np.ones(3)})
    assert rep.passed
    assert rep.max_rel_err == 0.0


def test_reported_failure_on_wrong_gradient():
    # sabotage: loss uses value but discards gradient by detaching via const
    def f(p):
        t = p["x"].tape
        detached = t.const(p["x"].value)
        return (detached * p["x"].value).sum() + (p["x"] * 0.0).sum()

    rep = grad_check(f, {"x": np.array([1.0, 2.0])})
    assert not rep.passed
    assert rep.failures
