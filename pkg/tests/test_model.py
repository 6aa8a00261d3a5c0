import math

import numpy as np
import pytest

from medu.data import Dataset
from medu.errors import ConfigError, EmptyClientError
from medu.model import (ModelSpec, check_params, finite_diff_gradient, init_params, local_update, loss_and_gradient,
                        loss_value, predict)
from medu.rng import stream


def test_init_is_deterministic_and_seed_sensitive():
    spec = ModelSpec("linear", (3, 1))
    assert np.array_equal(init_params(spec, 7), init_params(spec, 7))
    assert not np.array_equal(init_params(spec, 7), init_params(spec, 8))


def test_mlp_parameter_count():
    spec = ModelSpec("mlp", (4, 8, 2))
    assert spec.n_params == 4 * 8 + 8 + 8 * 2 + 2 == 58
    assert init_params(spec, 3).shape == (58,)


@pytest.mark.parametrize("kind,widths", [("mlp", (4, 2)), ("linear", (3,)), ("logistic", (3, 1)), ("nope", (2, 2))])
def test_bad_specs_rejected(kind, widths):
    with pytest.raises(ConfigError):
        ModelSpec(kind, widths)


def test_dimension_mismatch_rejected():
    spec = ModelSpec("linear", (2, 1))
    with pytest.raises(ConfigError):
        check_params(spec, np.zeros(5))
    with pytest.raises(ConfigError):
        loss_and_gradient(spec, np.zeros(3), Dataset(np.zeros((2, 4)), np.zeros(2, dtype=int)))


def test_zero_residual_linear():
    spec = ModelSpec("linear", (2, 1))
    loss, g = loss_and_gradient(spec, np.zeros(3), Dataset(np.array([[1.0, 0.0]]), np.array([0])))
    assert loss == 0.0
    assert np.all(g == 0.0)


def test_logistic_uniform_output_is_ln2():
    spec = ModelSpec("logistic", (3, 2))
    batch = Dataset(np.random.default_rng(0).standard_normal((6, 3)), np.array([0, 1, 0, 1, 0, 1]))
    loss, _ = loss_and_gradient(spec, np.zeros(spec.n_params), batch)
    assert loss == pytest.approx(math.log(2.0), rel=1e-12)


@pytest.mark.parametrize("spec", [ModelSpec("linear", (3, 1)), ModelSpec("logistic", (3, 4)),
                                  ModelSpec("mlp", (3, 5, 3)), ModelSpec("mlp", (3, 4, 4, 2))])
def test_gradient_matches_finite_differences(spec, toy):
    batch = toy(n=17, d=3, classes=spec.n_outputs if spec.n_outputs > 1 else 2, seed=1)
    w = init_params(spec, 5)
    _, g = loss_and_gradient(spec, w, batch)
    fd = finite_diff_gradient(spec, w, batch)
    np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-7)


def test_finite_diff_on_quadratic():
    spec = ModelSpec("quadratic", (2,))
    batch = Dataset(np.zeros((1, 1)), np.zeros(1, dtype=int))
    np.testing.assert_allclose(finite_diff_gradient(spec, np.array([2.0, -1.0]), batch), [2.0, -1.0], atol=1e-8)
    with pytest.raises(ConfigError):
        finite_diff_gradient(spec, np.array([2.0, -1.0]), batch, epsilon=0.0)


def test_local_update_single_exact_step():
    spec = ModelSpec("quadratic", (1,))
    data = Dataset(np.zeros((4, 1)), np.zeros(4, dtype=int))
    new, eff = local_update(spec, np.array([1.0]), data, 0.5, 1, 4, stream(0, "local", 0, 1))
    np.testing.assert_allclose(new, [0.5])
    np.testing.assert_allclose(eff, [1.0])


def test_local_update_reproducible(toy):
    spec = ModelSpec("mlp", (3, 4, 2))
    data = toy(n=30)
    w = init_params(spec, 0)
    a = local_update(spec, w, data, 0.1, 3, 7, stream(4, "local", 2, 1))
    b = local_update(spec, w, data, 0.1, 3, 7, stream(4, "local", 2, 1))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert np.array_equal(a[0], w - 0.1 * a[1])


def test_local_update_empty_client():
    spec = ModelSpec("linear", (2, 1))
    with pytest.raises(EmptyClientError):
        local_update(spec, np.zeros(3), Dataset(np.zeros((0, 2)), np.zeros(0, dtype=int)), 0.1, 1, 4,
                     stream(0, "local", 0, 1))


def test_predict_and_loss_value(toy):
    spec = ModelSpec("logistic", (3, 2))
    data = toy()
    w = init_params(spec, 1)
    assert predict(spec, w, data.x).shape == (len(data),)
    assert loss_value(spec, w, data) == loss_and_gradient(spec, w, data)[0]
