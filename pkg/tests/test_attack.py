import numpy as np
import pytest

from medu.attack import BackdoorSpec, backdoor_accuracy, evaluate, inject_backdoor
from medu.data import Dataset, load_digits_task, make_blobs_task
from medu.errors import ConfigError
from medu.fl import FLConfig, LRSchedule, run_fl
from medu.model import ModelSpec
from medu.rng import stream


def test_blobs_task_shapes_and_determinism():
    a = make_blobs_task(3, n_classes=3, dim=5, n_train=90, n_test=60, n_edge_train=10, n_edge_test=7)
    b = make_blobs_task(3, n_classes=3, dim=5, n_train=90, n_test=60, n_edge_train=10, n_edge_test=7)
    assert len(a.train) == 90 and len(a.test) == 60 and len(a.edge_train) == 10 and len(a.edge_test) == 7
    assert np.array_equal(a.train.x, b.train.x)
    assert np.all(a.edge_train.y == 0)
    # satellite examples sit inside the declared region
    assert np.all(np.linalg.norm(a.edge_test.x - a.edge_center, axis=1) < a.edge_radius)
    # and the clean source class does not
    src = a.test.x[a.test.y == 0]
    assert np.mean(np.linalg.norm(src - a.edge_center, axis=1) < a.edge_radius) < 0.01


def test_digits_task():
    t = load_digits_task(0, n_train=500)
    assert len(t.train) == 500 and t.n_classes == 10
    assert t.train.x.max() <= 1.0


def test_mnist_style_spec_and_full_poisoning():
    spec = BackdoorSpec(7, 1)
    rng = np.random.default_rng(0)
    client = Dataset(rng.standard_normal((50, 2)), rng.integers(0, 10, 50))
    n7 = int(np.sum(client.y == 7))
    poisoned, trigger = inject_backdoor(client, spec, stream(0, "backdoor"), holdout_fraction=0.2)
    held = int(round(0.2 * n7))
    assert len(trigger) == held and np.all(trigger.y == 1)
    assert np.sum(poisoned.y == 7) == 0
    assert np.sum(poisoned.y == 1) == np.sum(client.y == 1) + n7 - held


def test_partial_poisoning_and_holdout():
    spec = BackdoorSpec(0, 1, fraction=0.5)
    client = Dataset(np.zeros((20, 1)), np.zeros(20, dtype=int))
    hold = Dataset(np.ones((4, 1)), np.array([0, 0, 2, 0]))
    poisoned, trigger = inject_backdoor(client, spec, stream(0, "backdoor"), holdout=hold)
    assert np.sum(poisoned.y == 1) == 10 and len(poisoned) == 20
    assert len(trigger) == 3


def test_no_match_rejected():
    with pytest.raises(ConfigError):
        inject_backdoor(Dataset(np.zeros((3, 1)), np.zeros(3, dtype=int)), BackdoorSpec(4, 1),
                        stream(0, "backdoor"))
    with pytest.raises(ConfigError):
        BackdoorSpec(2, 2)
    with pytest.raises(ConfigError):
        BackdoorSpec(0, 1, fraction=0.0)


def test_accuracy_reference_points():
    spec = ModelSpec("logistic", (1, 2))
    data = Dataset(np.array([[-1.0], [1.0], [-2.0], [2.0]]), np.array([0, 0, 1, 1]))
    constant = np.array([0.0, 0.0, 1.0, 0.0])  # bias favours class 0 everywhere
    assert evaluate(spec, constant, data) == 0.5
    assert backdoor_accuracy(spec, constant, Dataset(data.x, np.ones(4, dtype=int))) == 0.0
    with pytest.raises(ConfigError):
        evaluate(spec, constant, Dataset(np.zeros((0, 1)), np.zeros(0, dtype=int)))


def test_separable_blobs_least_squares():
    rng = np.random.default_rng(0)
    x = np.vstack([rng.normal(-3, 1, (200, 2)), rng.normal(3, 1, (200, 2))])
    y = np.repeat([0, 1], 200)
    X = np.hstack([x, np.ones((400, 1))])
    coef = np.linalg.lstsq(X, 2.0 * y - 1.0, rcond=None)[0]
    W = np.stack([-coef[:2], coef[:2]], axis=1)
    params = np.concatenate([W.ravel(), [-coef[2], coef[2]]])
    assert evaluate(ModelSpec("logistic", (2, 2)), params, Dataset(x, y)) > 0.95


def test_memorizer_and_saturated_backdoor():
    task = make_blobs_task(0, n_classes=3, dim=6, n_train=300, n_test=300, n_edge_train=60, n_edge_test=60)
    spec = BackdoorSpec(0, 1, center=task.edge_center, radius=task.edge_radius)
    base = Dataset.concat([task.train, task.edge_train])
    poisoned, trigger = inject_backdoor(base, spec, stream(0, "backdoor"), holdout=task.edge_test)
    model = ModelSpec("mlp", (6, 16, 3))
    halves = [poisoned.subset(np.arange(0, len(poisoned), 2)), poisoned.subset(np.arange(1, len(poisoned), 2))]
    w = run_fl(FLConfig(2, 60, model, LRSchedule("constant", c=0.1), epochs=2, seed=0), halves).w_final
    assert evaluate(model, w, poisoned) > 0.95
    assert backdoor_accuracy(model, w, trigger) > 0.9
