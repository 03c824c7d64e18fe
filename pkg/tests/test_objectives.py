import math
import zlib

import numpy as np
import pytest

from fedclip.core import ConfigError, FedClipError, NoiseModel, Purpose, RngStream, finite_diff_gradient
from fedclip.objectives import (
    LogisticObjective,
    QuadraticObjective,
    QuarticObjective,
    SyntheticClassification,
    kappa_H,
    logistic_eval,
    make_classification,
    make_logistic_problem,
    make_quadratic_problem,
    make_quartic_problem,
    quadratic_eval,
    quartic_eval,
    quartic_global_minimizer,
    sample_stochastic_gradient,
)


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.linalg.norm(a - b) / max(1.0, np.linalg.norm(b))


# quartic pair


def test_quartic_values():
    assert quartic_eval(1.0, 1, 0.0) == (0.0, 1.0)
    assert quartic_eval(1.0, 1, 1.0) == (0.0, -2.0)
    assert quartic_eval(1.0, 2, 1.0) == (-3.0, -8.0)


@pytest.mark.parametrize("H", [1.0, 2.5, 8.0])
def test_quartic_global_gradient_at_origin(H):
    p = make_quartic_problem(H)
    assert p.global_grad([0.0])[0] == 1.0


@pytest.mark.parametrize("x", [-3.0, -0.5, 0.7, 2.0])
def test_quartic_global_gradient_formula(x):
    H = 3.0
    expected = 4 * x**3 - 9 * x**2 - H * x + 1
    assert make_quartic_problem(H).global_grad([x])[0] == pytest.approx(expected, rel=1e-14, abs=1e-12)


def test_quartic_hessian_is_unbounded():
    f = QuarticObjective(1.0, 1)
    assert f.hessian(1e3) > 1e6


def test_quartic_rejects_small_H():
    with pytest.raises(ConfigError):
        quartic_eval(0.5, 1, 0.0)
    with pytest.raises(ConfigError):
        QuarticObjective(0.5, 2)


def test_quartic_repeats_pair_for_more_clients():
    p = make_quartic_problem(2.0, 4)
    assert [o.client for o in p.objectives] == [1, 2, 1, 2]
    assert p.global_value([1.3]) == pytest.approx(make_quartic_problem(2.0).global_value([1.3]), rel=1e-15)
    with pytest.raises(ConfigError):
        make_quartic_problem(2.0, 3)


def test_quartic_minimizer_brute_force():
    x = quartic_global_minimizer(1.0)
    # first-order condition of the averaged quartic
    assert abs(4 * x**3 - 9 * x**2 - x + 1) < 1e-3
    assert x == pytest.approx(2.31137, abs=1e-4)


# kappa


def test_kappa_closed_form():
    r = (-18 + math.sqrt(804)) / 24
    oracle = 9 * r * r + 10 * r + 25 / 3 + 45 + 100
    assert kappa_H(1.0) == pytest.approx(oracle, rel=1e-14)
    assert kappa_H(1.0) == pytest.approx(159.3, abs=0.05)


def test_kappa_strictly_increasing():
    values = [kappa_H(h) for h in np.linspace(1, 20, 200)]
    assert all(b > a for a, b in zip(values, values[1:]))
    with pytest.raises(ConfigError):
        kappa_H(0.9)


@pytest.mark.parametrize("H", [1.0, 2.0, 4.0, 8.0])
def test_heterogeneity_bound_on_grid(H):
    x = np.linspace(-10, 10, 2001)
    g1 = 4 * x**3 - 9 * x**2 + 2 * H * x + 1
    g2 = 4 * x**3 - 9 * x**2 - 4 * H * x + 1
    g = (g1 + g2) / 2
    k = kappa_H(H)
    assert np.all(np.abs(g1) <= 2 * np.abs(g) + k)
    assert np.all(np.abs(g2) <= 2 * np.abs(g) + k)


# quadratic counterexample


def test_quadratic_values():
    assert quadratic_eval(2.0, 1, 0.0) == (0.0, -3.0)
    assert quadratic_eval(2.0, 2, 0.0) == (0.0, 4.0)


@pytest.mark.parametrize("gamma", [1.5, 2.0, 7.0])
def test_quadratic_minimizer_and_origin(gamma):
    p = make_quadratic_problem(gamma)
    assert p.global_grad([-0.5])[0] == 0.0
    g = p.client_grads(np.arange(2), np.zeros((2, 1)))[:, 0]
    assert g[0] == -(gamma + 1) and g[1] == gamma + 2
    assert np.all(np.abs(g) > gamma)
    assert p.global_grad([0.0])[0] == 0.5


def test_quadratic_requires_gamma_above_one():
    with pytest.raises(ConfigError):
        quadratic_eval(1.0, 1, 0.0)
    with pytest.raises(ConfigError):
        QuadraticObjective(0.5, 2)


# stochastic gradients


def test_zero_noise_is_exact_bitwise():
    f = QuarticObjective(2.0, 1)
    g = sample_stochastic_gradient(f, [0.3], NoiseModel(0.0), RngStream(0))
    assert np.array_equal(g, f.grad(np.array([0.3])))


def test_stochastic_gradient_mean_and_bound():
    f = QuarticObjective(1.0, 2)
    exact = f.grad(np.array([0.8]))[0]
    noise, rng = NoiseModel(1.0), RngStream(7)
    draws = 10**5
    G = np.array([sample_stochastic_gradient(f, [0.8], noise, rng, 0, 0, t)[0] for t in range(draws)])
    assert np.all(np.abs(G - exact) <= 1.0)
    assert abs(G.mean() - exact) <= 3 * (1.0 / math.sqrt(3 * draws))


def test_sample_stochastic_gradient_matches_problem_oracle():
    p = make_quartic_problem(4.0)
    rng = RngStream(3)
    noise = NoiseModel(1.0)
    X = np.array([[0.2], [1.1]])
    batch = p.stochastic_grads(np.arange(2), X, noise, rng, Purpose.LOCAL, 5, 2)
    for i in range(2):
        single = sample_stochastic_gradient(p.objectives[i], X[i], noise, rng, i, 5, 2)
        assert np.array_equal(batch[i], single)


# logistic


def small_data(seed=0, n=60, d=3, k=3):
    data = make_classification(n, d, k, separation=2.0, seed=seed)
    data.partitions = [np.arange(0, n // 2), np.arange(n // 2, n)]
    return data


def test_logistic_zero_weights_gives_log_k():
    for k in (2, 3, 5):
        data = small_data(k=k)
        value, _ = logistic_eval(data, 0, np.zeros(3 * k))
        assert value == pytest.approx(math.log(k), rel=1e-14)


def test_logistic_gradient_descent_decreases_loss():
    obj = LogisticObjective(np.array([[1.0, -2.0]]), np.array([1]), 2)
    x = np.zeros(4)
    f0 = obj.value(x)
    for step in (1e-3, 1e-2, 1e-1):
        assert obj.value(x - step * obj.grad(x)) < f0


def test_logistic_empty_client_errors():
    data = small_data()
    data.partitions.append(np.array([], dtype=np.int64))
    with pytest.raises(FedClipError):
        logistic_eval(data, 2, np.zeros(9))
    with pytest.raises(FedClipError):
        make_logistic_problem(data)


def test_classification_csv_round_trip(tmp_path):
    data = small_data(seed=4)
    path = tmp_path / "data.csv"
    data.to_csv(path)
    back = SyntheticClassification.from_csv(path, k=3)
    assert np.array_equal(back.features, data.features)
    assert np.array_equal(back.labels, data.labels)


def test_classification_labels_in_range_and_balanced():
    data = make_classification(100, 4, 5, seed=2)
    assert data.labels.min() == 0 and data.labels.max() == 4
    assert np.bincount(data.labels).tolist() == [20] * 5
    with pytest.raises(ConfigError):
        SyntheticClassification(np.zeros((2, 2)), np.array([0, 3]), 3)


# finite-difference agreement on 100 random points per objective


def shipped_objectives():
    rng = np.random.default_rng(123)
    objs = []
    for H in (1.0, 2.0, 4.0, 8.0):
        objs += [(f"quartic-H{H:g}-c{c}", QuarticObjective(H, c), 1, 3.0) for c in (1, 2)]
    objs += [(f"quadratic-c{c}", QuadraticObjective(2.0, c), 1, 10.0) for c in (1, 2)]
    data = make_classification(80, 4, 3, seed=5)
    idx = rng.permutation(80)
    objs += [(f"logistic-c{c}", LogisticObjective(data.features[part], data.labels[part], 3), 12, 1.0)
             for c, part in enumerate((idx[:40], idx[40:]))]
    return objs


@pytest.mark.parametrize("name,obj,dim,scale", shipped_objectives(), ids=lambda v: v if isinstance(v, str) else "")
def test_gradient_matches_finite_differences(name, obj, dim, scale):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(100):
        x = rng.uniform(-scale, scale, size=dim)
        worst = max(worst, rel_err(finite_diff_gradient(obj, x), obj.grad(x)))
    assert worst <= 1e-6
