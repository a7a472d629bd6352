import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otafeel.core import RngStream, StreamLabel
from otafeel.learner import (
    Dataset,
    LocalUpdate,
    TaskSpec,
    aggregate_error_free,
    global_step,
    load_delimited,
    local_sgd,
    loss_and_grad,
    make_task,
    partition,
    task_from_dataset,
    task_from_shards,
)

SMALL = TaskSpec(d=6, samples_per_device=20, noise_std=1.0)


@pytest.fixture(scope="module")
def quad_task():
    return make_task(SMALL, 4, RngStream(0))


@pytest.fixture(scope="module")
def logistic_task():
    spec = TaskSpec(family="logistic", d=5, samples_per_device=40, reg=0.05)
    return make_task(spec, 3, RngStream(1))


def _dataset(n, d, classes, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.standard_normal((n, d)), rng.standard_normal(n), np.arange(n) % classes)


# -- task construction


def test_identical_data_gives_zero_gamma():
    ds = _dataset(30, 4, 1)
    task = task_from_shards("quadratic", [ds, ds, ds], 0.1)
    assert task.Gamma == pytest.approx(0.0, abs=1e-12)


def test_gamma_matches_direct_least_squares():
    spec = TaskSpec(d=4, samples_per_device=30, n_clusters=2, heterogeneity=3.0, noise_std=0.1)
    task = make_task(spec, 2, RngStream(3), "non_iid")
    # independent oracle: least squares on the pooled data and per shard
    Xs = [s.X for s in task.shards]
    ys = [s.y for s in task.shards]
    th = np.linalg.lstsq(np.vstack(Xs), np.concatenate(ys), rcond=None)[0]
    F = np.mean([0.5 * np.mean((X @ th - y) ** 2) for X, y in zip(Xs, ys)])
    Fm = [0.5 * np.mean((X @ np.linalg.lstsq(X, y, rcond=None)[0] - y) ** 2) for X, y in zip(Xs, ys)]
    assert task.Gamma > 0.1
    assert task.Gamma == pytest.approx(F - np.mean(Fm), rel=1e-9)
    assert np.allclose(task.theta_star, th, rtol=1e-9, atol=1e-12)


def test_requested_curvature_is_met(quad_task):
    for shard in quad_task.shards:
        eig = np.linalg.eigvalsh(shard.X.T @ shard.X / len(shard))
        assert eig[0] == pytest.approx(1.0, rel=0.05)
        assert eig[-1] == pytest.approx(5.0, rel=0.05)
    assert quad_task.mu == pytest.approx(1.0, rel=0.05)
    assert quad_task.L == pytest.approx(5.0, rel=0.05)


def test_curvature_with_rotated_devices():
    spec = TaskSpec(d=6, samples_per_device=20, hessian_spread=2.0, reg=0.2)
    task = make_task(spec, 3, RngStream(2))
    hess = [s.X.T @ s.X / len(s) + 0.2 * np.eye(6) for s in task.shards]
    assert not np.allclose(hess[0], hess[1])
    for H in hess:
        e = np.linalg.eigvalsh(H)
        assert e[0] == pytest.approx(1.0, rel=1e-9) and e[-1] == pytest.approx(5.0, rel=1e-9)


def test_infeasible_spec():
    with pytest.raises(ValueError):
        make_task(TaskSpec(mu=5.0, L=1.0), 2, RngStream(0))
    with pytest.raises(ValueError):
        make_task(TaskSpec(d=10, samples_per_device=5), 2, RngStream(0))


# -- partitioning


def test_iid_partition_even_and_disjoint():
    ds = Dataset(np.arange(100.0)[:, None], np.arange(100.0), np.zeros(100, int))
    shards = partition(ds, 4, "iid", RngStream(0))
    assert [len(s) for s in shards] == [25] * 4
    ids = np.concatenate([s.y for s in shards])
    assert sorted(ids) == list(range(100))


def test_non_iid_single_class_per_device():
    ds = _dataset(40, 2, 2)
    shards = partition(ds, 2, "non_iid", RngStream(0))
    assert set(shards[0].groups) == {0} and set(shards[1].groups) == {1}
    shards = partition(ds, 4, "non_iid", RngStream(0))
    assert all(len(set(s.groups)) == 1 for s in shards)
    assert sum(len(s) for s in shards) == 40


def test_non_iid_divisibility_error():
    with pytest.raises(ValueError, match="divisible"):
        partition(_dataset(40, 2, 2), 3, "non_iid", RngStream(0))


def test_unknown_partition_mode():
    with pytest.raises(ValueError):
        partition(_dataset(10, 2, 1), 2, "random", RngStream(0))


# -- losses and gradients


def _fd_check(task, seed, probes=100):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in range(probes):
        theta = rng.standard_normal(task.d)
        dev = None if p % 2 else int(rng.integers(task.M))
        _, g = loss_and_grad(task, theta, dev)
        fd = np.empty(task.d)
        for j in range(task.d):
            e = np.zeros(task.d)
            e[j] = 1e-5
            fd[j] = (loss_and_grad(task, theta + e, dev)[0] - loss_and_grad(task, theta - e, dev)[0]) / 2e-5
        worst = max(worst, np.linalg.norm(fd - g) / np.linalg.norm(g))
    return worst


def test_gradient_finite_difference_quadratic(quad_task):
    assert _fd_check(quad_task, 0) < 1e-6


def test_gradient_finite_difference_logistic(logistic_task):
    assert _fd_check(logistic_task, 1) < 1e-6


def test_gradient_vanishes_at_optimum(quad_task, logistic_task):
    assert np.linalg.norm(loss_and_grad(quad_task, quad_task.theta_star)[1]) < 1e-10
    assert np.linalg.norm(loss_and_grad(logistic_task, logistic_task.theta_star)[1]) < 1e-10


def test_equal_shards_global_loss_is_plain_mean(quad_task):
    theta = np.ones(quad_task.d)
    dev = [loss_and_grad(quad_task, theta, m)[0] for m in range(quad_task.M)]
    assert loss_and_grad(quad_task, theta)[0] == pytest.approx(np.mean(dev), rel=1e-13)


def test_strong_convexity_smoothness_sandwich(quad_task):
    rng = np.random.default_rng(4)
    mu, L = quad_task.mu, quad_task.L
    for _ in range(1000):
        v, w = rng.standard_normal((2, quad_task.d)) * 3
        m = int(rng.integers(quad_task.M))
        fv = loss_and_grad(quad_task, v, m)[0]
        fw, gw = loss_and_grad(quad_task, w, m)
        gap = fv - fw - (v - w) @ gw
        sq = (v - w) @ (v - w)
        assert gap >= mu / 2 * sq * (1 - 1e-9)
        assert gap <= L / 2 * sq * (1 + 1e-9)


def test_logistic_labels_and_dataset_task(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.standard_normal((40, 3))
    y = (X[:, 0] > 0).astype(float)
    path = tmp_path / "data.csv"
    np.savetxt(path, np.column_stack([X, y]), delimiter=",")
    data = load_delimited(path)
    assert data.X.shape == (40, 3) and set(np.unique(data.groups)) == {0, 1}
    task = task_from_dataset(data, 2, "non_iid", RngStream(0))
    assert task.family == "logistic"
    assert set(np.unique(np.concatenate([s.y for s in task.shards]))) == {-1.0, 1.0}
    assert task.Gamma >= 0


# -- local SGD


def test_single_full_batch_step(quad_task):
    theta = np.arange(quad_task.d, dtype=float)
    up = local_sgd(theta, quad_task, 1, 1, 0.1, 20, RngStream(0))
    assert np.allclose(up.delta, -0.1 * loss_and_grad(quad_task, theta, 1)[1], rtol=1e-14)


def test_zero_update_at_device_optimum(quad_task):
    s = quad_task.shards[2]
    theta_m = np.linalg.solve(s.X.T @ s.X, s.X.T @ s.y)
    up = local_sgd(theta_m, quad_task, 2, 4, 0.1, 20, RngStream(0))
    assert np.linalg.norm(up.delta) < 1e-12


def test_two_steps_match_unrolled_recursion(quad_task):
    s = quad_task.shards[0]
    n = len(s)
    H = s.X.T @ s.X / n
    b = s.X.T @ s.y / n
    theta = np.linspace(-1, 1, quad_task.d)
    eta = 0.15
    # theta2 = (I - eta H)^2 theta + eta (I + (I - eta H)) b
    P = np.eye(quad_task.d) - eta * H
    expected = P @ P @ theta + eta * (np.eye(quad_task.d) + P) @ b - theta
    up = local_sgd(theta, quad_task, 0, 2, eta, n, RngStream(0))
    assert np.linalg.norm(up.delta - expected) <= 1e-12 * np.linalg.norm(expected)


def test_batch_too_large(quad_task):
    with pytest.raises(ValueError):
        local_sgd(np.zeros(quad_task.d), quad_task, 0, 1, 0.1, 21, RngStream(0))
    with pytest.raises(ValueError):
        local_sgd(np.zeros(quad_task.d), quad_task, 0, 1, 0.0, 2, RngStream(0))


def test_minibatch_gradient_unbiased(quad_task):
    theta = np.full(quad_task.d, 0.3)
    _, full = loss_and_grad(quad_task, theta, 3)
    eta = 1.0
    root = RngStream(11)
    n = 100_000
    grads = np.empty((n, quad_task.d))
    for i in range(n):
        grads[i] = -local_sgd(theta, quad_task, 3, 1, eta, 5, root.child(StreamLabel.TRIAL, i)).delta / eta
    mean = grads.mean(axis=0)
    se = grads.std(axis=0, ddof=1) / np.sqrt(n)
    assert np.all(np.abs(mean - full) <= 4 * se)


def test_reported_gradient_norm_bounds_every_step(quad_task):
    theta = np.ones(quad_task.d)
    rng = RngStream(2)
    up = local_sgd(theta, quad_task, 0, 5, 0.1, 4, rng)
    # replay the same draws
    gen = rng.generator()
    s = quad_task.shards[0]
    cur = theta.copy()
    norms = []
    for _ in range(5):
        idx = gen.choice(len(s), size=4, replace=False)
        g = s.X[idx].T @ (s.X[idx] @ cur - s.y[idx]) / 4
        norms.append(g @ g)
        cur -= 0.1 * g
    assert up.grad_sq_max == pytest.approx(max(norms), rel=1e-12)
    assert all(up.grad_sq_max >= x for x in norms)
    assert up.grad_sq_mean == pytest.approx(np.mean(norms), rel=1e-12)


def test_error_free_descent(quad_task):
    tau = 3
    eta = 1.0 / (quad_task.L * tau)
    theta = np.full(quad_task.d, 5.0)
    prev = loss_and_grad(quad_task, theta)[0]
    for t in range(50):
        ups = [local_sgd(theta, quad_task, m, tau, eta, 20, RngStream(t)) for m in range(quad_task.M)]
        theta = global_step(theta, aggregate_error_free(ups, quad_task.M))
        cur = loss_and_grad(quad_task, theta)[0]
        assert cur <= prev + 1e-12
        prev = cur


# -- aggregation and global step


def test_aggregate_examples():
    assert np.array_equal(aggregate_error_free([np.array([2.0, 0.0]), np.array([0.0, 2.0])], 2), [1.0, 1.0])
    assert np.array_equal(aggregate_error_free([np.zeros(3)] * 4, 4), np.zeros(3))
    v = np.array([1.5, -2.0])
    assert np.array_equal(aggregate_error_free([LocalUpdate(v, 0, 0.0, 0.0)], 1), v)
    with pytest.raises(ValueError):
        aggregate_error_free([v], 2)


def test_global_step_examples():
    assert np.array_equal(global_step([1.0, 1.0], [0.0, 0.0]), [1.0, 1.0])
    assert np.array_equal(global_step([0.0, 0.0], [3.0, 4.0]), [3.0, 4.0])
    assert np.array_equal(global_step([1.0, 2.0], [-1.0, -2.0]), [0.0, 0.0])
    with pytest.raises(ValueError):
        global_step([1.0], [1.0, 2.0])


@settings(max_examples=25, deadline=None)
@given(M=st.integers(1, 8), seed=st.integers(0, 10_000))
def test_iid_partition_cover_property(M, seed):
    ds = Dataset(np.arange(50.0)[:, None], np.arange(50.0), np.zeros(50, int))
    shards = partition(ds, M, "iid", RngStream(seed))
    ids = np.concatenate([s.y for s in shards])
    assert len(shards) == M and sorted(ids) == list(range(50))
    assert max(len(s) for s in shards) - min(len(s) for s in shards) <= 1
