import math

import numpy as np
import pytest

from sketchysgd.data import Dataset
from sketchysgd.linalg import eigh_small, make_rng
from sketchysgd.nystrom import NystromApprox, precond_solve, rand_nys_approx
from sketchysgd.optimizers import (
    DivergenceError,
    OptimizerConfig,
    preconditioned_top_eigenvalue,
    resolve_config,
    sgd_run,
    sketchysgd_run,
    sketchysgd_theoretical_run,
    svrg_run,
)
from sketchysgd.oracles import ProblemOracle, sample_batch
from sketchysgd.synthetic import gaussian_dataset, planted_least_squares


def unit_row_oracle(task, n, p=5, seed=0):
    rng = make_rng(seed)
    a = rng.standard_normal((n, p))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    labels = np.where(rng.standard_normal(n) > 0, 1.0, -1.0) if task == "logistic" else rng.standard_normal(n)
    return ProblemOracle(Dataset(a, labels), task, 0.0)


def test_resolve_config_ridge_defaults():
    oracle = unit_row_oracle("ridge", n=10000)
    cfg = resolve_config(OptimizerConfig(), oracle)
    assert cfg.rho == pytest.approx(1e-3, rel=1e-12)
    assert cfg.hess_batch_size == 100
    assert math.isinf(cfg.update_freq)
    assert cfg.grad_batch_size == 256
    assert cfg.rank == 10 and cfg.lr_scale == 0.5


def test_resolve_config_logistic_update_freq():
    oracle = unit_row_oracle("logistic", n=1000)
    cfg = resolve_config(OptimizerConfig(grad_batch_size=256), oracle)
    assert cfg.update_freq == 4  # ceil(1000/256)


def test_resolve_config_logistic_rho():
    oracle = unit_row_oracle("logistic", n=500)
    cfg = resolve_config(OptimizerConfig(), oracle)
    assert cfg.rho == pytest.approx(2.5e-4, rel=1e-12)


def test_resolve_config_validation():
    oracle = unit_row_oracle("ridge", n=50)
    with pytest.raises(ValueError):
        resolve_config(OptimizerConfig(rank=0), oracle)
    with pytest.raises(ValueError):
        resolve_config(OptimizerConfig(mode="theoretical"), oracle)  # needs a learning rate
    with pytest.raises(ValueError):
        resolve_config(OptimizerConfig(rho=-1.0), oracle)


def test_power_iteration_identity_operator():
    # operator equal to the preconditioner itself: estimate is exactly 1
    h = None
    rng = make_rng(1)
    g = rng.standard_normal((30, 30))
    h = g @ g.T / 30
    nys = rand_nys_approx(lambda v: h @ v, 30, 6, make_rng(2))
    rho = 0.05
    op = lambda v: nys.apply(v) + rho * v
    lam = preconditioned_top_eigenvalue(op, nys, rho, 10, make_rng(3))
    assert abs(lam - 1.0) <= 1e-10


def test_power_iteration_rank_zero_scaled_identity():
    nys = NystromApprox.rank_zero(12)
    c, rho = 3.7, 0.2
    lam = preconditioned_top_eigenvalue(lambda v: c * v, nys, rho, 10, make_rng(4))
    assert lam == pytest.approx(c / rho, rel=1e-12)


def test_power_iteration_close_to_dense_top_eigenvalue():
    rng = make_rng(5)
    ds, _ = planted_least_squares(300, 40, condition=1e3, seed=5)
    oracle = ProblemOracle(ds, "ridge", 0.0)
    full = np.arange(oracle.n)
    nys = rand_nys_approx(
        lambda v: oracle.minibatch_hvp(np.zeros(40), full, v), 40, 8, make_rng(6), batch=full
    )
    rho = 1e-3 * oracle.smoothness_upper_bound
    h = oracle.hessian_matrix(np.zeros(40))
    from sketchysgd.diagnostics import _inv_sqrt_psd

    pis = _inv_sqrt_psd(nys.matrix() + rho * np.eye(40))
    dense_top = eigh_small(pis @ h @ pis)[0][-1]
    lam = preconditioned_top_eigenvalue(
        lambda v: oracle.minibatch_hvp(np.zeros(40), full, v), nys, rho, 10, make_rng(7)
    )
    assert lam == pytest.approx(dense_top, rel=0.05)


def test_one_dimensional_quadratic_halves_iterate():
    # f(w) = 0.5*h*w^2 with h=4: one step with alpha=0.5 halves the iterate
    a = np.full((4, 1), 2.0)
    oracle = ProblemOracle(Dataset(a, np.zeros(4)), "ridge", 0.0)
    cfg = OptimizerConfig(
        rank=1, grad_batch_size=4, hess_batch_size=4, power_iters=1, max_passes=3.0, seed=0
    )
    res = sketchysgd_run(oracle, cfg, w0=np.array([1.0]))
    assert res.iterations == 1
    assert res.w[0] == pytest.approx(0.5, abs=1e-8)


def test_zero_gradient_is_fixed_point():
    ds, w_star = planted_least_squares(300, 20, condition=100.0, seed=8)
    oracle = ProblemOracle(ds, "ridge", 0.0)
    cfg = OptimizerConfig(rank=5, grad_batch_size=32, hess_batch_size=17, max_passes=3.0, seed=1)
    res = sketchysgd_run(oracle, cfg, w0=w_star)
    np.testing.assert_array_equal(res.w, w_star)
    res_sgd = sgd_run(oracle, grad_batch_size=32, max_passes=3.0, seed=1, w0=w_star)
    np.testing.assert_array_equal(res_sgd.w, w_star)
    res_svrg = svrg_run(oracle, grad_batch_size=32, max_passes=3.0, seed=1, w0=w_star)
    np.testing.assert_array_equal(res_svrg.w, w_star)
    cfg_t = OptimizerConfig(
        rank=5, grad_batch_size=32, hess_batch_size=17, max_passes=3.0, seed=1,
        mode="theoretical", stage_length=4, learning_rate=0.5,
    )
    res_t = sketchysgd_theoretical_run(oracle, cfg_t, w0=w_star)
    np.testing.assert_allclose(res_t.w, w_star, rtol=1e-14)


def test_sgd_zero_learning_rate_keeps_iterate():
    oracle = unit_row_oracle("ridge", n=40)
    w0 = np.arange(5, dtype=float)
    res = sgd_run(oracle, learning_rate=0.0, max_passes=2.0, seed=0, w0=w0)
    np.testing.assert_array_equal(res.w, w0)


def test_sgd_one_dimensional_recursion():
    a = np.full((6, 1), 3.0)  # h = 9
    oracle = ProblemOracle(Dataset(a, np.zeros(6)), "ridge", 0.0)
    eta = 0.01
    res = sgd_run(oracle, learning_rate=eta, grad_batch_size=6, max_passes=5.0, seed=0, w0=np.array([2.0]))
    want = 2.0 * (1.0 - eta * 9.0) ** res.iterations
    assert res.w[0] == pytest.approx(want, rel=1e-12)


def test_svrg_full_batch_reduces_to_gradient_descent():
    ds, _ = planted_least_squares(50, 8, condition=10.0, seed=9)
    oracle = ProblemOracle(ds, "ridge", 0.0)
    eta = 0.1
    res = svrg_run(oracle, learning_rate=eta, grad_batch_size=50, max_passes=6.0, seed=2)
    w = np.zeros(8)
    full = np.arange(50)
    for _ in range(res.iterations):
        w = w - eta * oracle.minibatch_gradient(w, full)
    np.testing.assert_array_equal(res.w, w)


def test_svrg_loss_decreases_on_ridge():
    finals = []
    for seed in range(5):
        ds, _ = planted_least_squares(200, 10, condition=50.0, seed=10 + seed)
        oracle = ProblemOracle(ds, "ridge", 1e-3)
        res = svrg_run(oracle, learning_rate=0.05, grad_batch_size=20, max_passes=8.0, seed=seed)
        losses = [r.train_loss for r in res.records]
        finals.append(np.all(np.diff(losses) <= 1e-12))
    assert np.median(finals) == 1.0


def test_theoretical_stage_one_matches_practical_fixed_lr():
    ds, _ = planted_least_squares(150, 12, condition=100.0, seed=11)
    oracle = ProblemOracle(ds, "ridge", 0.0)
    base = dict(rank=4, grad_batch_size=16, hess_batch_size=12, max_passes=4.0, seed=3, learning_rate=0.3)
    res_p = sketchysgd_run(oracle, OptimizerConfig(**base))
    res_t = sketchysgd_theoretical_run(
        oracle, OptimizerConfig(mode="theoretical", stage_length=1, **base)
    )
    assert res_p.iterations == res_t.iterations
    np.testing.assert_array_equal(res_p.w, res_t.w)


def test_theoretical_full_batch_matches_dense_preconditioned_gd():
    n, p = 60, 10
    ds, _ = planted_least_squares(n, p, condition=100.0, seed=12)
    oracle = ProblemOracle(ds, "ridge", 0.0)
    eta, rho = 0.4, 1e-3
    cfg = OptimizerConfig(
        mode="theoretical", stage_length=1, learning_rate=eta, rank=p,
        grad_batch_size=n, hess_batch_size=n, rho=rho, max_passes=30.0, seed=4,
    )
    res = sketchysgd_theoretical_run(oracle, cfg)
    # dense reference: the rank-p sketch of the full-batch Hessian is exact
    h = oracle.hessian_matrix(np.zeros(p))
    pmat = h + rho * np.eye(p)
    w = np.zeros(p)
    full = np.arange(n)
    for _ in range(res.iterations):
        w = w - eta * np.linalg.solve(pmat, oracle.minibatch_gradient(w, full))
    assert np.linalg.norm(res.w - w) <= 1e-8 * (1.0 + np.linalg.norm(w))


def test_preconditioned_space_equivalence_single_step():
    rng = make_rng(13)
    for trial in range(20):
        n, p = 80, 25
        ds = gaussian_dataset(n, p, "logistic", seed=200 + trial)
        oracle = ProblemOracle(ds, "logistic", 1e-3)
        w = rng.standard_normal(p)
        batch = sample_batch(rng, n, 16)
        rho = float(rng.uniform(1e-3, 1.0))
        hess_batch = sample_batch(rng, n, 32)
        nys = rand_nys_approx(
            lambda v: oracle.minibatch_hvp(w, hess_batch, v), p, 5, make_rng(300 + trial)
        )
        eta = 0.7
        g = oracle.minibatch_gradient(w, batch)
        w_direct = w - eta * precond_solve(nys, rho, g)
        # explicit change of variables through the dense square root
        vals, vecs = eigh_small(nys.matrix() + rho * np.eye(p))
        root = (vecs * np.sqrt(vals)) @ vecs.T
        inv_root = (vecs / np.sqrt(vals)) @ vecs.T
        z = root @ w
        z_next = z - eta * (inv_root @ g)
        w_mapped = inv_root @ z_next
        assert np.linalg.norm(w_direct - w_mapped) <= 1e-8 * (1.0 + np.linalg.norm(w_direct))


def test_pass_accounting_matches_formula():
    ds, _ = planted_least_squares(400, 15, condition=100.0, seed=14)
    oracle = ProblemOracle(ds, "ridge", 0.0)
    cfg = OptimizerConfig(rank=3, grad_batch_size=64, hess_batch_size=21, power_iters=7,
                          update_freq=5, max_passes=6.0, seed=5)
    res = sketchysgd_run(oracle, cfg)
    k, j = res.iterations, res.precond_updates
    expected = 64 * k + j * (3 + 7) * 21
    assert res.samples_touched == expected
    assert res.passes == expected / 400


def test_pass_accounting_fixed_lr_skips_powering():
    ds, _ = planted_least_squares(300, 10, condition=10.0, seed=15)
    oracle = ProblemOracle(ds, "ridge", 0.0)
    cfg = OptimizerConfig(rank=2, grad_batch_size=50, hess_batch_size=10,
                          learning_rate=0.2, max_passes=4.0, seed=6)
    res = sketchysgd_run(oracle, cfg)
    expected = 50 * res.iterations + res.precond_updates * 2 * 10
    assert res.samples_touched == expected
    assert res.lr_estimates == 0


def test_pass_accounting_svrg_snapshots():
    ds, _ = planted_least_squares(200, 8, condition=10.0, seed=16)
    oracle = ProblemOracle(ds, "ridge", 0.0)
    res = svrg_run(oracle, learning_rate=0.01, grad_batch_size=32, max_passes=7.0, seed=7)
    expected = 32 * res.iterations + res.snapshots * 200
    assert res.samples_touched == expected


def test_reproducibility_bitwise():
    ds, _ = planted_least_squares(250, 12, condition=100.0, seed=17)
    oracle = ProblemOracle(ds, "ridge", 0.0)
    test_ds, _ = planted_least_squares(50, 12, condition=100.0, seed=18)
    cfg = OptimizerConfig(rank=4, grad_batch_size=32, hess_batch_size=15, max_passes=5.0, seed=8)
    a = sketchysgd_run(oracle, cfg, test_data=test_ds)
    b = sketchysgd_run(oracle, cfg, test_data=test_ds)
    np.testing.assert_array_equal(a.w, b.w)
    assert len(a.records) == len(b.records)
    for ra, rb in zip(a.records, b.records):
        assert ra.passes == rb.passes
        assert ra.train_loss == rb.train_loss
        assert ra.test_loss == rb.test_loss


def test_records_monotone_and_fields():
    ds, _ = planted_least_squares(300, 10, condition=100.0, seed=19)
    oracle = ProblemOracle(ds, "ridge", 0.0)
    res = sketchysgd_run(oracle, OptimizerConfig(max_passes=5.0, seed=9, hess_batch_size=17))
    passes = [r.passes for r in res.records]
    assert passes[0] == 0.0
    assert np.all(np.diff(passes) > 0)
    assert all(r.train_acc is None and r.test_acc is None for r in res.records)

    logit = gaussian_dataset(300, 10, "logistic", seed=20)
    test_logit = gaussian_dataset(80, 10, "logistic", seed=21)
    oracle2 = ProblemOracle(logit, "logistic", 1e-4)
    res2 = sketchysgd_run(
        oracle2, OptimizerConfig(max_passes=4.0, seed=10), test_data=test_logit
    )
    last = res2.records[-1]
    assert 0.0 <= last.train_acc <= 1.0 and 0.0 <= last.test_acc <= 1.0
    assert last.test_loss is not None


@pytest.mark.filterwarnings("ignore:overflow")
def test_divergence_detection():
    ds, _ = planted_least_squares(120, 6, condition=10.0, seed=22)
    oracle = ProblemOracle(ds, "ridge", 0.0)
    with pytest.raises(DivergenceError, match="divergence detected"):
        sgd_run(oracle, learning_rate=1e12, grad_batch_size=120, max_passes=50.0, seed=11)
    try:
        sgd_run(oracle, learning_rate=1e12, grad_batch_size=120, max_passes=50.0, seed=11)
    except DivergenceError as exc:
        assert exc.iteration >= 1
        assert exc.records  # baseline row survives for partial output
