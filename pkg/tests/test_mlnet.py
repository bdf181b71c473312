import json
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from conftest import make_samples
from errors import ConfigError, DimensionError, ValidationError, VersionMismatchError
from formation import SensingOperator, make_uniform_pattern, sample_binary_frames
from likelihood import PixelLikelihoodContext
from mlnet import (LOSS_KINDS, TENSOR_NAMES, MLNetParams, TrainConfig, initial_params, load_params,
                   mlnet_backward, mlnet_forward, mlnet_grad_D, mlnet_infer, mlnet_loss, output_gradients,
                   sample_gradients, save_params, shrink_subgradient, train_mlnet)
from solvers import PatchProblem, SolverConfig, estimate_lipschitz, ista_step, solve_ista
from synthesis import Dictionary

C = 2.0
MU = 0.5


def _step(sample, dictionary, op):
    return ista_step(estimate_lipschitz([PatchProblem(sample.ctx, dictionary, op, C)]))


@pytest.fixture
def sample(rng, small_op):
    return make_samples(1, small_op, rng)[0]


@pytest.fixture
def params(sample, small_dictionary, small_op):
    eta = _step(sample, small_dictionary, small_op)
    return MLNetParams.ista_init(small_dictionary, eta, MU, 3, small_op, C)


def test_shrink_subgradient():
    for b, expected in ((5.0, (1.0, -1.0)), (-5.0, (1.0, 1.0)), (1.0, (0.0, 0.0)), (2.0, (0.0, 0.0))):
        pass_through, d_theta = shrink_subgradient(b, 2.0)
        assert (float(pass_through), float(d_theta)) == expected


def test_zero_depth_outputs_constant(params, sample):
    x_hat, tape = mlnet_forward(params.with_depth(0), sample.ctx)
    assert_array_equal(x_hat, np.full((3, 3), C))
    assert tape.depth == 0


def test_huge_threshold_outputs_constant(params, sample):
    blocked = params.with_tensor("theta", np.full(params.atom_count, 1e12))
    x_hat, tape = mlnet_forward(blocked, sample.ctx)
    assert_array_equal(x_hat, np.full((3, 3), C))
    assert all(not code.any() for code in tape.codes)


def test_ista_initialized_network_matches_ista(sample, small_dictionary, small_op):
    eta = _step(sample, small_dictionary, small_op)
    net = MLNetParams.ista_init(small_dictionary, eta, MU, 5, small_op, C)
    _, tape = mlnet_forward(net, sample.ctx)
    for t in range(6):
        config = SolverConfig(mu=MU, eta0=eta, max_iters=t, tolerance=0.0, variant="ista", backtracking=False)
        z, _ = solve_ista(sample.ctx, config, small_dictionary, small_op, C)
        assert_allclose(tape.codes[t], z, rtol=0, atol=1e-10)
    assert np.abs(tape.codes[5]).sum() > 0


def test_infer_matches_forward(params, sample):
    x_forward, _ = mlnet_forward(params, sample.ctx)
    x_infer, report = mlnet_infer(params, sample.ctx)
    assert_array_equal(x_forward, x_infer)
    assert len(report.objective) == params.depth + 1


def test_losses():
    assert mlnet_loss(np.array([3.0]), np.array([1.0])) == 2.0
    assert_allclose(mlnet_loss(np.array([math.e - 1.0]), np.array([0.0]), "log_mse"), 0.5, rtol=1e-12)
    with pytest.raises(ValidationError):
        mlnet_loss(np.array([-1.0]), np.array([1.0]), "log_mse")
    with pytest.raises(ValidationError):
        mlnet_loss(np.array([1.0]), np.array([1.0]), "l1")
    with pytest.raises(DimensionError):
        mlnet_loss(np.ones(2), np.ones(3))


def test_zero_upstream_gives_zero_gradients(params, sample):
    _, tape = mlnet_forward(params, sample.ctx)
    grads = mlnet_backward(params, tape, sample.ctx, np.zeros(params.atom_count))
    for value in grads.as_dict().values():
        assert not value.any()


def test_output_gradient_vanishes(params, sample):
    blocked = params.with_tensor("theta", np.full(params.atom_count, 1e12))
    _, tape = mlnet_forward(blocked, sample.ctx)
    assert not mlnet_grad_D(blocked, tape, sample.target).any()

    x_hat, tape = mlnet_forward(params, sample.ctx)
    dD, dz = output_gradients(params, tape, x_hat)
    assert not dD.any()
    assert not dz.any()


def test_backward_rejects_mismatched_tape(params, sample):
    _, tape = mlnet_forward(params.with_depth(2), sample.ctx)
    with pytest.raises(ValidationError):
        mlnet_backward(params, tape, sample.ctx, np.zeros(params.atom_count))


FD_STEP = 1e-6
KINK_MARGIN = 1e-3


def _random_network(rng):
    # 4x4 patches, 6 atoms, 3 layers, 2 frames; tensors jittered off the ISTA initialization
    op = SensingOperator(upsampling=2, sigma=1.0, truncation=2)
    atoms = rng.standard_normal((16, 6))
    dictionary = Dictionary(atoms / np.linalg.norm(atoms, axis=0))
    c = float(rng.uniform(1.0, 5.0))
    target = rng.uniform(0.5, 5.0, size=(4, 4))
    pattern = make_uniform_pattern(2, 2, 1, 4, seed=int(rng.integers(1000)))
    stack = sample_binary_frames(op.forward(target), pattern, 2, int(rng.integers(1 << 30)))
    ctx = PixelLikelihoodContext.from_stack(stack)
    eta = ista_step(estimate_lipschitz([PatchProblem(ctx, dictionary, op, c)]))
    base = MLNetParams.ista_init(dictionary, eta, float(rng.uniform(0.05, 1.0)), 3, op, c)

    def jitter(value):
        return value * (1.0 + 0.1 * rng.standard_normal(value.shape))

    params = MLNetParams(3, jitter(base.A), jitter(base.Q), jitter(base.W), np.abs(jitter(base.theta)),
                         jitter(base.D), op, c)
    return params, ctx, target, rng.normal(0, 0.5, size=6)


def _kink_distance(params, tape):
    """Smallest distance of any |b_t| to theta and of any rho argument to 0"""
    gaps = []
    for t, b in enumerate(tape.pre_shrink, 1):
        gaps.append(np.abs(np.abs(b) - params.theta))
        z_prev = tape.codes[t - 1]
        # a zero code gives exactly zero arguments whatever A and Q are
        if z_prev.any():
            gaps += [np.abs(params.A @ z_prev), np.abs(params.Q @ z_prev)]
    if tape.codes[-1].any():
        gaps.append(np.abs(params.D @ tape.codes[-1]))
    return min(float(g.min()) for g in gaps)


def _check_network(rng, params, ctx, target, z0, kind):
    _, tape = mlnet_forward(params, ctx, z0)
    dD, dz = output_gradients(params, tape, target, kind)
    grads = mlnet_backward(params, tape, ctx, dz)
    analytic = dict(grads.as_dict(), D=dD)

    def loss(p, start):
        return mlnet_loss(mlnet_forward(p, ctx, start)[0], target, kind)

    for name in TENSOR_NAMES:
        value = getattr(params, name)
        picks = rng.choice(value.size, size=min(20, value.size), replace=False)
        numeric = []
        for i in picks:
            up, down = value.copy(), value.copy()
            up.flat[i] += FD_STEP
            down.flat[i] -= FD_STEP
            numeric.append((loss(params.with_tensor(name, up), z0)
                            - loss(params.with_tensor(name, down), z0)) / (2 * FD_STEP))
        assert_allclose(analytic[name].flat[picks], numeric, rtol=1e-4, atol=1e-6, err_msg=name)

    numeric = []
    for i in range(z0.size):
        step = np.zeros_like(z0)
        step[i] = FD_STEP
        numeric.append((loss(params, z0 + step) - loss(params, z0 - step)) / (2 * FD_STEP))
    assert_allclose(grads.code, numeric, rtol=1e-4, atol=1e-6, err_msg="code")


def _check_random_networks(count, seed):
    rng = np.random.default_rng(seed)
    checked = 0
    for _ in range(10 * count):
        params, ctx, target, z0 = _random_network(rng)
        _, tape = mlnet_forward(params, ctx, z0)
        if not tape.codes[-1].any() or _kink_distance(params, tape) < KINK_MARGIN:
            continue
        _check_network(rng, params, ctx, target, z0, LOSS_KINDS[checked % 2])
        checked += 1
        if checked == count:
            return
    pytest.fail(f"only {checked} of {count} random networks were away from the kinks")


def test_gradients_match_finite_differences():
    _check_random_networks(20, seed=11)


@pytest.mark.slow
def test_gradients_match_finite_differences_many_networks():
    _check_random_networks(200, seed=12)


@pytest.mark.parametrize("kind", ["mse", "log_mse"])
def test_sample_gradients_match_backward(params, sample, kind):
    loss, grads = sample_gradients(params, sample, kind)
    x_hat, tape = mlnet_forward(params, sample.ctx)
    assert loss == mlnet_loss(x_hat, sample.target, kind)
    dD, dz = output_gradients(params, tape, sample.target, kind)
    assert_array_equal(grads["D"], dD)
    for name, value in mlnet_backward(params, tape, sample.ctx, dz).as_dict().items():
        assert_array_equal(grads[name], value)


def test_forward_start_code(params, sample):
    x_zero, _ = mlnet_forward(params, sample.ctx)
    x_given, tape = mlnet_forward(params, sample.ctx, np.zeros(params.atom_count))
    assert_array_equal(x_zero, x_given)
    assert_array_equal(tape.codes[0], np.zeros(params.atom_count))
    with pytest.raises(DimensionError):
        mlnet_forward(params, sample.ctx, np.zeros(params.atom_count + 1))


def test_params_validation(small_dictionary, small_op):
    D = small_dictionary.atoms
    theta = np.full(16, 0.1)
    with pytest.raises(DimensionError):
        MLNetParams(2, D, D, D, theta, D, small_op, C)
    with pytest.raises(ValidationError):
        MLNetParams(2, D, D, D.T, -theta, D, small_op, C)
    with pytest.raises(ValidationError):
        MLNetParams(-1, D, D, D.T, theta, D, small_op, C)
    narrow = np.ones((8, 16))
    with pytest.raises(DimensionError):
        MLNetParams(1, narrow, narrow, narrow.T, theta, narrow, small_op, C)
    with pytest.raises(ValidationError):
        MLNetParams.ista_init(small_dictionary, 0.0, MU, 2, small_op, C)


def test_params_file(tmp_path, params):
    directory = save_params(params, str(tmp_path / "net"))
    loaded = load_params(directory)
    for name, value in params.tensors().items():
        assert_array_equal(getattr(loaded, name), value)
    assert loaded.depth == params.depth
    assert loaded.op == params.op
    assert loaded.c == params.c


def test_params_file_errors(tmp_path, params):
    with pytest.raises(ConfigError):
        load_params(str(tmp_path / "missing"))
    directory = save_params(params, str(tmp_path / "net"))
    manifest = tmp_path / "net" / "manifest.json"
    data = json.loads(manifest.read_text())
    data["format_version"] = 99
    manifest.write_text(json.dumps(data))
    with pytest.raises(VersionMismatchError):
        load_params(directory)


def _training_setup(rng, small_dictionary, small_op, count=6):
    samples = make_samples(count, small_op, rng)
    init = initial_params(samples, small_dictionary, small_op, C, MU, depth=2)
    return samples, init


def test_zero_learning_rate_keeps_initialization(rng, small_dictionary, small_op):
    samples, init = _training_setup(rng, small_dictionary, small_op)
    best, history = train_mlnet(samples, init, TrainConfig(learning_rate=0.0, epochs=3, batch_size=4))
    for name, value in init.tensors().items():
        assert_array_equal(getattr(best, name), value)
    assert len(history) == 4
    assert len({row["train_loss"] for row in history}) == 1
    assert [row["tensor"] for row in history] == ["-", "W", "A", "Q"]


def test_training_is_reproducible(rng, small_dictionary, small_op):
    samples, init = _training_setup(rng, small_dictionary, small_op)
    cfg = TrainConfig(learning_rate=0.05, epochs=2, batch_size=3, seed=9)
    _, first = train_mlnet(samples, init, cfg)
    _, second = train_mlnet(samples, init, cfg)
    assert first == second


def test_training_returns_best_validation(rng, small_dictionary, small_op):
    samples, init = _training_setup(rng, small_dictionary, small_op)
    best, history = train_mlnet(samples, init, TrainConfig(learning_rate=0.05, epochs=3, batch_size=3, seed=1))
    assert (best.theta >= 0).all()
    assert [row["epoch"] for row in history] == [0, 1, 2, 3]
    rates = [row["learning_rate"] for row in history]
    assert rates == sorted(rates, reverse=True)


def test_zero_epochs_returns_initialization(rng, small_dictionary, small_op):
    samples, init = _training_setup(rng, small_dictionary, small_op)
    best, history = train_mlnet(samples, init, TrainConfig(epochs=0))
    assert_array_equal(best.W, init.W)
    assert len(history) == 1
    assert history[0]["val_loss"] > 0


def test_training_needs_samples(params):
    with pytest.raises(ValidationError):
        train_mlnet([], params, TrainConfig())
    with pytest.raises(ValidationError):
        TrainConfig(loss="huber")
