import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from errors import DimensionError, MalformedFileError, ValidationError
from formation import (BinaryFrameStack, SensingOperator, ThresholdPattern, apply_sensing_adjoint,
                       apply_sensing_operator, covering_thresholds, gaussian_kernel, make_hdr_pattern,
                       make_uniform_pattern, sample_binary_frames, simulate_exposures, stack_exposures)


def _padded_blur(image, sigma, truncation):
    taps = gaussian_kernel(sigma, truncation)
    r = (len(taps) - 1) // 2
    padded = np.pad(image, r, mode="edge")
    out = np.zeros_like(image)
    h, w = image.shape
    for a, ga in enumerate(taps):
        for b, gb in enumerate(taps):
            out += ga * gb * padded[a:a + h, b:b + w]
    return out


def test_constant_image_is_preserved():
    op = SensingOperator(upsampling=3, sigma=1.5, truncation=4)
    y = apply_sensing_operator(np.full((4, 5), 2.5), op)
    assert y.shape == (12, 15)
    assert_allclose(y, 2.5, rtol=1e-12)


def test_delta_kernel_without_upsampling_is_identity(rng):
    op = SensingOperator(upsampling=1, sigma=0.0)
    x = rng.uniform(0, 10, size=(6, 7))
    assert_array_equal(apply_sensing_operator(x, op), x)
    assert_array_equal(apply_sensing_adjoint(x, op), x)


def test_forward_matches_explicit_construction():
    op = SensingOperator(upsampling=2, sigma=1.0, truncation=4)
    x = np.array([[1.0, 0.0], [0.0, 0.0]])
    expected = _padded_blur(np.repeat(np.repeat(x, 2, axis=0), 2, axis=1), 1.0, 4)
    assert_allclose(op.forward(x), expected, atol=1e-14)


def test_adjoint_matches_dense_transpose():
    op = SensingOperator(upsampling=2, sigma=1.0, truncation=4)
    shape = (3, 2)
    columns = []
    for i in range(6):
        basis = np.zeros(6)
        basis[i] = 1.0
        columns.append(op.forward(basis.reshape(shape)).ravel())
    dense = np.stack(columns, axis=1)
    y = np.random.default_rng(7).standard_normal(op.output_shape(shape))
    assert_allclose(op.adjoint(y).ravel(), dense.T @ y.ravel(), atol=1e-12)


def test_adjoint_of_zeros_is_zero(small_op):
    assert_array_equal(apply_sensing_adjoint(np.zeros((6, 4)), small_op), np.zeros((3, 2)))


def test_operator_rejects_bad_inputs(small_op):
    with pytest.raises(ValidationError):
        apply_sensing_operator(np.array([[1.0, np.nan]]), small_op)
    with pytest.raises(ValidationError):
        SensingOperator(upsampling=0)
    with pytest.raises(ValidationError):
        SensingOperator(sigma=-1.0)
    with pytest.raises(DimensionError):
        apply_sensing_adjoint(np.zeros((5, 4)), small_op)


def test_zero_rate_never_fires():
    pattern = make_uniform_pattern(2, 2, 1, 4)
    stack = sample_binary_frames(np.zeros((8, 8)), pattern, frames=6, seed=3)
    assert stack.bits.sum() == 0


def test_single_photon_threshold_fires_with_expected_probability():
    stack = sample_binary_frames(np.ones((100, 100)), ThresholdPattern(np.array([[1]])), frames=10, seed=11)
    p = 1.0 - math.exp(-1.0)
    standard_error = math.sqrt(p * (1 - p) / stack.bits.size)
    assert abs(stack.bits.mean() - p) < 3 * standard_error


def test_sampling_is_reproducible_and_prefix_stable(rng):
    lam = rng.uniform(0, 6, size=(10, 10))
    pattern = make_uniform_pattern(3, 3, 1, 9)
    first = sample_binary_frames(lam, pattern, frames=5, seed=42)
    second = sample_binary_frames(lam, pattern, frames=5, seed=42)
    shorter = sample_binary_frames(lam, pattern, frames=3, seed=42)
    assert_array_equal(first.bits, second.bits)
    assert_array_equal(first.bits[:3], shorter.bits)


def test_uniform_pattern_level_counts():
    tile = make_uniform_pattern(3, 3, 1, 9).tile
    assert sorted(tile.ravel()) == list(range(1, 10))

    counts = np.bincount(make_uniform_pattern(5, 5, 1, 10).tile.ravel())[1:]
    assert sorted(counts) == [2] * 5 + [3] * 5

    assert_array_equal(make_uniform_pattern(1, 1, 1, 1).tile, [[1]])


def test_uniform_pattern_too_small_reports_required_cells():
    with pytest.raises(ValidationError) as info:
        make_uniform_pattern(3, 3, 1, 10)
    assert info.value.required == 10


def test_hdr_covering_count():
    assert 150 <= len(covering_thresholds(1e5)) <= 165
    assert covering_thresholds(1.0) == [1]


def test_hdr_covering_intervals_chain():
    thresholds = covering_thresholds(1e5)
    for low, high in zip(thresholds, thresholds[1:]):
        assert high - 2 * math.sqrt(high) <= low + 2 * math.sqrt(low) + 1e-9
    assert thresholds[-1] + 2 * math.sqrt(thresholds[-1]) >= 1e5


def test_hdr_pattern_holds_covering_set():
    covering = covering_thresholds(1e5)
    pattern = make_hdr_pattern(1e5, 13, seed=2)
    assert pattern.tile.shape == (13, 13)
    assert np.isin(covering, pattern.tile).all()
    low = covering_thresholds(1e4)
    leftover = list(pattern.tile.ravel())
    for q in covering:
        leftover.remove(q)
    assert set(leftover) <= set(low)


def test_hdr_pattern_too_small_tile():
    needed = len(covering_thresholds(1e5))
    with pytest.raises(ValidationError) as info:
        make_hdr_pattern(1e5, 12)
    assert info.value.required == needed


def test_pattern_expand_is_periodic():
    pattern = ThresholdPattern(np.array([[1, 2], [3, 4]]))
    qmap = pattern.expand(3, 5)
    assert_array_equal(qmap, [[1, 2, 1, 2, 1], [3, 4, 3, 4, 3], [1, 2, 1, 2, 1]])


def test_pattern_file(tmp_path):
    pattern = make_uniform_pattern(4, 3, 2, 7, seed=5)
    path = pattern.save(str(tmp_path / "pattern.txt"))
    assert_array_equal(ThresholdPattern.load(path).tile, pattern.tile)

    broken = tmp_path / "broken.txt"
    broken.write_text("2 2\n1 2 3\n")
    with pytest.raises(MalformedFileError):
        ThresholdPattern.load(str(broken))


def test_stack_exposures(rng):
    qmap = np.ones((4, 4), dtype=np.int64)
    one = BinaryFrameStack(rng.integers(0, 2, size=(1, 4, 4)), qmap)
    three = BinaryFrameStack(rng.integers(0, 2, size=(3, 4, 4)), qmap)
    merged = stack_exposures([one, three])
    assert merged.frames == 4
    assert_array_equal(merged.bits[1:], three.bits)
    assert stack_exposures([one]) is one


def test_stack_exposures_rejects_mismatch(rng):
    a = BinaryFrameStack(rng.integers(0, 2, size=(1, 4, 4)), np.ones((4, 4)))
    b = BinaryFrameStack(rng.integers(0, 2, size=(1, 4, 4)), np.full((4, 4), 2))
    with pytest.raises(ValidationError):
        stack_exposures([a, b])
    with pytest.raises(ValidationError):
        stack_exposures([])


def test_simulate_exposures_shapes(small_op, rng):
    stack = simulate_exposures(rng.uniform(0, 5, size=(4, 6)), small_op, make_uniform_pattern(2, 2, 1, 4), 3, 0)
    assert stack.bits.shape == (3, 8, 12)
    n0, n1 = stack.counts()
    assert_array_equal(n0 + n1, 3)


@pytest.mark.parametrize("op", [SensingOperator(upsampling=2, sigma=1.0, truncation=2),
                                SensingOperator(upsampling=5, sigma=3.0, truncation=4),
                                SensingOperator(upsampling=1, sigma=0.0)])
def test_operator_and_adjoint_are_linear(op, rng):
    for _ in range(20):
        x, y = rng.normal(0, 5, size=(2, 7, 6))
        u, v = rng.normal(0, 5, size=(2, 7 * op.upsampling, 6 * op.upsampling))
        a, b = rng.normal(0, 3, size=2)
        # blur weights are nonnegative, so H|.| bounds the rounding of every entry
        scale = op.forward(np.abs(a * x) + np.abs(b * y)).max()
        error = np.abs(op.forward(a * x + b * y) - (a * op.forward(x) + b * op.forward(y))).max()
        assert error <= 1e-12 * scale
        scale = op.adjoint(np.abs(a * u) + np.abs(b * v)).max()
        error = np.abs(op.adjoint(a * u + b * v) - (a * op.adjoint(u) + b * op.adjoint(v))).max()
        assert error <= 1e-12 * scale


def test_unit_scale_matches_plain_sampling(rng):
    lam = rng.uniform(0, 4, size=(6, 6))
    pattern = make_uniform_pattern(2, 2, 1, 4)
    plain = sample_binary_frames(lam, pattern, 5, 3)
    scaled = sample_binary_frames(lam, pattern, 5, 3, scales=[1.0])
    assert_array_equal(plain.bits, scaled.bits)


def test_sub_exposures_add_up():
    # q = 1 fires with probability 1 - exp(-sum(scales) lambda)
    pattern = ThresholdPattern(np.ones((1, 1), dtype=np.int64))
    scales = (0.2, 1.0, 3.0)
    stack = sample_binary_frames(np.full((1, 1), 0.7), pattern, 20_000, 8, scales=scales)
    assert abs(stack.bits.mean() - (1 - math.exp(-4.2 * 0.7))) < 0.01
    prefix = sample_binary_frames(np.full((1, 1), 0.7), pattern, 50, 8, scales=scales)
    assert_array_equal(prefix.bits, stack.bits[:50])


def test_bad_exposure_scales(small_op):
    pattern = make_uniform_pattern(2, 2, 1, 4)
    for scales in ([], [0.0], [1.0, -2.0], [float("nan")]):
        with pytest.raises(ValidationError):
            simulate_exposures(np.ones((3, 3)), small_op, pattern, 2, 0, scales=scales)
