import numpy as np
import pytest

from src.errors import AmpostError, OperatorError
from src.operators import (
    DATASET_KINDS,
    BlurOperator,
    CompositeOperator,
    DownsampleOperator,
    IdentityOperator,
    MaskOperator,
    Measurement,
    apply_batch,
    as_point_cloud,
    dataset_shape,
    gaussian_kernel_1d,
    gen_toy_dataset,
    ingest_dataset,
    load_measurements,
    mask_fraction,
    measure,
    measure_dataset,
    parse_operator_spec,
    random_mask,
    save_dataset,
    save_measurements,
    sphere_coords,
    stack_dataset,
)
from src.tensorcore import Tensor, backward


class TestOperatorSpec:
    def test_parse_simple(self):
        spec = parse_operator_spec("mask:p=0.3")
        assert spec.kind == "mask" and spec.params == {"p": "0.3"}
        assert spec.text == "mask:p=0.3"
        assert parse_operator_spec("id").text == "id"

    def test_parse_composite(self):
        spec = parse_operator_spec("composite:blur:sigma=1.0+mask:p=0.3")
        assert [part.kind for part in spec.parts] == ["blur", "mask"]
        assert spec.text == "composite:blur:sigma=1.0+mask:p=0.3"

    @pytest.mark.parametrize("text", ["", "warp:k=2", "mask:p", "composite:"])
    def test_parse_errors(self, text):
        with pytest.raises(OperatorError):
            parse_operator_spec(text)

    def test_bad_parameters(self, rng):
        with pytest.raises(OperatorError):
            parse_operator_spec("mask:p=1.2").build(10, rng)
        with pytest.raises(OperatorError):
            parse_operator_spec("down:f=1.5").build(8)
        with pytest.raises(OperatorError):
            parse_operator_spec("blur:sigma=abc").build(8)


class TestMask:
    def test_observed_count(self, rng):
        assert random_mask(10, 0.3, rng).sum() == 7
        assert random_mask(64, 0.3, rng).sum() == 45
        assert random_mask(4160, 0.4, rng).sum() == 2496
        assert random_mask(4160, 0.6, rng).sum() == 1664

    def test_fraction_range(self, rng):
        spec = parse_operator_spec("mask:p=0.3-0.6")
        draws = [mask_fraction(spec, rng) for _ in range(200)]
        assert 0.3 <= min(draws) and max(draws) <= 0.6
        assert max(draws) - min(draws) > 0.1

    def test_fresh_mask_per_build(self, rng):
        spec = parse_operator_spec("mask:p=0.5")
        a, b = spec.build(32, rng), spec.build(32, rng)
        assert not np.array_equal(a.observed(), b.observed())

    def test_apply_zeroes_unobserved(self):
        op = MaskOperator(4, np.array([True, False, True, False]))
        np.testing.assert_array_equal(op.apply(np.array([1.0, 2.0, 3.0, 4.0])).data, [1.0, 0.0, 3.0, 0.0])
        np.testing.assert_array_equal(op.matrix(), np.diag([1.0, 0.0, 1.0, 0.0]))
        assert op.n_observed == 2

    def test_wrong_mask_size(self):
        with pytest.raises(OperatorError):
            MaskOperator(4, np.ones(3, dtype=bool))


class TestLinearOperators:
    def test_gaussian_kernel(self):
        taps = gaussian_kernel_1d(1.0)
        assert taps.size == 5
        assert taps.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(taps, taps[::-1])

    def test_blur_preserves_constants(self):
        op = BlurOperator(16, 1.0)
        np.testing.assert_allclose(op.apply(np.full(16, 0.7)).data, 0.7)
        np.testing.assert_allclose(op.matrix().sum(axis=1), 1.0)

    def test_blur_2d_on_image_shape(self):
        op = parse_operator_spec("blur:sigma=1.0").build(64, shape=(8, 8))
        image = np.zeros((8, 8))
        image[3, 4] = 1.0
        blurred = op.apply(image.reshape(-1)).data.reshape(8, 8)
        assert blurred.sum() == pytest.approx(1.0)
        assert blurred[3, 4] == blurred.max()

    def test_downsample(self):
        op = DownsampleOperator(4, 2)
        np.testing.assert_allclose(op.apply(np.array([1.0, 2.0, 3.0, 4.0])).data, [1.5, 3.5])
        image = np.arange(16.0).reshape(4, 4)
        pooled = parse_operator_spec("down:f=2").build(16, shape=(4, 4)).apply(image.reshape(-1)).data
        np.testing.assert_allclose(pooled, [2.5, 4.5, 10.5, 12.5])

    def test_downsample_needs_divisible_dim(self):
        with pytest.raises(OperatorError):
            DownsampleOperator(5, 2)

    def test_composite_matches_matrix_product(self, rng):
        op = parse_operator_spec("composite:blur:sigma=1.0+down:f=2").build(16, rng)
        assert isinstance(op, CompositeOperator) and op.output_dim == 8
        x = rng.standard_normal(16)
        np.testing.assert_allclose(op.apply(x).data, op.matrix() @ x)
        np.testing.assert_allclose(op.matrix(), op.parts[1].matrix() @ op.parts[0].matrix())

    def test_composite_observed_comes_from_last_mask(self, rng):
        op = parse_operator_spec("composite:blur:sigma=0.5+mask:p=0.25").build(8, rng)
        assert op.observed().sum() == 6

    def test_apply_is_differentiable(self, rng):
        op = BlurOperator(6, 1.0)
        x = Tensor(rng.standard_normal(6), requires_grad=True, name="x")
        grads = backward(op.apply(x).sum())
        np.testing.assert_allclose(grads["x"].data, op.matrix().sum(axis=0))

    def test_wrong_input_dim(self):
        with pytest.raises(OperatorError):
            IdentityOperator(3).apply(np.ones(4))

    @pytest.mark.parametrize("text, shape", [
        ("id", None),
        ("mask:p=0.3", None),
        ("blur:sigma=1.5", None),
        ("blur:sigma=1.0", (8, 8)),
        ("down:f=2", (8, 8)),
        ("composite:mask:p=0.3+blur:sigma=1.0+down:f=2", (8, 8)),
    ])
    def test_superposition(self, rng, text, shape):
        op = parse_operator_spec(text).build(64, rng, shape)
        for _ in range(20):
            a, b = rng.standard_normal(2)
            x, v = rng.standard_normal((2, 64))
            combined = op.apply(a * x + b * v).data
            separate = a * op.apply(x).data + b * op.apply(v).data
            np.testing.assert_allclose(combined, separate, rtol=0, atol=1e-12)


class TestApplyBatch:
    def test_masks_match_per_row(self, rng):
        ops = [parse_operator_spec("mask:p=0.5").build(6, rng) for _ in range(4)]
        x = rng.standard_normal((4, 6))
        expected = np.stack([op.apply(row).data for op, row in zip(ops, x)])
        np.testing.assert_array_equal(apply_batch(ops, Tensor(x)).data, expected)

    def test_mixed_operators(self, rng):
        ops = [BlurOperator(6, 1.0), IdentityOperator(6), DownsampleOperator(6, 1)]
        x = rng.standard_normal((3, 6))
        expected = np.stack([op.apply(row).data for op, row in zip(ops, x)])
        np.testing.assert_allclose(apply_batch(ops, Tensor(x)).data, expected)

    def test_identity_rows(self, rng):
        ops = [IdentityOperator(2) for _ in range(5)]
        x = rng.standard_normal((5, 2))
        np.testing.assert_array_equal(apply_batch(ops, Tensor(x)).data, x)

    def test_one_operator_per_row(self, rng):
        with pytest.raises(OperatorError):
            apply_batch([IdentityOperator(2)], Tensor(np.ones((2, 2))))


class TestMeasurements:
    def test_noise_only_on_observed_entries(self, rng):
        op = MaskOperator(6, np.array([True, True, False, True, False, True]))
        m = measure(op, np.ones(6), 0.1, rng)
        assert m.y[2] == 0.0 and m.y[4] == 0.0
        assert not np.allclose(m.y[m.observed], 1.0)
        np.testing.assert_array_equal(m.observed, op.observed())

    def test_noiseless(self, rng):
        m = measure(IdentityOperator(3), np.array([1.0, 2.0, 3.0]), 0.0, rng)
        np.testing.assert_array_equal(m.y, [1.0, 2.0, 3.0])

    def test_negative_sigma(self, rng):
        with pytest.raises(OperatorError):
            measure(IdentityOperator(2), np.ones(2), -0.1, rng)

    def test_measurement_shape_check(self):
        with pytest.raises(OperatorError):
            Measurement("a", np.ones(3), 0.1, DownsampleOperator(4, 2))

    def test_require_op(self):
        with pytest.raises(OperatorError):
            Measurement("a", np.ones(2), 0.1).require_op()

    def test_dataset_ids(self, rng):
        data = rng.standard_normal((3, 4))
        measurements = measure_dataset("mask:p=0.25", data, 0.1, rng)
        assert [m.id for m in measurements] == ["000000", "000001", "000002"]

    def test_training_container_has_no_truth(self, rng, tmp_path):
        data = gen_toy_dataset("blobs8x8", 4, rng)
        measurements = measure_dataset("mask:p=0.3", data, 0.1, rng, shape=(8, 8))
        save_measurements(tmp_path / "train.amp", measurements, shape=(8, 8))
        loaded = load_measurements(tmp_path / "train.amp")
        assert loaded.truth is None
        assert loaded.op_spec == "mask:p=0.3" and loaded.shape == (8, 8) and len(loaded) == 4
        for original, restored in zip(measurements, loaded):
            assert original.id == restored.id
            np.testing.assert_array_equal(original.y, restored.y)
            np.testing.assert_array_equal(original.observed, restored.observed)
            assert restored.sigma_y == 0.1

    def test_evaluation_container_keeps_truth(self, rng, tmp_path):
        data = rng.standard_normal((2, 4))
        measurements = measure_dataset("composite:blur:sigma=1.0+mask:p=0.5", data, 0.05, rng)
        truth = {m.id: x for m, x in zip(measurements, data)}
        save_measurements(tmp_path / "eval.amp", measurements, truth=truth)
        loaded = load_measurements(tmp_path / "eval.amp")
        np.testing.assert_array_equal(loaded.truth["000001"], data[1])
        restored = loaded.measurements[0]
        np.testing.assert_allclose(restored.op.matrix(), measurements[0].op.matrix())

    def test_composite_with_leading_mask_round_trips(self, rng, tmp_path):
        data = gen_toy_dataset("blobs8x8", 3, rng)
        spec = "composite:mask:p=0.3+blur:sigma=1.0"
        measurements = measure_dataset(spec, data, 0.1, rng, shape=(8, 8))
        save_measurements(tmp_path / "meas.amp", measurements, shape=(8, 8))
        loaded = load_measurements(tmp_path / "meas.amp")
        assert loaded.op_spec == spec and len(loaded) == 3
        for original, restored in zip(measurements, loaded):
            np.testing.assert_array_equal(restored.op.parts[0].observed(), original.op.parts[0].observed())
            np.testing.assert_array_equal(restored.op.matrix(), original.op.matrix())
            np.testing.assert_array_equal(restored.y, original.y)

    def test_masks_on_both_sides_of_a_blur(self, rng, tmp_path):
        measurements = measure_dataset("composite:mask:p=0.5+blur:sigma=1.0+mask:p=0.25", rng.uniform(size=(2, 16)),
                                       0.1, rng)
        save_measurements(tmp_path / "meas.amp", measurements)
        restored = load_measurements(tmp_path / "meas.amp").measurements[1]
        np.testing.assert_array_equal(restored.op.matrix(), measurements[1].op.matrix())
        np.testing.assert_array_equal(restored.observed, measurements[1].observed)

    def test_not_a_measurement_container(self, rng, tmp_path):
        save_dataset(tmp_path / "data.amp", rng.standard_normal((2, 2)))
        with pytest.raises(AmpostError):
            load_measurements(tmp_path / "data.amp")


class TestDatasets:
    @pytest.mark.parametrize("kind, dim", [("gauss2d", 2), ("mixture2d", 2), ("mixture1d", 1), ("moons", 2),
                                           ("blobs8x8", 64), ("sphere_field", 128)])
    def test_shapes(self, kind, dim, rng):
        assert gen_toy_dataset(kind, 10, rng).shape == (10, dim)

    def test_gauss2d_moments(self, rng):
        data = gen_toy_dataset("gauss2d", 50000, rng)
        np.testing.assert_allclose(np.cov(data, rowvar=False), np.diag([1.0, 0.25]), atol=0.03)

    def test_images_are_normalized(self, rng):
        blobs = gen_toy_dataset("blobs8x8", 20, rng)
        np.testing.assert_allclose(blobs.max(axis=1), 1.0)
        assert blobs.min() >= 0.0
        fields = gen_toy_dataset("sphere_field", 20, rng).reshape(20, 8, 16)
        assert fields.min() >= 0.0 and fields.max() <= 1.0
        np.testing.assert_array_equal(fields[:, :, 0], fields[:, :, -1])

    def test_bad_requests(self, rng):
        with pytest.raises(OperatorError):
            gen_toy_dataset("gauss2d", 0, rng)
        with pytest.raises(AmpostError, match="unknown dataset kind"):
            gen_toy_dataset("faces", 10, rng)
        assert "moons" in DATASET_KINDS

    def test_dataset_container(self, rng, tmp_path):
        data = gen_toy_dataset("sphere_field", 5, rng)
        save_dataset(tmp_path / "fields.amp", data, "sphere_field")
        np.testing.assert_array_equal(stack_dataset(ingest_dataset(tmp_path / "fields.amp")), data)
        assert dataset_shape(tmp_path / "fields.amp") == (8, 16)

    def test_stack_rejects_ragged(self):
        with pytest.raises(OperatorError):
            stack_dataset([np.ones(3), np.ones(4)])

    def test_point_cloud_view(self, rng):
        field = gen_toy_dataset("sphere_field", 1, rng)[0]
        cloud = as_point_cloud(field, coords=sphere_coords(8, 16))
        assert (cloud.V, cloud.C) == (128, 1)
        np.testing.assert_array_equal(cloud.flat(), field)
        assert cloud.coords.shape == (128, 2)
        with pytest.raises(OperatorError):
            as_point_cloud(np.ones(5), channels=2)
