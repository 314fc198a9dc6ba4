import pytest

from ffpf.gradcheck import (
    ACTIVATION_THRESHOLD,
    BACKBONE_FLOOR,
    BACKBONE_PARTS,
    OP_FLOOR,
    OP_POINTS,
    PART_DIRECTIONS,
    THRESHOLD,
    GradCase,
    default_cases,
    grad_check_suite,
    run_case,
)
from ffpf.models import ModelConfig
from ffpf.tensor import Tensor, relu, tensor_sum

OPS = [
    "relu",
    "sigmoid",
    "add",
    "mul",
    "mul_broadcast",
    "scale",
    "global_avg_pool",
    "concat_channels",
    "split_channels",
    "conv2d",
    "batch_norm_train",
    "batch_norm_eval",
    "upsample_nearest2x",
    "pixel_shuffle",
    "softmax_channels",
    "carafe_reassemble",
    "rfft2",
    "irfft2",
]
PARTS = [
    "fourier_unit",
    "residual_block",
    "channel_attention",
    "backbone_fu_off",
    "backbone_fu_on",
    "bs_fpn",
    "plain_fpn",
    "head",
]


class TestCases:
    def test_every_op_and_part_is_covered(self):
        names = [c.name for c in default_cases(ModelConfig.tiny())]
        assert names == OPS + PARTS + ["end_to_end_loss"]

    def test_activation_thresholds(self):
        cases = {c.name: c for c in default_cases(ModelConfig.tiny())}
        assert cases["relu"].threshold == ACTIVATION_THRESHOLD == 1e-6
        assert cases["sigmoid"].threshold == ACTIVATION_THRESHOLD
        assert cases["conv2d"].threshold == THRESHOLD == 1e-5

    def test_ops_run_at_ten_points(self):
        cases = {c.name: c for c in default_cases(ModelConfig.tiny())}
        assert OP_POINTS == 10
        assert all(cases[name].points == OP_POINTS for name in OPS)

    def test_parts_use_the_op_floor(self):
        cases = {c.name: c for c in default_cases(ModelConfig.tiny())}
        for name in PARTS + ["end_to_end_loss"]:
            if name in BACKBONE_PARTS:
                assert cases[name].floor == BACKBONE_FLOOR
                assert cases[name].directions == 2
            else:
                assert cases[name].floor == OP_FLOOR == 1e-6
                assert cases[name].directions == PART_DIRECTIONS == 4
        assert "residual_block" not in BACKBONE_PARTS
        assert "head" not in BACKBONE_PARTS

    def test_failing_case_is_reported(self):
        def wrong(rng):
            x = Tensor(rng.uniform(0.5, 1.0, (1, 1, 2, 2)), requires_grad=True, name="x")
            # the loss silently drops the tape, so the analytic gradient is zero
            return (lambda: tensor_sum(Tensor(relu(x).data * 2.0))), [x]

        entry = run_case(GradCase("broken", wrong))
        assert not entry.passed
        assert entry.location is not None

    def test_worst_point_is_reported(self):
        def wrong_at_some_points(rng):
            x = Tensor(rng.uniform(0.5, 1.0, (1, 1, 2, 2)), requires_grad=True, name="x")
            broken = rng.uniform() > 0.5

            def loss():
                y = relu(x)
                return tensor_sum(Tensor(y.data * 2.0) if broken else y)

            return loss, [x]

        single = run_case(GradCase("sometimes", wrong_at_some_points, points=1), seed=0)
        many = run_case(GradCase("sometimes", wrong_at_some_points, points=20), seed=0)
        assert many.max_rel_error >= single.max_rel_error
        assert not many.passed
        assert many.location.startswith("point ")


class TestSuite:
    def test_ops(self):
        report = grad_check_suite(ModelConfig.tiny(), only=OPS)
        failures = [(e.name, e.max_rel_error, e.location) for e in report.entries if not e.passed]
        assert failures == []
        assert len(report.entries) == len(OPS)

    def test_activations_below_1e6(self):
        report = grad_check_suite(ModelConfig.tiny(), only=["relu", "sigmoid"])
        assert all(e.max_rel_error < 1e-6 for e in report.entries)

    @pytest.mark.parametrize("part", PARTS)
    def test_model_parts(self, part):
        report = grad_check_suite(ModelConfig.tiny(), only=[part])
        entry = report.entries[0]
        assert entry.passed, (entry.max_rel_error, entry.location)

    @pytest.mark.slow
    def test_full_suite(self):
        report = grad_check_suite(ModelConfig.tiny())
        assert report.passed, [e for e in report.entries if not e.passed]
