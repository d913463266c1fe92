"""
Tests for the coarse-to-fine driver: per-scale sampling, schedules,
warm-start policies, pretraining and the run manifest.

End-to-end accuracy runs are marked ``slow``.
"""

from fractions import Fraction

import numpy as np
import pytest

from registration.errors import ContractError, DivergenceError, InvalidShapeError
from registration.io_viz import read_checkpoint, read_metadata
from registration.losses import LossConfig
from registration.pipeline import (
    ImageSequence, Init, RegistrationSettings, ScaleSchedule, Variant, WarmStart,
    _initial_params, checkpoint_name, pretrain, run_nmsr, run_scale, scale_sample,
    write_run_manifest,
)
from registration.metrics import evaluate_sequence
from registration.synth import (
    FlowSpec, annulus_mask, circulation_for_max_speed, cosine_similarity, epe_oracle, generate, interior_mask,
)
from registration.unet import ArchDescriptor, init
from registration.warp_field import FlowField, Image, downsample
from utils.config_utils import ConfigurationError, load_config
from utils.data_utils import summarize_loss_curve


@pytest.fixture
def settings(tiny_arch):
    return RegistrationSettings(loss=LossConfig(ncc_radius=2), arch=tiny_arch, seed=0, log_every=0)


@pytest.fixture
def sequence(speckle):
    shifted = Image(np.roll(speckle.pixels, 1, axis=1))
    return ImageSequence([speckle, shifted, speckle], sequence_id="toy")


class TestImageSequence:

    def test_needs_two_frames(self, speckle):
        with pytest.raises(ContractError):
            ImageSequence([speckle])

    def test_frames_share_dimensions(self, speckle):
        with pytest.raises(InvalidShapeError, match="Frame 2"):
            ImageSequence([speckle, Image(np.zeros((16, 16)))])

    def test_mask_count(self, speckle):
        with pytest.raises(InvalidShapeError):
            ImageSequence([speckle, speckle], masks=[np.ones(speckle.shape)])

    def test_fixed_mask_is_next_frame(self, speckle):
        masks = [np.zeros(speckle.shape, dtype=bool), np.ones(speckle.shape, dtype=bool)]
        seq = ImageSequence([speckle, speckle], masks=masks)
        assert seq.fixed_mask(0).all()
        assert seq.n_pairs == 1

    def test_padding_masks_original_region(self, rng):
        frames = [Image(rng.uniform(size=(30, 27))) for _ in range(2)]
        padded = ImageSequence(frames).padded(8)
        assert padded.shape == (32, 32)
        assert padded.masks[1].sum() == 30 * 27
        assert padded.masks[1][:30, :27].all()

    def test_aligned_sequence_is_not_padded(self, sequence):
        assert sequence.padded(8) is sequence


class TestScaleSchedule:

    def test_defaults(self):
        sched = ScaleSchedule()
        assert sched.labels() == ["1/8", "1/4", "1/2", "1"]
        assert sched.steps == 3500
        assert sched.coarsest == Fraction(1, 8)

    def test_accepts_strings(self):
        sched = ScaleSchedule(scales=("1/4", "1"), steps=3, warm_start="from_previous_scale")
        assert sched.scales == (Fraction(1, 4), Fraction(1))
        assert sched.warm_start is WarmStart.FROM_PREVIOUS_SCALE

    @pytest.mark.parametrize("scales", [("1/2", "1/4", "1"), ("1/4", "1/2"), ()])
    def test_rejects_bad_ladders(self, scales):
        with pytest.raises(ContractError):
            ScaleSchedule(scales=scales)

    def test_rejects_zero_steps(self):
        with pytest.raises(ContractError):
            ScaleSchedule(steps=0)


class TestSettings:

    def test_from_testing_profile(self):
        settings = RegistrationSettings.from_config(load_config("testing"))
        assert settings.arch == ArchDescriptor((4, 4), (4, 4))
        assert settings.loss.ncc_radius == 2
        assert settings.learning_rate == 1e-3

    def test_from_prod_profile(self):
        settings = RegistrationSettings.from_config(load_config("prod"))
        assert settings.arch == ArchDescriptor()
        assert settings.loss == LossConfig(ncc_radius=6, smoothness_weight=10.0, epsilon=1e-5, reduction="mean")


class TestScaleSample:

    def test_coarsest_uses_plain_downsampling(self, sequence):
        zero = FlowField.zeros(*sequence.shape)
        sample = scale_sample(sequence, zero, 0, Fraction(1, 2))
        np.testing.assert_array_equal(sample.moving.pixels, downsample(sequence.frames[0], "1/2").pixels)
        np.testing.assert_array_equal(sample.fixed.pixels, downsample(sequence.frames[1], "1/2").pixels)
        assert sample.mask is None

    def test_warps_before_downsampling(self, sequence):
        shift = FlowField(np.broadcast_to([-1.0, 0.0], sequence.shape + (2,)).copy())
        sample = scale_sample(sequence, shift, 0, 1)
        # frame 1 sampled one pixel to the left reproduces the rolled frame away from the border
        np.testing.assert_allclose(sample.moving.pixels[:, 1:], sequence.frames[1].pixels[:, 1:], atol=1e-12)


class TestRunScale:

    def test_outcome_shapes(self, sequence, settings):
        accumulated = [FlowField.zeros(*sequence.shape) for _ in range(sequence.n_pairs)]
        params = init(settings.arch, 0)
        outcome = run_scale(sequence, accumulated, "1/2", params, ScaleSchedule(steps=3), settings)
        assert len(outcome.fields) == 2
        assert outcome.fields[0].shape == (16, 16)
        assert outcome.fields[0].scale == Fraction(1, 2)
        assert list(outcome.loss_curve.columns) == ["step", "pair_index", "loss", "ncc", "smooth"]
        assert outcome.loss_curve["step"].tolist() == [1, 2, 3]
        assert outcome.loss_curve["pair_index"].tolist() == [1, 2, 1]
        assert outcome.params is params

    def test_accumulated_count_checked(self, sequence, settings):
        with pytest.raises(ContractError):
            run_scale(sequence, [FlowField.zeros(*sequence.shape)], 1, init(settings.arch, 0),
                      ScaleSchedule(steps=1), settings)

    def test_non_finite_loss_diverges(self, settings, speckle):
        broken = speckle.pixels.copy()
        broken[3, 3] = np.nan
        seq = ImageSequence([Image(broken), speckle])
        with pytest.raises(DivergenceError) as info:
            run_scale(seq, [FlowField.zeros(*seq.shape)], 1, init(settings.arch, 0), ScaleSchedule(steps=2), settings)
        assert info.value.step == 1
        assert info.value.scale == "1"

    def test_non_finite_field_diverges(self, sequence, settings):
        params = init(settings.arch, 0)
        params.layer("flow").bias.data = np.full(2, np.nan)
        accumulated = [FlowField.zeros(*sequence.shape) for _ in range(sequence.n_pairs)]
        with pytest.raises(DivergenceError) as info:
            run_scale(sequence, accumulated, "1/2", params, ScaleSchedule(steps=2), settings)
        assert info.value.step == 1
        assert info.value.scale == "1/2"
        assert np.isnan(info.value.value)

    def test_unpadded_sequence_is_rejected(self, rng, settings):
        frames = [Image(rng.uniform(size=(20, 20))) for _ in range(2)]
        seq = ImageSequence(frames)
        with pytest.raises(InvalidShapeError, match="ImageSequence.padded"):
            run_scale(seq, [FlowField.zeros(20, 20)], "1/2", init(settings.arch, 0), ScaleSchedule(steps=1), settings)
        padded = seq.padded(8)
        outcome = run_scale(padded, [FlowField.zeros(*padded.shape)], "1/2", init(settings.arch, 0),
                            ScaleSchedule(steps=1), settings)
        assert outcome.fields[0].shape == (12, 12)


class TestRunNmsr:

    def test_multi_scale_result(self, sequence, settings):
        result = run_nmsr(sequence, ScaleSchedule(scales=("1/2", "1"), steps=2), settings=settings)
        assert result.sequence_id == "toy"
        assert len(result.fields) == 2
        assert all(f.shape == sequence.shape for f in result.fields)
        assert list(result.loss_curves) == ["1/2", "1"]
        assert list(result.scale_fields) == ["1/2", "1"]
        assert result.config["scales"] == "1/2,1"
        assert result.config["lambda"] == 10.0
        assert set(result.final_losses()) == {"1/2", "1"}

    def test_final_fields_are_last_scale_fields(self, sequence, settings):
        result = run_nmsr(sequence, ScaleSchedule(scales=("1/2", "1"), steps=2), settings=settings)
        for final, last in zip(result.fields, result.scale_fields["1"]):
            np.testing.assert_array_equal(final.vectors, last.vectors)

    def test_single_scale_ignores_ladder(self, sequence, settings):
        result = run_nmsr(sequence, ScaleSchedule(steps=2), Variant.SINGLE_SCALE, settings=settings)
        assert list(result.loss_curves) == ["1"]
        assert result.config["variant"] == "single_scale"

    def test_reruns_are_bit_identical(self, sequence, settings):
        sched = ScaleSchedule(scales=("1/2", "1"), steps=3)
        first = run_nmsr(sequence, sched, settings=settings)
        second = run_nmsr(sequence, sched, settings=settings)
        for a, b in zip(first.fields, second.fields):
            np.testing.assert_array_equal(a.vectors, b.vectors)

    def test_odd_sizes_are_padded_and_cropped(self, rng, settings):
        frames = [Image(rng.uniform(size=(20, 18))) for _ in range(3)]
        result = run_nmsr(ImageSequence(frames), ScaleSchedule(scales=("1/2", "1"), steps=1), settings=settings)
        assert all(f.shape == (20, 18) for f in result.fields)
        assert result.config["height"] == 20

    def test_checkpoint_init_requires_checkpoints(self, sequence, settings):
        with pytest.raises(ConfigurationError):
            run_nmsr(sequence, ScaleSchedule(scales=("1/2", "1"), steps=1), init_mode=Init.CHECKPOINT,
                     settings=settings)

    def test_checkpoint_architecture_must_match(self, sequence, settings):
        other = init(ArchDescriptor((2, 2), (2, 2)), 0)
        with pytest.raises(ConfigurationError):
            run_nmsr(sequence, ScaleSchedule(scales=("1",), steps=1), init_mode=Init.CHECKPOINT,
                     settings=settings, checkpoints={Fraction(1): other})


class TestInitialParams:

    def test_fresh_scales_use_offset_seeds(self, settings):
        params = _initial_params(2, Fraction(1, 2), WarmStart.NONE, None, None, settings)
        expected = init(settings.arch, settings.seed + 2)
        for a, b in zip(params.arrays(), expected.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_previous_scale_is_copied(self, settings):
        previous = init(settings.arch, 9)
        params = _initial_params(1, Fraction(1), WarmStart.FROM_PREVIOUS_SCALE, previous, None, settings)
        assert params is not previous
        for a, b in zip(params.arrays(), previous.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_checkpoint_keys_may_be_labels(self, settings):
        loaded = init(settings.arch, 5)
        params = _initial_params(0, Fraction(1, 2), WarmStart.FROM_CHECKPOINT, None, {"1/2": loaded}, settings)
        np.testing.assert_array_equal(params.arrays()[0], loaded.arrays()[0])

    def test_missing_scale_checkpoint(self, settings):
        with pytest.raises(ConfigurationError, match="1/4"):
            _initial_params(0, Fraction(1, 4), WarmStart.FROM_CHECKPOINT, None,
                            {"1/2": init(settings.arch, 0)}, settings)


class TestPretrain:

    def test_copies_match_single_sequence_run(self, sequence, settings, tmp_path):
        sched = ScaleSchedule(scales=("1/2", "1"), steps=4)
        copies = [ImageSequence(list(sequence.frames), sequence_id=f"copy{i}") for i in range(2)]
        pretrained = pretrain(copies, sched, 4, settings, output_dir=str(tmp_path))
        single = run_nmsr(sequence, sched, settings=settings)
        for label in ("1/2", "1"):
            for a, b in zip(pretrained[label].arrays(), single.params_by_scale[label].arrays()):
                np.testing.assert_array_equal(a, b)

    def test_checkpoints_round_trip(self, sequence, settings, tmp_path):
        sched = ScaleSchedule(scales=("1/2", "1"), steps=2)
        pretrained = pretrain([sequence], sched, 2, settings, output_dir=str(tmp_path))
        for label, scale in (("1/2", Fraction(1, 2)), ("1", Fraction(1))):
            loaded = read_checkpoint(tmp_path / checkpoint_name(scale), expected_arch=settings.arch)
            for a, b in zip(loaded.arrays(), pretrained[label].arrays()):
                np.testing.assert_array_equal(a, b)

    def test_checkpoint_warm_start_run(self, sequence, settings, tmp_path):
        sched = ScaleSchedule(scales=("1/2", "1"), steps=2)
        pretrained = pretrain([sequence], sched, 2, settings)
        result = run_nmsr(sequence, sched, init_mode=Init.CHECKPOINT, settings=settings, checkpoints=pretrained)
        assert result.config["warm_start"] == "from_checkpoint"
        assert len(result.fields) == sequence.n_pairs

    def test_rejects_empty_train_set(self, settings):
        with pytest.raises(ConfigurationError):
            pretrain([], ScaleSchedule(steps=1), 1, settings)

    def test_rejects_mixed_dimensions(self, sequence, settings, rng):
        other = ImageSequence([Image(rng.uniform(size=(16, 16))) for _ in range(2)])
        with pytest.raises(ConfigurationError):
            pretrain([sequence, other], ScaleSchedule(scales=("1",), steps=1), 1, settings)


class TestManifest:

    def test_manifest_contents(self, sequence, settings, tmp_path):
        result = run_nmsr(sequence, ScaleSchedule(scales=("1/2", "1"), steps=2), settings=settings)
        path = tmp_path / "manifest.txt"
        write_run_manifest(str(path), result, {"arg.steps": 2})
        values = read_metadata(path)
        assert values["scales"] == "1/2,1"
        assert values["ncc_radius"] == "2"
        assert values["lambda"] == "10.0"
        assert values["ncc_reduction"] == "sum"
        assert values["learning_rate"] == "0.001"
        assert "seconds_1-2" in values and "seconds_1-1" in values
        assert "final_loss_1-1" in values
        assert values["arg.steps"] == "2"

def assert_reconstruction_improves(synthetic, fields):
    pairs = evaluate_sequence(synthetic.sequence.frames, fields, synthetic.sequence.masks).pairs
    assert (pairs["mean_cc"] >= pairs["baseline_mean_cc"]).all(), pairs.to_string()


@pytest.mark.slow
class TestAccuracy:

    def test_static_sequence_stays_still(self):
        synthetic = generate(FlowSpec(kind="translation", frames=8, height=64, width=64, noise_sigma=0.0, seed=3))
        result = run_nmsr(synthetic.sequence, ScaleSchedule(steps=200), Variant.SINGLE_SCALE)
        mean_magnitude = np.mean([f.magnitude().mean() for f in result.fields])
        assert mean_magnitude < 0.05

    def test_single_scale_recovers_translation(self):
        synthetic = generate(FlowSpec(kind="translation", frames=2, height=64, width=64,
                                      u=2.5, v=-1.5, noise_sigma=0.02, seed=5))
        result = run_nmsr(synthetic.sequence, ScaleSchedule(steps=3500), Variant.SINGLE_SCALE)
        epe, _ = epe_oracle(result.fields[0], synthetic.truth[0], interior_mask(64, 64, 8))
        assert epe < 0.3
        assert result.scale_seconds["1"] < 600
        assert_reconstruction_improves(synthetic, result.fields)

    def test_multi_scale_beats_single_scale_on_large_translation(self):
        steps = 150
        mask = interior_mask(128, 128, 16)
        wins = 0
        for seed in range(5):
            synthetic = generate(FlowSpec(kind="translation", frames=2, height=128, width=128,
                                          u=12.0, v=0.0, seed=seed))
            multi = run_nmsr(synthetic.sequence, ScaleSchedule(steps=steps), Variant.MULTI_SCALE)
            single = run_nmsr(synthetic.sequence, ScaleSchedule(steps=4 * steps), Variant.SINGLE_SCALE)
            multi_epe, _ = epe_oracle(multi.fields[0], synthetic.truth[0], mask)
            single_epe, _ = epe_oracle(single.fields[0], synthetic.truth[0], mask)
            wins += multi_epe <= 0.5 * single_epe
            assert_reconstruction_improves(synthetic, multi.fields)
        assert wins >= 4

    def test_previous_scale_warm_start_lowers_final_loss(self):
        scales = ("1/4", "1/2", "1")
        wins = 0
        for seed in range(5):
            synthetic = generate(FlowSpec(kind="lamb_oseen", frames=3, height=64, width=64, core_radius=12.0,
                                          circulation=circulation_for_max_speed(3.0, 12.0), seed=seed))
            final = {}
            for policy in (WarmStart.NONE, WarmStart.FROM_PREVIOUS_SCALE):
                result = run_nmsr(synthetic.sequence, ScaleSchedule(scales, 200, policy))
                final[policy] = summarize_loss_curve(result.loss_curves["1"], window=20)["last_mean"]
            wins += final[WarmStart.FROM_PREVIOUS_SCALE] <= final[WarmStart.NONE]
        assert wins >= 4

    def test_vortex_direction_is_recovered(self):
        core = 20.0
        synthetic = generate(FlowSpec(kind="lamb_oseen", frames=2, height=128, width=128, core_radius=core,
                                      circulation=circulation_for_max_speed(6.0, core), seed=7))
        result = run_nmsr(synthetic.sequence, ScaleSchedule(steps=300, warm_start=WarmStart.FROM_PREVIOUS_SCALE))
        ring = annulus_mask(128, 128, (63.5, 63.5), 0.5 * core, 2.0 * core)
        assert cosine_similarity(result.fields[0], synthetic.truth[0], ring) > 0.8
        assert_reconstruction_improves(synthetic, result.fields)

    def test_pretrained_init_reaches_fresh_loss_in_half_the_steps(self):
        family = dict(kind="translation", frames=3, height=64, width=64, u=1.5, v=1.0)
        train_set = [generate(FlowSpec(seed=seed, **family)).sequence for seed in range(4)]
        held_out = generate(FlowSpec(seed=99, **family)).sequence
        pretrained = pretrain(train_set, ScaleSchedule(scales=("1",), steps=1), 800)

        fresh = run_nmsr(held_out, ScaleSchedule(scales=("1",), steps=400), Variant.SINGLE_SCALE)
        target = summarize_loss_curve(fresh.loss_curves["1"], window=20)["last_mean"]
        warm = run_nmsr(held_out, ScaleSchedule(scales=("1",), steps=200), Variant.SINGLE_SCALE,
                        Init.CHECKPOINT, checkpoints=pretrained)
        assert (warm.loss_curves["1"]["loss"].rolling(20).mean() <= target).any()

    def test_loss_trends_down(self):
        synthetic = generate(FlowSpec(kind="lamb_oseen", frames=3, height=64, width=64,
                                      circulation=60.0, core_radius=12.0, seed=2))
        result = run_nmsr(synthetic.sequence, ScaleSchedule(steps=600), Variant.SINGLE_SCALE)
        curve = result.loss_curves["1"]["loss"]
        assert curve.iloc[-100:].mean() < curve.iloc[:100].mean()
