import math

import numpy as np
import pytest

from budgetdetect.diffkit import GradTape, init_params
from budgetdetect.envsim import SyntheticSpec, generate_dataset
from budgetdetect.policy import (
    PolicyConfig,
    action_logdensity,
    detect,
    rollout,
    segment_from_center_width,
    trace_lines,
    trajectory_logdensity,
    trajectory_logdensity_grad,
)
from oracles import fd_param_gradient, max_rel_error

SPEC = SyntheticSpec(
    num_videos=6,
    frames_per_video=50,
    feature_dim=6,
    num_classes=2,
    segment_len_min=8,
    segment_len_max=16,
    noise_level=0.4,
)

CONFIG = PolicyConfig(
    num_classes=2,
    feature_dim=6,
    steps=4,
    hidden_size=8,
    num_layers=2,
    neighborhood=7,
)


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(SPEC, 1)


@pytest.fixture
def params():
    return init_params(CONFIG.net_config(), np.random.default_rng(3))


class TestRollout:
    def test_deterministic_rollouts_are_identical(self, dataset, params):
        video, gts = dataset[0]
        a = rollout(params, CONFIG, video, gts)
        b = rollout(params, CONFIG, video, gts)
        assert len(a.steps) == CONFIG.steps
        for sa, sb in zip(a.steps, b.steps):
            assert sa.action == sb.action
            assert sa.reward == sb.reward
        assert [d.segment for d in a.detections] == [d.segment for d in b.detections]

    def test_stochastic_rollout_reproducible_with_seed(self, dataset, params):
        video, gts = dataset[0]
        a = rollout(params, CONFIG, video, gts, np.random.default_rng(9), stochastic=True)
        b = rollout(params, CONFIG, video, gts, np.random.default_rng(9), stochastic=True)
        for sa, sb in zip(a.steps, b.steps):
            assert sa.action == sb.action
            assert sa.log_density == sb.log_density

    def test_stochastic_rollout_requires_rng(self, dataset, params):
        video, gts = dataset[0]
        with pytest.raises(ValueError):
            rollout(params, CONFIG, video, gts, stochastic=True)

    def test_single_step_budget(self, dataset, params):
        video, gts = dataset[0]
        config = PolicyConfig(
            num_classes=2, feature_dim=6, steps=1, hidden_size=8, neighborhood=7
        )
        traj = rollout(params, config, video, gts)
        assert len(traj.steps) == 1
        assert len(traj.detections) <= 1

    def test_sampled_locations_stay_in_unit_interval(self, dataset, params):
        video, gts = dataset[0]
        rng = np.random.default_rng(17)
        for mode in ("hybrid", "pure"):
            config = PolicyConfig(
                num_classes=2, feature_dim=6, steps=6, hidden_size=8,
                neighborhood=7, mode=mode,
            )
            for _ in range(10):
                traj = rollout(params, config, video, gts, rng, stochastic=True)
                for s in traj.steps:
                    assert 0.0 <= s.action.xi <= 1.0
                    assert 0.0 <= s.action.center <= 1.0
                    assert 0.0 <= s.action.width <= 1.0
                    assert video.time_to_frame(s.action.xi) in range(video.num_frames)

    def test_longer_budget_extends_detections_as_prefix(self, dataset, params):
        video, gts = dataset[0]
        short = rollout(params, CONFIG, video, gts)
        longer_cfg = PolicyConfig(
            num_classes=2, feature_dim=6, steps=CONFIG.steps + 1,
            hidden_size=8, num_layers=2, neighborhood=7,
        )
        longer = rollout(params, longer_cfg, video, gts)
        assert len(longer.detections) >= len(short.detections)
        for d_short, d_long in zip(short.detections, longer.detections):
            assert d_short.segment == d_long.segment
            assert np.array_equal(d_short.class_probs, d_long.class_probs)

    def test_no_background_detection_survives(self, dataset, params):
        video, gts = dataset[0]
        rng = np.random.default_rng(5)
        for _ in range(20):
            traj = rollout(params, CONFIG, video, gts, rng, stochastic=True)
            for det in traj.detections:
                assert det.predicted_class != 0

    def test_final_breakdown_matches_reward_telescoping(self, dataset, params):
        video, gts = dataset[0]
        rng = np.random.default_rng(23)
        config = PolicyConfig(
            num_classes=2, feature_dim=6, steps=5, hidden_size=8, neighborhood=7
        )
        traj = rollout(params, config, video, gts, rng, stochastic=True)
        initial = 0.5  # empty set: retrieval term times default lambda
        assert traj.breakdown is not None
        assert sum(traj.rewards) == pytest.approx(
            initial - traj.breakdown.total, abs=1e-9
        )


class TestDetect:
    def test_detect_is_a_pure_function(self, dataset, params):
        video, _ = dataset[0]
        a = detect(params, CONFIG, video)
        b = detect(params, CONFIG, video)
        assert len(a) == len(b)
        for da, db in zip(a, b):
            assert da.segment == db.segment
            assert np.array_equal(da.class_probs, db.class_probs)

    def test_detect_never_returns_background(self, dataset, params):
        for video, _ in dataset:
            for det in detect(params, CONFIG, video):
                assert det.predicted_class != 0

    def test_empty_result_when_every_step_is_background(self, dataset):
        video, _ = dataset[0]
        params = init_params(CONFIG.net_config(), np.random.default_rng(3))
        params.arrays["cls_b"][0] = 50.0  # push every step toward background
        assert detect(params, CONFIG, video) == []


class TestActionLogdensity:
    def test_hybrid_scores_frame_gaussian_plus_class(self, dataset, params):
        video, gts = dataset[0]
        rng = np.random.default_rng(31)
        traj = rollout(params, CONFIG, video, gts, rng, stochastic=True)
        step = traj.steps[0]
        pre = step.observation.xi + 2 * (step.outputs.xi_mean - 0.5)
        move_mean = -pre if pre < 0 else (2 - pre if pre > 1 else pre)
        gauss = -(step.action.xi - move_mean) ** 2 / (
            2 * CONFIG.xi_variance
        ) - 0.5 * math.log(2 * math.pi * CONFIG.xi_variance)
        categorical = math.log(step.outputs.class_probs[step.action.class_index])
        assert step.log_density == pytest.approx(gauss + categorical, abs=1e-10)

    def test_hybrid_density_ignores_location_sample(self, dataset, params):
        video, gts = dataset[0]
        rng = np.random.default_rng(31)
        traj = rollout(params, CONFIG, video, gts, rng, stochastic=True)
        step = traj.steps[0]
        from budgetdetect.policy import StepAction

        modified = StepAction(step.action.xi, 0.123, 0.456, step.action.class_index)
        assert action_logdensity(
            step.outputs, modified, CONFIG, step.observation.xi
        ) == pytest.approx(step.log_density, abs=1e-12)

    def test_emission_follows_the_sampled_class(self, dataset, params):
        video, gts = dataset[0]
        rng = np.random.default_rng(31)
        for _ in range(5):
            traj = rollout(params, CONFIG, video, gts, rng, stochastic=True)
            for s in traj.steps:
                assert s.emitted == (s.action.class_index != 0)
            assert len(traj.detections) == sum(s.emitted for s in traj.steps)

    def test_pure_mode_closed_form(self, dataset, params):
        video, gts = dataset[0]
        config = PolicyConfig(
            num_classes=2, feature_dim=6, steps=3, hidden_size=8,
            neighborhood=7, mode="pure",
        )
        rng = np.random.default_rng(41)
        traj = rollout(params, config, video, gts, rng, stochastic=True)
        for step in traj.steps:
            out, act = step.outputs, step.action

            def normal_logpdf(x, mean, var):
                return -0.5 * math.log(2 * math.pi * var) - (x - mean) ** 2 / (2 * var)

            c_pre = step.observation.xi + out.center - 0.5
            center_mean = -c_pre if c_pre < 0 else (2 - c_pre if c_pre > 1 else c_pre)
            m_pre = step.observation.xi + 2 * (out.xi_mean - 0.5)
            move_mean = -m_pre if m_pre < 0 else (2 - m_pre if m_pre > 1 else m_pre)
            expected = (
                normal_logpdf(act.xi, move_mean, config.xi_variance)
                + normal_logpdf(act.center, center_mean, config.loc_variance)
                + normal_logpdf(act.width, out.width, config.loc_variance)
                + math.log(out.class_probs[act.class_index])
            )
            assert step.log_density == pytest.approx(expected, abs=1e-10)

    def test_density_requires_a_sampled_class(self, dataset, params):
        video, gts = dataset[0]
        traj = rollout(params, CONFIG, video, gts)  # deterministic: no samples
        step = traj.steps[0]
        assert step.action.class_index is None
        with pytest.raises(ValueError):
            action_logdensity(step.outputs, step.action, CONFIG, step.observation.xi)

    def test_deterministic_detections_carry_foreground_distribution(
        self, dataset, params
    ):
        video, gts = dataset[0]
        traj = rollout(params, CONFIG, video, gts)
        for s in traj.steps:
            assert s.detection.class_probs[0] == 0.0
            assert s.detection.class_probs.sum() == pytest.approx(1.0)


class TestFrozenTrajectoryGradient:
    @pytest.mark.parametrize("mode", ["hybrid", "pure"])
    def test_logdensity_gradient_matches_finite_differences(self, dataset, mode):
        video, gts = dataset[0]
        config = PolicyConfig(
            num_classes=2, feature_dim=6, steps=3, hidden_size=4,
            num_layers=2, neighborhood=5, mode=mode,
        )
        rng = np.random.default_rng(8)
        for trial in range(3):
            params = init_params(config.net_config(), np.random.default_rng(100 + trial))
            traj = rollout(params, config, video, gts, rng, stochastic=True)
            coeffs = rng.standard_normal(config.steps)

            tape = GradTape.zeros(params)
            value = trajectory_logdensity_grad(params, config, traj, coeffs, tape)
            assert value == pytest.approx(
                trajectory_logdensity(params, config, traj, coeffs), abs=1e-12
            )
            numeric = fd_param_gradient(
                params.arrays,
                lambda: trajectory_logdensity(params, config, traj, coeffs),
            )
            assert max_rel_error(tape.arrays, numeric) < 1e-4


def test_segment_from_center_width_clamps_and_orders():
    seg = segment_from_center_width(0.1, 0.5)
    assert seg.start == 0.0
    assert seg.end == pytest.approx(0.35)
    seg = segment_from_center_width(0.95, 0.3)
    assert seg.end == 1.0
    assert seg.start <= seg.end


def test_trace_lines_cover_every_step(dataset=None):
    data = generate_dataset(SPEC, 1)
    video, gts = data[0]
    params = init_params(CONFIG.net_config(), np.random.default_rng(3))
    traj = rollout(params, CONFIG, video, gts)
    lines = trace_lines(traj, video)
    assert len(lines) == CONFIG.steps + 1  # one per step plus the summary
    assert "loss total" in lines[-1]
    for i, line in enumerate(lines[:-1], start=1):
        assert line.startswith(f"step {i}:")
        assert "reward" in line
