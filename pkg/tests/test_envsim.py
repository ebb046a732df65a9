import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from budgetdetect.envsim import (
    EpisodeState,
    FeatureVideo,
    SyntheticSpec,
    class_prototypes,
    discounted_return,
    discounted_returns,
    generate_dataset,
    init_episode,
    load_dataset,
    observe,
    save_dataset,
    step_env,
)
from budgetdetect.losses import LossWeights, total_loss
from budgetdetect.segmetrics import iou
from conftest import class_detection, make_gts


SPEC = SyntheticSpec(
    num_videos=12,
    frames_per_video=60,
    feature_dim=8,
    num_classes=3,
    segment_len_min=6,
    segment_len_max=14,
    noise_level=0.4,
)


class TestGenerator:
    def test_deterministic_for_seed(self):
        a = generate_dataset(SPEC, 5)
        b = generate_dataset(SPEC, 5)
        for (va, ga), (vb, gb) in zip(a, b):
            assert va.id == vb.id
            assert np.array_equal(va.frames, vb.frames)
            assert ga == gb

    def test_different_seeds_differ(self):
        a = generate_dataset(SPEC, 5)
        b = generate_dataset(SPEC, 6)
        assert not np.array_equal(a[0][0].frames, b[0][0].frames)

    def test_noise_free_frames_equal_prototypes(self):
        spec = SyntheticSpec(
            num_videos=4,
            frames_per_video=40,
            feature_dim=6,
            num_classes=2,
            segment_len_min=5,
            segment_len_max=10,
            noise_level=0.0,
        )
        protos = class_prototypes(spec)
        for video, gts in generate_dataset(spec, 3):
            n = video.num_frames
            for g in gts:
                first = round(g.segment.start * (n - 1))
                last = round(g.segment.end * (n - 1))
                for i in range(first, last + 1):
                    np.testing.assert_array_equal(video.frames[i], protos[g.label])
            # a frame outside every segment carries the background prototype
            inside = set()
            for g in gts:
                first = round(g.segment.start * (n - 1))
                last = round(g.segment.end * (n - 1))
                inside.update(range(first, last + 1))
            outside = sorted(set(range(n)) - inside)
            assert outside
            np.testing.assert_array_equal(video.frames[outside[0]], protos[0])

    def test_planted_segments_never_overlap(self):
        for video, gts in generate_dataset(SPEC, 11):
            items = gts.items
            for i in range(len(items)):
                for j in range(i + 1, len(items)):
                    assert iou(items[i].segment, items[j].segment) == 0.0

    def test_impossible_fit_raises(self):
        spec = SyntheticSpec(
            num_videos=1,
            frames_per_video=10,
            feature_dim=4,
            segments_min=3,
            segments_max=3,
            segment_len_min=5,
            segment_len_max=5,
        )
        with pytest.raises(ValueError):
            generate_dataset(spec, 0)

    def test_diff_channel_is_consecutive_difference(self):
        spec = SyntheticSpec(
            num_videos=2, frames_per_video=20, feature_dim=4, with_diff=True,
            segment_len_min=4, segment_len_max=6,
        )
        for video, _ in generate_dataset(spec, 9):
            assert video.diff is not None
            np.testing.assert_array_equal(video.diff[0], np.zeros(4))
            np.testing.assert_allclose(
                video.diff[1:], video.frames[1:] - video.frames[:-1], atol=1e-15
            )


class TestObserve:
    def setup_method(self):
        self.video, self.gts = generate_dataset(SPEC, 2)[0]

    def test_first_observation_has_single_center_indicator(self):
        state = init_episode(self.video, self.gts)
        obs = observe(self.video, state, 15, num_labels=4)
        assert obs.psi.shape == (15,)
        assert obs.psi.sum() == 1.0
        assert obs.psi[7] == 1.0  # the current frame sits at the window center
        np.testing.assert_array_equal(obs.phi, np.zeros(4))
        assert obs.xi == pytest.approx(
            state.current_frame / (self.video.num_frames - 1)
        )

    def test_full_video_detection_dominates_phi(self):
        state = init_episode(self.video, self.gts)
        det = class_detection(0.0, 1.0, 2, 4, confidence=0.7)
        state.detections.append(det)
        obs = observe(self.video, state, 15, num_labels=4)
        np.testing.assert_allclose(obs.phi, det.class_probs, atol=1e-12)

    def test_two_overlapping_detections_average(self):
        state = init_episode(self.video, self.gts)
        d1 = class_detection(0.0, 1.0, 1, 4, confidence=0.9)
        d2 = class_detection(0.0, 1.0, 3, 4, confidence=0.6)
        state.detections.extend([d1, d2])
        obs = observe(self.video, state, 15, num_labels=4)
        np.testing.assert_allclose(
            obs.phi, 0.5 * (d1.class_probs + d2.class_probs), atol=1e-12
        )

    def test_detection_outside_neighborhood_ignored(self):
        state = init_episode(self.video, self.gts)
        state.current_frame = 30  # mid-video, far from the detection
        state.detections.append(class_detection(0.0, 0.05, 1, 4))
        obs = observe(self.video, state, 7, num_labels=4)
        np.testing.assert_array_equal(obs.phi, np.zeros(4))

    def test_neighborhood_clamps_at_video_edges(self):
        state = init_episode(self.video, self.gts)
        state.current_frame = 0
        state.selected_mask[:] = True
        obs = observe(self.video, state, 15, num_labels=4)
        # positions before frame 0 stay zero even with everything selected
        np.testing.assert_array_equal(obs.psi[:7], np.zeros(7))
        np.testing.assert_array_equal(obs.psi[7:], np.ones(8))
        np.testing.assert_allclose(
            obs.features, self.video.frames[:8].mean(axis=0), atol=1e-12
        )

    def test_pooled_features_are_window_mean(self):
        state = init_episode(self.video, self.gts)
        state.current_frame = 30
        state.selected_mask[30] = True
        obs = observe(self.video, state, 5, num_labels=4)
        np.testing.assert_allclose(
            obs.features, self.video.frames[28:33].mean(axis=0), atol=1e-12
        )

    def test_vector_layout(self):
        state = init_episode(self.video, self.gts)
        obs = observe(self.video, state, 9, num_labels=4)
        vec = obs.vector()
        assert vec.shape == (9 + 4 + 1 + 8,)
        assert vec[9 + 4] == obs.xi

    def test_diff_channel_requires_diff_video(self):
        state = init_episode(self.video, self.gts)
        with pytest.raises(ValueError):
            observe(self.video, state, 9, num_labels=4, use_diff=True)


class TestStepEnv:
    def setup_method(self):
        self.video, _ = generate_dataset(SPEC, 2)[0]
        self.gts = make_gts((0.2, 0.4, 1))
        self.weights = LossWeights()

    def test_background_prediction_is_a_no_op(self):
        state = init_episode(self.video, self.gts, self.weights, 0.5)
        det = class_detection(0.1, 0.3, 0, 4)
        new_state, reward = step_env(
            self.video, self.gts, state, det, 0.9, self.weights, 0.5
        )
        assert reward == 0.0
        assert new_state.detections == []
        assert new_state.step == 1
        assert new_state.current_frame == self.video.time_to_frame(0.9)
        assert new_state.selected_mask[new_state.current_frame]

    def test_perfect_first_prediction_earns_retrieval_weight(self):
        state = init_episode(self.video, self.gts, self.weights, 0.5)
        det = class_detection(0.2, 0.4, 1, 4, confidence=1.0 - 1e-12)
        _, reward = step_env(self.video, self.gts, state, det, 0.5, self.weights, 0.5)
        assert reward == pytest.approx(0.5, abs=1e-9)

    def test_worsening_prediction_pays_a_penalty(self):
        state = init_episode(self.video, self.gts, self.weights, 0.5)
        good = class_detection(0.2, 0.4, 1, 4, confidence=0.99)
        state, r1 = step_env(self.video, self.gts, state, good, 0.5, self.weights, 0.5)
        assert r1 > 0
        # duplicate with a confidently wrong class raises the loss
        bad = class_detection(0.21, 0.39, 2, 4, confidence=0.98, step=2)
        _, r2 = step_env(self.video, self.gts, state, bad, 0.5, self.weights, 0.5)
        assert r2 < 0

    def test_prev_loss_tracks_detection_set(self):
        state = init_episode(self.video, self.gts, self.weights, 0.5)
        det = class_detection(0.25, 0.45, 1, 4, confidence=0.8)
        state, _ = step_env(self.video, self.gts, state, det, 0.1, self.weights, 0.5)
        recomputed = total_loss(state.detections, self.gts, self.weights, 0.5).total
        assert state.prev_loss == recomputed

    def test_inference_mode_keeps_detections_without_rewards(self):
        state = init_episode(self.video, None)
        det = class_detection(0.2, 0.4, 2, 4)
        state, reward = step_env(self.video, None, state, det, 0.7)
        assert reward == 0.0
        assert len(state.detections) == 1


class TestReturns:
    def test_all_zero_rewards(self):
        assert discounted_return([0.0, 0.0, 0.0], 0.5) == 0.0

    def test_geometric_sum(self):
        assert discounted_return([1.0, 1.0, 1.0], 0.5) == pytest.approx(1.75)

    def test_tau_one_is_plain_sum(self):
        rewards = [0.3, -0.2, 0.5, 0.1]
        assert discounted_return(rewards, 1.0) == pytest.approx(sum(rewards))

    def test_per_step_vector_matches_suffix_scalars(self, rng):
        rewards = list(rng.standard_normal(6))
        vec = discounted_returns(rewards, 0.9)
        for t in range(6):
            assert vec[t] == pytest.approx(discounted_return(rewards, 0.9, start=t))

    def test_invalid_discount_rejected(self):
        with pytest.raises(ValueError):
            discounted_return([1.0], 0.0)
        with pytest.raises(ValueError):
            discounted_returns([1.0], 1.5)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_telescoping_identity_at_tau_one(self, seed):
        rng = np.random.default_rng(seed)
        video, gts = generate_dataset(SPEC, int(rng.integers(1000)))[0]
        weights = LossWeights()
        state = init_episode(video, gts, weights, 0.5)
        initial = state.prev_loss
        rewards = []
        for step in range(1, 6):
            lo, hi = np.sort(rng.uniform(0, 1, size=2))
            det = class_detection(
                float(lo), float(hi), int(rng.integers(0, 4)), 4,
                confidence=float(rng.uniform(0.3, 0.95)), step=step,
            )
            state, r = step_env(video, gts, state, det, float(rng.uniform()), weights, 0.5)
            rewards.append(r)
        final = total_loss(state.detections, gts, weights, 0.5).total
        assert sum(rewards) == pytest.approx(initial - final, abs=1e-9)


class TestDatasetIO:
    def test_round_trip_preserves_everything(self, tmp_path):
        spec = SyntheticSpec(
            num_videos=3, frames_per_video=25, feature_dim=5, with_diff=True,
            segment_len_min=4, segment_len_max=7,
        )
        dataset = generate_dataset(spec, 21)
        path = tmp_path / "data.txt"
        save_dataset(str(path), dataset)
        loaded = load_dataset(str(path))
        assert len(loaded) == len(dataset)
        for (v1, g1), (v2, g2) in zip(dataset, loaded):
            assert v1.id == v2.id
            assert np.array_equal(v1.frames, v2.frames)
            assert np.array_equal(v1.diff, v2.diff)
            assert g1 == g2

    def test_writes_are_byte_identical(self, tmp_path):
        dataset = generate_dataset(SPEC, 7)
        p1, p2 = tmp_path / "a.txt", tmp_path / "b.txt"
        save_dataset(str(p1), dataset)
        save_dataset(str(p2), generate_dataset(SPEC, 7))
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_non_dataset_files(self, tmp_path):
        path = tmp_path / "junk.txt"
        path.write_text("not a dataset\n")
        with pytest.raises(ValueError):
            load_dataset(str(path))


def test_frame_time_and_index_round_trip():
    video = FeatureVideo("v", np.zeros((50, 3)))
    for i in (0, 10, 49):
        assert video.time_to_frame(video.frame_time(i)) == i
    assert video.time_to_frame(-0.5) == 0
    assert video.time_to_frame(2.0) == 49
