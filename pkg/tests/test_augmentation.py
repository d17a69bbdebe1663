import numpy as np
import pytest

from augcrf.augmentation import (AugmentOptions, augment_action, augment_dataset,
                                 build_index, nearest_training_action, recommend)
from augcrf.data import ActionSequence
from augcrf.features import SyntheticSpec, generate_synthetic_dataset
from oracles import scan_nearest


def make_actions(rng, n=10, T=4, d=5, labels=None):
    return [ActionSequence(id=f"a{i}", segments=rng.normal(size=(T, d)),
                           label=None if labels is None else labels[i])
            for i in range(n)]


class TestBuildIndex:
    def test_empty_training_set_raises(self):
        with pytest.raises(ValueError):
            build_index([])

    def test_singleton_always_wins(self, rng):
        actions = make_actions(rng, n=1)
        index = build_index(actions)
        for j in range(4):
            assert nearest_training_action(index, rng.normal(size=5), j) == "a0"

    def test_self_match_at_distance_zero(self, rng):
        actions = make_actions(rng, n=5)
        index = build_index(actions)
        for a in actions:
            for j in range(4):
                aid, row, dist = index.query(a.segments[j], j)
                assert aid == a.id
                assert dist == 0.0

    def test_agrees_with_exhaustive_scan(self, rng):
        actions = make_actions(rng, n=10)
        index = build_index(actions)
        for _ in range(50):
            j = int(rng.integers(0, 4))
            q = rng.normal(size=5)
            aid, row, dist = index.query(q, j)
            exp_row, exp_dist = scan_nearest(index.vectors[:, j, :], q)
            assert row == exp_row
            assert dist == pytest.approx(exp_dist, rel=1e-12)

    def test_duplicate_ids_rejected(self, rng):
        actions = make_actions(rng, n=2)
        actions[1].id = actions[0].id
        with pytest.raises(ValueError):
            build_index(actions)


class TestNearestTrainingAction:
    def test_two_candidates_nearer_wins(self):
        a = ActionSequence(id="near", segments=np.array([[1.0, 0.0]]))
        b = ActionSequence(id="far", segments=np.array([[2.0, 0.0]]))
        index = build_index([a, b])
        assert nearest_training_action(index, np.array([0.0, 0.0]), 0) == "near"

    def test_tie_breaks_to_insertion_order(self, rng):
        v = rng.normal(size=3)
        actions = [ActionSequence(id=f"a{i}", segments=v[None, :].copy())
                   for i in range(4)]
        index = build_index(actions)
        assert nearest_training_action(index, v, 0) == "a0"
        assert nearest_training_action(index, v, 0, exclude_id="a0") == "a1"

    def test_matches_scan_with_duplicates_and_exclusion(self, rng):
        actions = make_actions(rng, n=20, T=2, d=5)
        actions[7].segments = actions[3].segments.copy()
        index = build_index(actions)
        for _ in range(40):
            q = rng.normal(size=5) if rng.random() < 0.7 else actions[3].segments[1]
            exclude = "a3" if rng.random() < 0.5 else None
            aid, row, dist = index.query(q, 1, exclude_id=exclude)
            exp_row, exp_dist = scan_nearest(index.vectors[:, 1, :], q,
                                             exclude_row=3 if exclude else None)
            assert row == exp_row and dist == pytest.approx(exp_dist, rel=1e-12)

    def test_all_candidates_excluded_raises(self, rng):
        actions = make_actions(rng, n=1)
        index = build_index(actions)
        with pytest.raises(ValueError):
            nearest_training_action(index, rng.normal(size=5), 0, exclude_id="a0")


class TestKdtreeBackend:
    def test_equivalent_to_linear_on_random_queries(self, rng):
        actions = make_actions(rng, n=30, T=3, d=4)
        # inject exact duplicates to exercise tie handling
        actions[11].segments = actions[2].segments.copy()
        actions[23].segments = actions[2].segments.copy()
        linear = build_index(actions, backend="linear")
        kdtree = build_index(actions, backend="kdtree")
        for i in range(1000):
            j = int(rng.integers(0, 3))
            if rng.random() < 0.2:
                q = actions[int(rng.integers(0, 30))].segments[j]
            else:
                q = rng.normal(size=4)
            exclude = f"a{int(rng.integers(0, 30))}" if rng.random() < 0.3 else None
            assert linear.query(q, j, exclude) == kdtree.query(q, j, exclude)


class TestRecommend:
    def test_harvests_all_segments_of_winner(self, rng):
        actions = make_actions(rng, n=6)
        index = build_index(actions)
        query_action = ActionSequence(id="q", segments=actions[2].segments + 1e-4)
        alts = recommend(index, query_action, 1)
        assert len(alts) == 4
        for t, alt in enumerate(alts):
            assert alt.source_action_id == "a2"
            assert alt.source_position == t
            assert alt.recommender_position == 1
            np.testing.assert_array_equal(alt.vector, actions[2].segments[t])

    def test_one_nns_call_per_recommendation(self, rng):
        actions = make_actions(rng, n=6)
        index = build_index(actions)
        recommend(index, actions[0], 2, exclude_id="a0")
        assert index.nns_calls == 1

    def test_noise_free_synthetic_recommendations_share_the_class(self):
        spec = SyntheticSpec(num_classes=3, num_actions_per_class=4, num_segments=5,
                             dim=4, num_prototypes=2, noise_std=0.0, seed=3)
        actions = generate_synthetic_dataset(spec)
        index = build_index(actions)
        for a in actions[::5]:
            for j in range(5):
                alts = recommend(index, a, j, exclude_id=a.id)
                assert all(alt.source_label == a.label for alt in alts)


class TestAugmentAction:
    def test_default_gives_exactly_t_alternatives_per_segment(self, rng):
        actions = make_actions(rng, n=5)
        index = build_index(actions)
        aug = augment_action(index, actions[0], AugmentOptions(exclude_self=True))
        assert aug.num_segments == 4
        for t, seg in enumerate(aug.segments):
            assert seg.num_alternatives == 4
            assert [a.recommender_position for a in seg.alternatives] == [0, 1, 2, 3]
            np.testing.assert_array_equal(seg.original, actions[0].segments[t])

    def test_exactly_t_nns_calls_regardless_of_training_size(self, rng):
        for n in (2, 7, 23, 101):
            actions = make_actions(rng, n=n)
            index = build_index(actions)
            augment_action(index, actions[0], AugmentOptions(exclude_self=True))
            assert index.nns_calls == 4

    def test_exclude_self_never_returns_own_segments(self, rng):
        actions = make_actions(rng, n=5)
        index = build_index(actions)
        for a in actions:
            aug = augment_action(index, a, AugmentOptions(exclude_self=True))
            for seg in aug.segments:
                assert all(alt.source_action_id != a.id for alt in seg.alternatives)

    def test_all_false_known_mask_degenerates_to_plain(self, rng):
        actions = make_actions(rng, n=4)
        target = actions[0]
        target.known_outlier_mask = np.zeros(4, dtype=bool)
        index = build_index(actions)
        aug = augment_action(index, target,
                             AugmentOptions(exclude_self=True, known_mask_mode=True))
        for t, seg in enumerate(aug.segments):
            assert seg.num_alternatives == 0
            assert seg.allow_original
            np.testing.assert_array_equal(seg.original, target.segments[t])

    def test_known_mask_gates_alternatives(self, rng):
        actions = make_actions(rng, n=4)
        target = actions[1]
        target.known_outlier_mask = np.array([True, False, True, False])
        index = build_index(actions)
        aug = augment_action(index, target,
                             AugmentOptions(exclude_self=True, known_mask_mode=True))
        assert [seg.num_alternatives for seg in aug.segments] == [4, 0, 4, 0]
        assert all(seg.allow_original for seg in aug.segments)

    def test_ban_masked_original(self, rng):
        actions = make_actions(rng, n=4)
        target = actions[1]
        target.known_outlier_mask = np.array([False, False, True, True])
        index = build_index(actions)
        aug = augment_action(index, target,
                             AugmentOptions(exclude_self=True, known_mask_mode=True,
                                            ban_masked_original=True))
        assert [seg.allow_original for seg in aug.segments] == [True, True, False, False]
        assert [seg.num_alternatives for seg in aug.segments] == [0, 0, 4, 4]

    def test_duplicate_window_appends_neighbor_alternatives(self, rng):
        actions = make_actions(rng, n=5, T=4)
        index = build_index(actions)
        aug = augment_action(index, actions[0],
                             AugmentOptions(exclude_self=True, duplicate_window=1))
        # segment 0 gains the alternatives retrieved for segment 1 (T of them);
        # interior segments gain from both neighbors
        assert [seg.num_alternatives for seg in aug.segments] == [8, 12, 12, 8]
        extras = aug.segments[0].alternatives[4:]
        assert all(alt.source_position == 1 for alt in extras)
        assert [alt.recommender_position for alt in extras] == [0, 1, 2, 3]

    def test_determinism(self, rng):
        actions = make_actions(rng, n=6)
        index = build_index(actions)
        opts = AugmentOptions(exclude_self=True, duplicate_window=1)
        a1 = augment_action(index, actions[0], opts)
        a2 = augment_action(index, actions[0], opts)
        for s1, s2 in zip(a1.segments, a2.segments):
            assert len(s1.alternatives) == len(s2.alternatives)
            for x, y in zip(s1.alternatives, s2.alternatives):
                assert x.source_action_id == y.source_action_id
                assert x.source_position == y.source_position
                np.testing.assert_array_equal(x.vector, y.vector)


class TestAugmentDataset:
    def test_two_training_actions_cross_recommend(self, rng):
        actions = make_actions(rng, n=2)
        aug_train, _, _ = augment_dataset(actions, [])
        for aug, other in zip(aug_train, ("a1", "a0")):
            for seg in aug.segments:
                assert all(alt.source_action_id == other for alt in seg.alternatives)

    def test_total_nns_call_count(self, rng):
        train = make_actions(rng, n=6, T=4)
        test = [ActionSequence(id=f"t{i}", segments=rng.normal(size=(4, 5)))
                for i in range(3)]
        _, _, index = augment_dataset(train, test)
        assert index.nns_calls == (6 + 3) * 4

    def test_noise_free_alternatives_are_all_accurate(self):
        spec = SyntheticSpec(num_classes=2, num_actions_per_class=5, num_segments=4,
                             dim=3, num_prototypes=2, noise_std=0.0, seed=1)
        actions = generate_synthetic_dataset(spec)
        aug_train, _, _ = augment_dataset(actions, [])
        total = accurate = 0
        for a in aug_train:
            for seg in a.segments:
                for alt in seg.alternatives:
                    total += 1
                    accurate += alt.source_label == a.label
        assert total == len(actions) * 4 * 4
        assert accurate == total

    def test_provenance_closure_bit_for_bit(self, rng):
        train = make_actions(rng, n=5)
        test = [ActionSequence(id="t0", segments=rng.normal(size=(4, 5)))]
        by_id = {a.id: a for a in train}
        aug_train, aug_test, _ = augment_dataset(train, test)
        for aug in aug_train + aug_test:
            for seg in aug.segments:
                for alt in seg.alternatives:
                    source = by_id[alt.source_action_id]
                    np.testing.assert_array_equal(
                        alt.vector, source.segments[alt.source_position])
