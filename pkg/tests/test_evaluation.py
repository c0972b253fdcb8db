"""Attribution quality protocols: subset scoring and removal retraining."""

import json
import math

import numpy as np
import pytest

from ltckit import (
    AttributionMatrix,
    DataError,
    LdsConfig,
    TrainConfig,
    draw_subsets,
    group_attribution,
    make_random_attribution,
    make_synthetic,
    run_brittleness,
    run_lds,
    subset_outcomes,
    top_scored_ids,
)


def attr_of(values, query_ids=None, train_ids=None):
    values = np.asarray(values, dtype=np.float64)
    q, n = values.shape
    if query_ids is None:
        query_ids = np.arange(q, dtype=np.uint64) + 1000
    if train_ids is None:
        train_ids = np.arange(n, dtype=np.uint64)
    return AttributionMatrix(
        values, np.asarray(query_ids, np.uint64), np.asarray(train_ids, np.uint64)
    )


class TestGroupAttribution:
    def test_hand_oracle(self):
        row = np.array([0.5, -0.25, 1.0, 0.125])
        ids = np.array([10, 11, 12, 13], dtype=np.uint64)
        assert group_attribution(row, ids, [10, 12]) == pytest.approx(1.5, abs=1e-15)
        assert group_attribution(row, ids, [11, 13]) == pytest.approx(-0.125)

    def test_empty_subset_is_zero(self):
        row = np.array([0.5, -0.25])
        ids = np.array([1, 2], dtype=np.uint64)
        assert group_attribution(row, ids, []) == 0.0

    def test_additive_over_disjoint_subsets(self):
        rng = np.random.default_rng(4)
        row = rng.normal(size=12)
        ids = np.arange(12, dtype=np.uint64) * 3
        left, right = ids[:5], ids[5:]
        total = group_attribution(row, ids, ids)
        assert group_attribution(row, ids, left) + group_attribution(
            row, ids, right
        ) == pytest.approx(total, abs=1e-12)

    def test_unknown_id_rejected(self):
        row = np.array([0.5, -0.25])
        ids = np.array([1, 2], dtype=np.uint64)
        with pytest.raises(DataError):
            group_attribution(row, ids, [7])


class TestDrawSubsets:
    def test_size_is_ceil_of_ratio(self):
        cfg = LdsConfig(n_subsets=5, sampling_ratio=0.5, seed=0)
        for s in draw_subsets(7, cfg):
            assert len(s) == 4  # ceil(3.5)

    def test_indices_sorted_unique_in_range(self):
        cfg = LdsConfig(n_subsets=20, sampling_ratio=0.3, seed=1)
        for s in draw_subsets(50, cfg):
            assert len(np.unique(s)) == len(s)
            assert np.all(s[:-1] < s[1:])
            assert s.min() >= 0 and s.max() < 50

    def test_deterministic_per_seed(self):
        cfg = LdsConfig(n_subsets=6, sampling_ratio=0.4, seed=9)
        a = draw_subsets(30, cfg)
        b = draw_subsets(30, cfg)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_roughly_uniform_inclusion(self):
        # Each index should appear in about ratio * C of C subsets;
        # tolerance is 4 standard errors of a binomial proportion.
        n, c, ratio = 20, 2000, 0.5
        cfg = LdsConfig(n_subsets=c, sampling_ratio=ratio, seed=3)
        counts = np.zeros(n)
        for s in draw_subsets(n, cfg):
            counts[s] += 1
        freq = counts / c
        bound = 4.0 * math.sqrt(ratio * (1 - ratio) / c)
        assert np.all(np.abs(freq - ratio) < bound)

    def test_ratio_one_is_everything(self):
        cfg = LdsConfig(n_subsets=3, sampling_ratio=1.0, seed=0)
        for s in draw_subsets(9, cfg):
            np.testing.assert_array_equal(s, np.arange(9))

    def test_config_validation(self):
        with pytest.raises(DataError):
            LdsConfig(n_subsets=1).check()
        with pytest.raises(DataError):
            LdsConfig(sampling_ratio=0.0).check()
        with pytest.raises(DataError):
            LdsConfig(sampling_ratio=1.5).check()
        with pytest.raises(DataError):
            LdsConfig(retrains_per_subset=0).check()
        with pytest.raises(DataError):
            LdsConfig(measurable="vibes").check()


def tiny_problem(seed=0):
    train = make_synthetic(
        n_classes=2, per_class=10, n_features=3, cluster_spread=0.4, seed=seed
    )
    query = make_synthetic(
        n_classes=2,
        per_class=4,
        n_features=3,
        cluster_spread=0.4,
        seed=seed + 1,
        id_offset=train.n_samples,
    )
    return train, query


class TestLdsOracle:
    def test_stub_outcome_equal_to_group_gives_one(self):
        train, query = tiny_problem()
        rng = np.random.default_rng(7)
        attr = attr_of(
            rng.normal(size=(query.n_samples, train.n_samples)),
            query_ids=query.sample_ids,
            train_ids=train.sample_ids,
        )
        id_to_col = {int(i): j for j, i in enumerate(train.sample_ids)}

        def oracle(q, subset_ids):
            cols = [id_to_col[i] for i in subset_ids]
            return float(attr.values[q, cols].sum())

        cfg = LdsConfig(n_subsets=12, sampling_ratio=0.5, seed=5)
        report = run_lds(train, query, attr, TrainConfig(), cfg, outcome_override=oracle)
        assert report.mean_lds == pytest.approx(1.0, abs=1e-12)
        assert report.n_excluded == 0
        assert all(v == pytest.approx(1.0, abs=1e-12) for v in report.per_query)

    def test_negated_attribution_gives_minus_one(self):
        train, query = tiny_problem()
        rng = np.random.default_rng(8)
        base = rng.normal(size=(query.n_samples, train.n_samples))
        attr = attr_of(base, query.sample_ids, train.sample_ids)
        negated = attr_of(-base, query.sample_ids, train.sample_ids)
        id_to_col = {int(i): j for j, i in enumerate(train.sample_ids)}

        def oracle(q, subset_ids):
            cols = [id_to_col[i] for i in subset_ids]
            return float(attr.values[q, cols].sum())

        cfg = LdsConfig(n_subsets=12, sampling_ratio=0.5, seed=5)
        report = run_lds(
            train, query, negated, TrainConfig(), cfg, outcome_override=oracle
        )
        assert report.mean_lds == pytest.approx(-1.0, abs=1e-12)

    def test_rank_agreement_oracle(self):
        # Feed outcomes whose ranks match the group scores exactly; any
        # strictly monotone relabeling (0.1 < 0.5 < 0.9) must score 1.0.
        train, query = tiny_problem()
        cfg = LdsConfig(n_subsets=3, sampling_ratio=0.5, seed=2)
        subsets = draw_subsets(train.n_samples, cfg)
        rng = np.random.default_rng(0)
        vals = rng.normal(size=(query.n_samples, train.n_samples))
        attr = attr_of(vals, query.sample_ids, train.sample_ids)
        group = np.stack(
            [
                [float(vals[q, s].sum()) for q in range(query.n_samples)]
                for s in subsets
            ]
        )
        order = np.argsort(np.argsort(group, axis=0), axis=0)  # ranks 0..2
        outcomes = np.array([0.1, 0.5, 0.9])[order]
        report = run_lds(train, query, attr, TrainConfig(), cfg, outcomes=outcomes)
        assert report.mean_lds == pytest.approx(1.0, abs=1e-12)

    def test_mismatched_attribution_rejected(self):
        train, query = tiny_problem()
        attr = attr_of(np.zeros((query.n_samples, train.n_samples - 1)))
        with pytest.raises(DataError):
            run_lds(train, query, attr, TrainConfig(), LdsConfig())


class TestLdsTrained:
    def test_real_training_report_shape(self):
        train, query = tiny_problem()
        tcfg = TrainConfig(epochs=6, seed=1)
        lcfg = LdsConfig(
            n_subsets=6,
            sampling_ratio=0.5,
            retrains_per_subset=2,
            seed=3,
            measurable="negative_query_loss",
        )
        attr = make_random_attribution(query.sample_ids, train.sample_ids, seed=1)
        report = run_lds(train, query, attr, tcfg, lcfg)
        assert len(report.per_query) == query.n_samples
        assert len(report.degenerate) == query.n_samples
        assert len(report.subset_ids) == 6
        assert report.subset_size == 10
        assert report.measurable == "negative_query_loss"
        for v, d in zip(report.per_query, report.degenerate):
            if d:
                assert v == 0.0
            else:
                assert -1.0 <= v <= 1.0
        doc = json.loads(report.to_json())
        assert set(doc) >= {"mean_lds", "per_query", "degenerate", "n_excluded"}

    def test_outcomes_reuse_matches_direct(self):
        train, query = tiny_problem()
        tcfg = TrainConfig(epochs=5, seed=2)
        lcfg = LdsConfig(n_subsets=5, sampling_ratio=0.5, retrains_per_subset=1, seed=4)
        subsets = draw_subsets(train.n_samples, lcfg)
        outcomes = subset_outcomes(train, query, subsets, tcfg, lcfg)
        attr = make_random_attribution(query.sample_ids, train.sample_ids, seed=9)
        direct = run_lds(train, query, attr, tcfg, lcfg)
        reused = run_lds(train, query, attr, tcfg, lcfg, outcomes=outcomes)
        assert direct.per_query == reused.per_query

    def test_outcomes_deterministic(self):
        train, query = tiny_problem()
        tcfg = TrainConfig(epochs=5, seed=2)
        lcfg = LdsConfig(n_subsets=4, sampling_ratio=0.5, retrains_per_subset=2, seed=4)
        subsets = draw_subsets(train.n_samples, lcfg)
        a = subset_outcomes(train, query, subsets, tcfg, lcfg)
        b = subset_outcomes(train, query, subsets, tcfg, lcfg)
        np.testing.assert_array_equal(a, b)


class TestRandomAttribution:
    def test_deterministic_and_bounded(self):
        a = make_random_attribution(np.arange(3), np.arange(5), seed=2)
        b = make_random_attribution(np.arange(3), np.arange(5), seed=2)
        np.testing.assert_array_equal(a.values, b.values)
        assert np.all(np.abs(a.values) <= 1.0)
        assert a.values.shape == (3, 5)

    def test_seed_changes_values(self):
        a = make_random_attribution(np.arange(3), np.arange(5), seed=2)
        b = make_random_attribution(np.arange(3), np.arange(5), seed=3)
        assert a.values.tobytes() != b.values.tobytes()


class TestTopScoredIds:
    def test_orders_by_score_then_id(self):
        ids = np.array([5, 6, 7, 8], dtype=np.uint64)
        scores = np.array([0.2, 0.9, 0.9, 0.1])
        got = top_scored_ids(scores, ids, 3)
        np.testing.assert_array_equal(got, [6, 7, 5])

    def test_k_zero_is_empty(self):
        got = top_scored_ids(np.array([1.0]), np.array([3], dtype=np.uint64), 0)
        assert len(got) == 0


class TestBrittleness:
    def test_k_zero_is_exactly_zero(self):
        train, query = tiny_problem()
        scores = np.linspace(-1, 1, train.n_samples)
        report = run_brittleness(
            train,
            query,
            scores,
            k_values=[0],
            tconfig=TrainConfig(epochs=5, seed=1),
            n_retrains=3,
            seed=0,
        )
        assert report.mean_flip == [0.0]
        assert report.flip_fractions[0] == [0.0, 0.0, 0.0]
        assert report.std_flip == [0.0]

    def test_report_fields(self):
        train, query = tiny_problem()
        scores = np.linspace(-1, 1, train.n_samples)
        report = run_brittleness(
            train,
            query,
            scores,
            k_values=[0, 2, 4],
            tconfig=TrainConfig(epochs=5, seed=1),
            n_retrains=2,
            seed=0,
        )
        assert report.k_values == [0, 2, 4]
        assert report.n_retrains == 2
        assert report.flip_basis == "reference"
        assert report.reference_digest.startswith("crc32:")
        for fps in report.flip_fractions:
            assert len(fps) == 2
            assert all(0.0 <= f <= 1.0 for f in fps)
        doc = json.loads(report.to_json())
        assert doc["k_values"] == [0, 2, 4]

    def test_removing_whole_class_flips_predictions(self):
        # Scores ranked so the top-k removal wipes out class 1 entirely;
        # the retrained model cannot predict it, so every class-1 query
        # prediction that was correct must flip.
        train, query = tiny_problem()
        scores = (train.labels == 1).astype(float)
        k = int((train.labels == 1).sum())
        report = run_brittleness(
            train,
            query,
            scores,
            k_values=[k],
            tconfig=TrainConfig(epochs=10, seed=3),
            n_retrains=2,
            seed=1,
            flip_basis="labels",
        )
        assert min(report.flip_fractions[0]) > 0.0

    def test_deterministic(self):
        train, query = tiny_problem()
        scores = np.linspace(-1, 1, train.n_samples)
        kwargs = dict(
            k_values=[0, 3],
            tconfig=TrainConfig(epochs=4, seed=2),
            n_retrains=2,
            seed=5,
        )
        a = run_brittleness(train, query, scores, **kwargs)
        b = run_brittleness(train, query, scores, **kwargs)
        assert a.flip_fractions == b.flip_fractions
        assert a.reference_digest == b.reference_digest

    def test_rejects_bad_k(self):
        train, query = tiny_problem()
        scores = np.zeros(train.n_samples)
        with pytest.raises(DataError):
            run_brittleness(
                train, query, scores, [train.n_samples], TrainConfig(epochs=2)
            )
        with pytest.raises(DataError):
            run_brittleness(train, query, scores, [-1], TrainConfig(epochs=2))

    def test_rejects_bad_flip_basis(self):
        train, query = tiny_problem()
        with pytest.raises(DataError):
            run_brittleness(
                train,
                query,
                np.zeros(train.n_samples),
                [0],
                TrainConfig(epochs=2),
                flip_basis="coin",
            )
