import math

import numpy as np
import pytest

from icucast.hazard import pipeline_config_from_search, reduced_search_space
from icucast.search import (
    HyperRange,
    SearchSpace,
    StageChoice,
    encode,
    expected_improvement,
    history_to_jsonl,
    sample_config,
    search,
    skeleton_count,
)


def categorical_space(*cardinalities):
    stages = {}
    for i, n in enumerate(cardinalities):
        stages[f"stage{i}"] = [StageChoice(f"s{i}c{j}") for j in range(n)]
    return SearchSpace.from_dict(stages)


class TestSkeletonCount:
    def test_wide_catalog_has_192_skeletons(self):
        # Four imputers x four feature processors x four classifiers x three
        # calibrators, the full published algorithm catalog.
        space = SearchSpace.from_dict(
            {
                "imputer": [
                    StageChoice(n) for n in ("median", "mice", "missforest", "gain")
                ],
                "feature_processor": [
                    StageChoice(n) for n in ("none", "pca", "fast_ica", "rfe")
                ],
                "classifier": [
                    StageChoice(n) for n in ("elasticnet", "random_forest", "xgboost", "mlp")
                ],
                "calibrator": [
                    StageChoice(n) for n in ("isotonic", "bootstrap", "sigmoid")
                ],
            }
        )
        assert skeleton_count(space) == 192

    def test_single_choice_space(self):
        assert skeleton_count(categorical_space(1, 1, 1)) == 1

    def test_reduced_registry_is_81(self):
        space = reduced_search_space()
        assert skeleton_count(space) == 3 * 3 * 3 * 3 == 81


class TestEncode:
    def test_distinct_skeletons_distinct_encodings(self):
        space = categorical_space(2, 3)
        rng = np.random.default_rng(0)
        a = sample_config(space, rng)
        b = dict(a)
        b["stage1"] = {"choice": "s1c2" if a["stage1"]["choice"] != "s1c2" else "s1c0", "params": {}}
        assert not np.array_equal(encode(a, space), encode(b, space))

    def test_midpoint_maps_to_half(self):
        space = SearchSpace.from_dict(
            {
                "clf": [
                    StageChoice("m", hyperparams=(("depth", HyperRange(2, 10, "float")),))
                ]
            }
        )
        vec = encode({"clf": {"choice": "m", "params": {"depth": 6.0}}}, space)
        assert vec[-1] == 0.5

    def test_exhaustive_enumeration_pairwise_distinct(self):
        space = categorical_space(3, 2, 4)
        from icucast.search import _all_skeleton_configs

        encodings = [tuple(encode(c, space)) for c in _all_skeleton_configs(space)]
        assert len(encodings) == 24
        assert len(set(encodings)) == 24

    def test_out_of_space_rejected(self):
        space = categorical_space(2)
        with pytest.raises(ValueError):
            encode({"stage0": {"choice": "nope", "params": {}}}, space)

    def test_out_of_bounds_hyperparam_rejected(self):
        space = SearchSpace.from_dict(
            {"clf": [StageChoice("m", hyperparams=(("c", HyperRange(0.1, 1.0, "logfloat")),))]}
        )
        with pytest.raises(ValueError):
            encode({"clf": {"choice": "m", "params": {"c": 5.0}}}, space)


class TestExpectedImprovement:
    def test_nonnegative_everywhere(self):
        rng = np.random.default_rng(0)
        ei = expected_improvement(rng.normal(size=100), rng.uniform(0, 2, 100), 0.3)
        assert np.all(ei >= 0)

    def test_zero_at_evaluated_point_with_zero_variance(self):
        assert expected_improvement(np.array([0.3]), np.array([0.0]), 0.3)[0] == 0.0
        assert expected_improvement(np.array([0.9]), np.array([0.0]), 0.3)[0] == 0.0

    def test_positive_below_best(self):
        assert expected_improvement(np.array([0.0]), np.array([0.0]), 0.3)[0] > 0


class TestSearch:
    def test_full_enumeration_finds_global_minimum(self):
        space = categorical_space(3, 4)  # 12 configs
        values = {}
        rng = np.random.default_rng(5)
        from icucast.search import _all_skeleton_configs

        for cfg in _all_skeleton_configs(space):
            values[(cfg["stage0"]["choice"], cfg["stage1"]["choice"])] = float(
                rng.uniform()
            )

        def objective(cfg):
            return values[(cfg["stage0"]["choice"], cfg["stage1"]["choice"])]

        result = search(space, objective, budget=12, seed=0, init_count=4)
        assert len(result.history) == 12
        assert result.best_loss == min(values.values())

    def test_constant_objective(self):
        space = categorical_space(2, 2)
        result = search(space, lambda c: 0.7, budget=4, seed=1, init_count=2)
        assert result.best_loss == 0.7

    def test_best_trace_monotone(self):
        space = categorical_space(4, 4, 4)
        rng_obj = np.random.default_rng(7)
        table = {}

        def objective(cfg):
            key = tuple(cfg[s]["choice"] for s in ("stage0", "stage1", "stage2"))
            if key not in table:
                table[key] = float(rng_obj.uniform())
            return table[key]

        result = search(space, objective, budget=20, seed=3)
        trace = result.best_trace
        assert all(a >= b for a, b in zip(trace, trace[1:]))

    def test_no_reproposal_and_full_coverage(self):
        space = categorical_space(2, 3)  # 6 configs
        seen = []

        def objective(cfg):
            key = (cfg["stage0"]["choice"], cfg["stage1"]["choice"])
            seen.append(key)
            return 1.0 if key != ("s0c1", "s1c2") else 0.0

        result = search(space, objective, budget=10, seed=2, init_count=3)
        assert len(seen) == len(set(seen)) == 6  # no duplicates, all covered
        assert result.best_loss == 0.0

    def test_objective_failure_recorded_as_infinite(self):
        space = categorical_space(2)

        def objective(cfg):
            if cfg["stage0"]["choice"] == "s0c0":
                raise RuntimeError("boom")
            return 0.5

        result = search(space, objective, budget=2, seed=0, init_count=2)
        losses = sorted(loss for _, loss in result.history)
        assert losses[0] == 0.5 and math.isinf(losses[1])
        assert result.best_loss == 0.5

    def test_deterministic_under_seed(self):
        space = categorical_space(5, 5)

        def objective(cfg):
            return hash((cfg["stage0"]["choice"], cfg["stage1"]["choice"])) % 97 / 97.0

        a = search(space, objective, budget=12, seed=11)
        b = search(space, objective, budget=12, seed=11)
        assert [l for _, l in a.history] == [l for _, l in b.history]

    def test_history_jsonl_export(self):
        space = categorical_space(2)
        result = search(space, lambda c: 0.1, budget=2, seed=0, init_count=2)
        lines = history_to_jsonl(result).splitlines()
        assert len(lines) == 2
        import json

        rec = json.loads(lines[0])
        assert set(rec) == {"config", "loss", "ts"}


class TestHazardSpaceAdapter:
    def test_round_trip_to_pipeline_config(self):
        space = reduced_search_space()
        rng = np.random.default_rng(4)
        for _ in range(20):
            cfg = sample_config(space, rng)
            pc = pipeline_config_from_search(cfg)
            assert pc.imputer == cfg["imputer"]["choice"]
            assert pc.calibrator == cfg["calibrator"]["choice"]

    def test_encodings_distinct_across_samples(self):
        space = reduced_search_space()
        rng = np.random.default_rng(9)
        encs = {tuple(np.round(encode(sample_config(space, rng), space), 10)) for _ in range(50)}
        assert len(encs) == 50  # continuous coordinates keep draws distinct
