"""Tests for the categorical selector policy and its DPO trainer."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apr.codebook import Channel
from apr.errors import InvalidParams, IoError, NonFiniteLoss
from apr.policy import (
    ALL_ACTIONS,
    EvalRecord,
    PolicyParams,
    PreferencePair,
    QueryFeatures,
    UtilityWeights,
    action_from_index,
    action_index,
    build_preference_pairs,
    calibrate_token_costs,
    dpo_loss,
    dpo_loss_and_grad,
    proxy_token_cost,
    read_eval_log,
    select_action,
    train,
    utility,
)
from apr.selector import SelectorAction

NOT = SelectorAction.NOT_INCLUDE
UNI = SelectorAction.UNIQUE
ALL = SelectorAction.INCLUDE_ALL


def features(query_tokens=50.0, triple_count=5.0, ambiguity=0.5,
             token_budget=2000.0, red_q=0.0, red_a=0.0, red_f=0.0,
             model_id="default"):
    return QueryFeatures(
        query_tokens=query_tokens,
        triple_count=triple_count,
        ambiguity=ambiguity,
        token_budget=token_budget,
        redundancy={
            Channel.QUESTION.value: red_q,
            Channel.ANSWER.value: red_a,
            Channel.FACT.value: red_f,
        },
        model_id=model_id,
    )


def record(action, acc, faith=0.0, tokens=0.0, latency=0.0, feats=None):
    return EvalRecord(features=feats or features(), action=action,
                      acc=acc, faith=faith, tokens=tokens, latency=latency)


class TestActionSpace:

    def test_27_distinct_tuples(self):
        assert len(ALL_ACTIONS) == 27
        assert len(set(ALL_ACTIONS)) == 27

    def test_index_zero_is_all_not_include(self):
        assert ALL_ACTIONS[0] == (NOT, NOT, NOT)

    def test_last_index_is_all_include(self):
        assert ALL_ACTIONS[-1] == (ALL, ALL, ALL)

    def test_index_round_trip(self):
        for i in range(27):
            assert action_index(action_from_index(i)) == i

    def test_action_index_rejects_unknown_tuple(self):
        with pytest.raises(InvalidParams):
            action_index(("include_all", "unique", "not_include"))

    def test_action_from_index_rejects_out_of_range(self):
        with pytest.raises(InvalidParams):
            action_from_index(27)
        with pytest.raises(InvalidParams):
            action_from_index(-1)

    def test_proxy_cost_extremes(self):
        assert proxy_token_cost((NOT, NOT, NOT)) == 0.0
        assert proxy_token_cost((ALL, ALL, ALL)) == 9.0
        assert proxy_token_cost((NOT, UNI, ALL)) == 5.0

    def test_proxy_cost_monotone_in_rank(self):
        # upgrading any single channel never makes the tuple cheaper
        for a in ALL_ACTIONS:
            for ch in range(3):
                if a[ch] is NOT:
                    up = tuple(UNI if i == ch else v for i, v in enumerate(a))
                    assert proxy_token_cost(up) > proxy_token_cost(a)


class TestQueryFeatures:

    def test_vector_scaling_and_bias(self):
        f = features(query_tokens=100.0, triple_count=10.0, ambiguity=0.5,
                     token_budget=1000.0, red_q=0.1, red_a=0.2, red_f=0.3)
        v = f.vector([])
        np.testing.assert_allclose(
            v, [1.0, 1.0, 0.5, 1.0, 0.1, 0.2, 0.3, 1.0])

    def test_vector_length_includes_one_hot(self):
        v = features().vector(["a", "b", "c"])
        assert v.shape == (7 + 3 + 1,)

    def test_model_one_hot_position(self):
        v = features(model_id="b").vector(["a", "b"])
        np.testing.assert_allclose(v[7:9], [0.0, 1.0])

    def test_unknown_model_gets_zero_block(self):
        v = features(model_id="mystery").vector(["a", "b"])
        np.testing.assert_allclose(v[7:9], [0.0, 0.0])

    def test_bias_is_last(self):
        assert features().vector(["a"])[-1] == 1.0

    def test_non_finite_feature_rejected(self):
        with pytest.raises(InvalidParams):
            features(ambiguity=float("nan")).vector([])
        with pytest.raises(InvalidParams):
            features(token_budget=float("inf")).vector([])


class TestEvalRecordValidation:

    def test_acc_range(self):
        with pytest.raises(InvalidParams):
            record((NOT, NOT, NOT), acc=1.5)

    def test_faith_range(self):
        with pytest.raises(InvalidParams):
            record((NOT, NOT, NOT), acc=0.5, faith=-0.1)

    def test_negative_tokens(self):
        with pytest.raises(InvalidParams):
            record((NOT, NOT, NOT), acc=0.5, tokens=-1.0)

    def test_negative_latency(self):
        with pytest.raises(InvalidParams):
            record((NOT, NOT, NOT), acc=0.5, latency=-0.5)

    def test_negative_utility_weight_rejected(self):
        with pytest.raises(InvalidParams):
            UtilityWeights(beta=-1e-4)


class TestUtility:

    def test_accuracy_minus_token_charge(self):
        w = UtilityWeights(alpha=1.0, beta=0.001, gamma=0.0, delta=0.0)
        r = record((ALL, ALL, ALL), acc=0.8, tokens=500.0)
        assert utility(r, w) == pytest.approx(0.3)

    def test_cheaper_config_can_win_on_utility(self):
        w = UtilityWeights(alpha=1.0, beta=0.001, gamma=0.0, delta=0.0)
        heavy = record((ALL, ALL, ALL), acc=0.8, tokens=500.0)
        light = record((UNI, UNI, UNI), acc=0.7, tokens=100.0)
        assert utility(light, w) == pytest.approx(0.6)
        assert utility(light, w) > utility(heavy, w)

    def test_zero_record_has_zero_utility(self):
        assert utility(record((NOT, NOT, NOT), acc=0.0)) == 0.0

    def test_default_weights_arithmetic(self):
        r = record((UNI, UNI, UNI), acc=0.9, faith=0.8, tokens=200.0,
                   latency=2.0)
        expected = 1.0 * 0.9 + 0.5 * 0.8 - 5e-4 * 200.0 - 0.05 * 2.0
        assert utility(r) == pytest.approx(expected)


class TestPreferencePairs:

    def test_three_distinct_utilities_make_three_pairs(self):
        group = {"q1": [
            record((NOT, NOT, NOT), acc=0.2),
            record((UNI, UNI, UNI), acc=0.5),
            record((ALL, ALL, ALL), acc=0.9),
        ]}
        pairs = build_preference_pairs(group)
        assert len(pairs) == 3
        for p in pairs:
            assert p.winner != p.loser

    def test_winner_has_higher_utility(self):
        group = {"q1": [
            record((NOT, NOT, NOT), acc=0.2),
            record((ALL, ALL, ALL), acc=0.9),
        ]}
        (pair,) = build_preference_pairs(group)
        assert pair.winner == (ALL, ALL, ALL)
        assert pair.loser == (NOT, NOT, NOT)

    def test_equal_utilities_make_no_pair(self):
        group = {"q1": [
            record((NOT, NOT, NOT), acc=0.5),
            record((ALL, ALL, ALL), acc=0.5),
        ]}
        assert build_preference_pairs(group) == []

    def test_single_record_makes_no_pair(self):
        assert build_preference_pairs(
            {"q1": [record((UNI, UNI, UNI), acc=0.7)]}) == []

    def test_pairs_stay_within_groups(self):
        groups = {
            "q1": [record((NOT, NOT, NOT), acc=0.1),
                   record((UNI, UNI, UNI), acc=0.9)],
            "q2": [record((NOT, NOT, NOT), acc=0.2),
                   record((ALL, ALL, ALL), acc=0.8)],
        }
        pairs = build_preference_pairs(groups)
        # 1 pair per group, never the C(4,2)=6 of a pooled scan
        assert len(pairs) == 2

    def test_custom_weights_flip_preference(self):
        group = {"q1": [
            record((ALL, ALL, ALL), acc=0.8, tokens=500.0),
            record((UNI, UNI, UNI), acc=0.7, tokens=100.0),
        ]}
        token_blind = UtilityWeights(alpha=1.0, beta=0.0, gamma=0.0, delta=0.0)
        (pair,) = build_preference_pairs(group, token_blind)
        assert pair.winner == (ALL, ALL, ALL)
        token_averse = UtilityWeights(alpha=1.0, beta=0.001, gamma=0.0,
                                      delta=0.0)
        (pair,) = build_preference_pairs(group, token_averse)
        assert pair.winner == (UNI, UNI, UNI)


class TestPolicyParams:

    def test_ensure_weights_shape_and_determinism(self):
        a = PolicyParams(model_ids=["m1"]).ensure_weights(seed=3)
        b = PolicyParams(model_ids=["m1"]).ensure_weights(seed=3)
        assert a.shape == (27, 7 + 1 + 1)
        np.testing.assert_array_equal(a, b)

    def test_ensure_weights_rejects_wrong_shape(self):
        params = PolicyParams(weights=np.zeros((27, 3)))
        with pytest.raises(InvalidParams):
            params.ensure_weights()

    def test_default_token_cost_is_proxy(self):
        cost = PolicyParams().effective_token_cost()
        np.testing.assert_allclose(
            cost, [proxy_token_cost(a) for a in ALL_ACTIONS])

    def test_calibrated_token_cost_wins(self):
        params = PolicyParams(token_cost=np.full(27, 42.0))
        np.testing.assert_allclose(params.effective_token_cost(), 42.0)

    def test_save_load_round_trip(self, tmp_path):
        params = PolicyParams(model_ids=["m1", "m2"], beta_dpo=0.7, eta=0.02,
                              token_cost=np.arange(27, dtype=float))
        params.ensure_weights(seed=5)
        path = str(tmp_path / "policy.json")
        params.save(path)
        loaded = PolicyParams.load(path)
        np.testing.assert_allclose(loaded.weights, params.weights)
        np.testing.assert_allclose(loaded.token_cost, params.token_cost)
        assert loaded.model_ids == ["m1", "m2"]
        assert loaded.beta_dpo == 0.7
        assert loaded.eta == 0.02

    def test_load_rejects_unknown_version(self, tmp_path):
        path = tmp_path / "policy.json"
        doc = {"v": 2, "model_ids": [], "weights": [], "beta_dpo": 1.0,
               "eta": 0.0}
        path.write_text(json.dumps(doc))
        with pytest.raises(IoError):
            PolicyParams.load(str(path))

    def test_load_rejects_garbage(self, tmp_path):
        path = tmp_path / "policy.json"
        path.write_text("{not json")
        with pytest.raises(IoError):
            PolicyParams.load(str(path))

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(IoError):
            PolicyParams.load(str(tmp_path / "absent.json"))


def _random_problem(seed, n_pairs=6, n_models=1):
    """Random weights, features, disjoint winner/loser indices, margins."""
    rng = np.random.default_rng(seed)
    dim = 7 + n_models + 1
    W = rng.normal(0.0, 0.5, size=(27, dim))
    X = rng.normal(0.0, 1.0, size=(n_pairs, dim))
    wi = rng.integers(0, 27, size=n_pairs)
    li = (wi + rng.integers(1, 27, size=n_pairs)) % 27
    ref_margin = rng.normal(0.0, 0.3, size=n_pairs)
    return W, X, wi, li, ref_margin


class TestDpoGradient:

    def test_zero_weights_give_log_two_loss(self):
        W = np.zeros((27, 8))
        X = np.ones((4, 8))
        wi = np.array([0, 1, 2, 3])
        li = np.array([4, 5, 6, 7])
        loss = dpo_loss(W, X, wi, li, np.zeros(4), beta_dpo=1.0)
        assert loss == pytest.approx(math.log(2.0))

    def test_loss_and_grad_agree_on_loss(self):
        W, X, wi, li, rm = _random_problem(0)
        only_loss = dpo_loss(W, X, wi, li, rm, beta_dpo=0.8)
        loss, _ = dpo_loss_and_grad(W, X, wi, li, rm, beta_dpo=0.8)
        assert loss == pytest.approx(only_loss)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_matches_central_differences(self, seed):
        W, X, wi, li, rm = _random_problem(seed)
        beta = 0.5 + 0.3 * seed
        _, grad = dpo_loss_and_grad(W, X, wi, li, rm, beta)
        eps = 1e-6
        fd = np.zeros_like(W)
        for i in range(W.shape[0]):
            for j in range(W.shape[1]):
                up = W.copy()
                up[i, j] += eps
                down = W.copy()
                down[i, j] -= eps
                fd[i, j] = (dpo_loss(up, X, wi, li, rm, beta)
                            - dpo_loss(down, X, wi, li, rm, beta)) / (2 * eps)
        np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-7)

    def test_gradient_touches_only_paired_rows(self):
        # log-prob differences cancel the partition term, so rows of
        # actions that appear in no pair have exactly zero gradient
        W, X, _, _, rm = _random_problem(1, n_pairs=3)
        wi = np.array([2, 2, 5])
        li = np.array([7, 9, 7])
        _, grad = dpo_loss_and_grad(W, X, wi, li, rm, beta_dpo=1.0)
        touched = {2, 5, 7, 9}
        for row in range(27):
            if row not in touched:
                np.testing.assert_array_equal(grad[row], 0.0)

    def test_reference_margin_shifts_loss(self):
        W, X, wi, li, _ = _random_problem(2)
        easy = dpo_loss(W, X, wi, li, np.full(len(wi), -5.0), 1.0)
        hard = dpo_loss(W, X, wi, li, np.full(len(wi), +5.0), 1.0)
        # a reference that already prefers the winner raises the bar
        assert hard > easy


def _separable_pairs(n_per_regime=20):
    """Big budgets prefer include-all, small budgets prefer not-include."""
    pairs = []
    for k in range(n_per_regime):
        big = features(token_budget=5000.0 + k)
        small = features(token_budget=100.0 + k)
        pairs.append(PreferencePair(big, (ALL, ALL, ALL), (NOT, NOT, NOT)))
        pairs.append(PreferencePair(small, (NOT, NOT, NOT), (ALL, ALL, ALL)))
    return pairs


class TestTrain:

    def test_empty_pairs_leave_weights_untouched(self):
        params = PolicyParams(weights=np.ones((27, 8)))
        out = train([], params)
        np.testing.assert_array_equal(out.weights, np.ones((27, 8)))
        assert out.loss_history == []

    def test_input_params_not_mutated(self):
        params = PolicyParams()
        W0 = params.ensure_weights(seed=0).copy()
        pair = PreferencePair(features(), (ALL, ALL, ALL), (NOT, NOT, NOT))
        train([pair], params, epochs=20)
        np.testing.assert_array_equal(params.weights, W0)

    def test_single_pair_orders_the_logits(self):
        pair = PreferencePair(features(), (ALL, ALL, ALL), (NOT, NOT, NOT))
        out = train([pair], PolicyParams(), epochs=50)
        x = features().vector(out.model_ids)
        logits = out.weights @ x
        assert logits[action_index((ALL, ALL, ALL))] > \
            logits[action_index((NOT, NOT, NOT))]

    def test_loss_history_non_increasing(self):
        out = train(_separable_pairs(), PolicyParams(), epochs=100)
        hist = out.loss_history
        assert len(hist) >= 2
        for before, after in zip(hist, hist[1:]):
            assert after <= before + 1e-9

    def test_training_loss_actually_drops(self):
        out = train(_separable_pairs(), PolicyParams(), epochs=100)
        assert out.loss_history[-1] < out.loss_history[0] * 0.5

    def test_deterministic_given_seed(self):
        pairs = _separable_pairs()
        a = train(pairs, PolicyParams(), epochs=30, seed=9)
        b = train(pairs, PolicyParams(), epochs=30, seed=9)
        np.testing.assert_array_equal(a.weights, b.weights)

    @settings(max_examples=8, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_loss_monotone_for_any_seed(self, seed):
        out = train(_separable_pairs(5), PolicyParams(), epochs=25, seed=seed)
        hist = out.loss_history
        assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))

    def test_frozen_reference_is_respected(self):
        # a reference already preferring the winner shrinks the implicit
        # reward margin, so training against it yields a different W than
        # the uniform-reference run
        pairs = _separable_pairs(5)
        base = PolicyParams()
        base.ensure_weights(seed=0)
        ref = PolicyParams(ref_weights=base.weights * 50.0,
                           weights=base.weights.copy())
        uni = PolicyParams(weights=base.weights.copy())
        trained_ref = train(pairs, ref, epochs=20)
        trained_uni = train(pairs, uni, epochs=20)
        assert not np.allclose(trained_ref.weights, trained_uni.weights)

    def test_learned_policy_follows_the_regimes(self):
        out = train(_separable_pairs(), PolicyParams(), epochs=200)
        out.eta = 0.0
        assert select_action(features(token_budget=5000.0), out) == \
            (ALL, ALL, ALL)
        assert select_action(features(token_budget=100.0), out) == \
            (NOT, NOT, NOT)

    def test_rejects_bad_hyperparameters(self):
        with pytest.raises(InvalidParams):
            train([], PolicyParams(), lr=0.0)
        with pytest.raises(InvalidParams):
            train([], PolicyParams(), epochs=-1)

    def test_non_finite_weights_raise(self):
        params = PolicyParams(weights=np.full((27, 8), np.inf))
        pair = PreferencePair(features(), (ALL, ALL, ALL), (NOT, NOT, NOT))
        with np.errstate(invalid="ignore"), pytest.raises(NonFiniteLoss):
            train([pair], params, epochs=5)


class TestSelectAction:

    def test_zero_weights_tie_break_is_cheapest(self):
        params = PolicyParams(weights=np.zeros((27, 8)), eta=0.0)
        assert select_action(features(), params) == (NOT, NOT, NOT)

    def test_argmax_row_wins(self):
        W = np.zeros((27, 8))
        target = action_index((UNI, NOT, ALL))
        W[target, -1] = 10.0  # bias column is always active
        params = PolicyParams(weights=W, eta=0.0)
        assert select_action(features(), params) == (UNI, NOT, ALL)

    def test_large_eta_collapses_to_all_not_include(self):
        params = PolicyParams(eta=1e6)
        params.ensure_weights(seed=4)
        assert select_action(features(), params) == (NOT, NOT, NOT)

    def test_eta_charges_through_calibrated_costs(self):
        W = np.zeros((27, 8))
        idx_all = action_index((ALL, ALL, ALL))
        W[idx_all, -1] = 1.0
        cost = np.zeros(27)
        cost[idx_all] = 100.0
        params = PolicyParams(weights=W, eta=1.0, token_cost=cost)
        # the 1.0 logit edge loses to a 100-token charge
        assert select_action(features(), params) == (NOT, NOT, NOT)

    def test_cost_tie_breaks_by_index(self):
        params = PolicyParams(weights=np.zeros((27, 8)), eta=1.0,
                              token_cost=np.zeros(27))
        assert select_action(features(), params) == ALL_ACTIONS[0]

    def test_negative_cost_entry_attracts_the_tie(self):
        cost = np.zeros(27)
        cost[5] = -1.0
        params = PolicyParams(weights=np.zeros((27, 8)), eta=0.0,
                              token_cost=cost)
        # scores all zero; tie resolution walks to the cheapest entry
        assert select_action(features(), params) == ALL_ACTIONS[5]

    def test_redundancy_feature_can_drive_unique(self):
        W = np.zeros((27, 8))
        target = action_index((NOT, NOT, UNI))
        W[target, 6] = 10.0  # fact-channel redundancy feature
        params = PolicyParams(weights=W, eta=0.0)
        assert select_action(features(red_f=0.95), params) == (NOT, NOT, UNI)
        assert select_action(features(red_f=0.0), params) == (NOT, NOT, NOT)


class TestCalibrateTokenCosts:

    def test_seen_actions_use_empirical_mean(self):
        recs = [record((ALL, ALL, ALL), acc=0.5, tokens=100.0),
                record((ALL, ALL, ALL), acc=0.6, tokens=200.0)]
        cost = calibrate_token_costs(recs)
        assert cost[action_index((ALL, ALL, ALL))] == pytest.approx(150.0)

    def test_unseen_actions_keep_proxy(self):
        recs = [record((ALL, ALL, ALL), acc=0.5, tokens=100.0)]
        cost = calibrate_token_costs(recs)
        assert cost[action_index((NOT, NOT, NOT))] == 0.0
        assert cost[action_index((UNI, UNI, UNI))] == 6.0

    def test_empty_records_reduce_to_proxy(self):
        np.testing.assert_allclose(
            calibrate_token_costs([]),
            [proxy_token_cost(a) for a in ALL_ACTIONS])


EVAL_HEADER = ("query_id,query_tokens,triple_count,ambiguity,model_id,"
               "token_budget,redundancy_q,redundancy_a,redundancy_f,"
               "action_q,action_a,action_f,acc,faith,tokens,latency")

EVAL_ROWS = [
    "q1,40,6,0.3,gpt-a,2000,0.1,0.2,0.9,include_all,unique,not_include,"
    "0.8,0.9,350,1.5",
    "q1,40,6,0.3,gpt-a,2000,0.1,0.2,0.9,not_include,not_include,not_include,"
    "0.4,0.5,50,0.8",
    "q2,12,2,0.7,gpt-b,500,0.0,0.0,0.1,unique,unique,unique,"
    "0.6,0.7,120,1.1",
]


class TestReadEvalLog:

    def write_log(self, tmp_path, rows=None, header=EVAL_HEADER):
        path = tmp_path / "eval.csv"
        path.write_text("\n".join([header] + (rows or EVAL_ROWS)) + "\n")
        return str(path)

    def test_groups_by_query_in_insertion_order(self, tmp_path):
        groups = read_eval_log(self.write_log(tmp_path))
        assert list(groups) == ["q1", "q2"]
        assert len(groups["q1"]) == 2
        assert len(groups["q2"]) == 1

    def test_fields_parse_into_records(self, tmp_path):
        groups = read_eval_log(self.write_log(tmp_path))
        rec = groups["q1"][0]
        assert rec.action == (ALL, UNI, NOT)
        assert rec.acc == 0.8
        assert rec.tokens == 350.0
        assert rec.features.model_id == "gpt-a"
        assert rec.features.redundancy[Channel.FACT.value] == 0.9

    def test_log_feeds_the_pair_builder(self, tmp_path):
        groups = read_eval_log(self.write_log(tmp_path))
        pairs = build_preference_pairs(groups)
        assert len(pairs) == 1  # q1 has a strict winner; q2 is alone
        assert pairs[0].winner == (ALL, UNI, NOT)

    def test_missing_column_is_io_error(self, tmp_path):
        header = EVAL_HEADER.replace(",latency", "")
        rows = [r.rsplit(",", 1)[0] for r in EVAL_ROWS]
        with pytest.raises(IoError, match="latency"):
            read_eval_log(self.write_log(tmp_path, rows, header))

    def test_bad_row_reports_path_and_line(self, tmp_path):
        rows = list(EVAL_ROWS)
        rows[1] = rows[1].replace("0.4,0.5", "not-a-number,0.5")
        path = self.write_log(tmp_path, rows)
        with pytest.raises(IoError, match=r"eval\.csv:3"):
            read_eval_log(path)

    def test_out_of_range_metric_reports_line(self, tmp_path):
        rows = list(EVAL_ROWS)
        rows[2] = rows[2].replace("0.6,0.7", "1.6,0.7")
        with pytest.raises(IoError, match=":4"):
            read_eval_log(self.write_log(tmp_path, rows))

    def test_unknown_action_reports_line(self, tmp_path):
        rows = list(EVAL_ROWS)
        rows[0] = rows[0].replace("include_all,", "include_some,", 1)
        with pytest.raises(IoError, match=":2"):
            read_eval_log(self.write_log(tmp_path, rows))

    def test_missing_file_is_io_error(self, tmp_path):
        with pytest.raises(IoError):
            read_eval_log(str(tmp_path / "nope.csv"))
