import math
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from cilkit.errors import CILError, DataError
from cilkit.models import UNIVERSAL, Classifier, ModelState
from cilkit.services.fusion_service import fuse
from cilkit.services.inference_service import (
    ALL_STRATEGIES,
    BatchOutputs,
    InferenceEngine,
    InferenceStrategy,
    StrategyKind,
    _combine,
    entropy,
    predict,
    predict_probs,
    select_adapter,
    select_from_probs,
)
from cilkit.services.trainer_service import train_task
from cilkit.utils.datasets import make_synthetic_stream
from cilkit.utils.metrics import pair_error_rates


def outputs_from(task_probs, universal_probs=None, task_logits=None):
    task_probs = np.asarray(task_probs, dtype=float)
    return BatchOutputs(
        task_ids=list(range(1, task_probs.shape[0] + 1)),
        task_logits=np.log(task_probs) if task_logits is None else np.asarray(task_logits, dtype=float),
        task_probs=task_probs,
        entropies=entropy(task_probs),
        universal_probs=None if universal_probs is None else np.asarray(universal_probs, dtype=float),
    )


def test_entropy_examples():
    assert entropy(np.full(4, 0.25)) == pytest.approx(math.log(4), abs=1e-12)
    assert entropy(np.array([0.0, 1.0, 0.0])) == 0.0
    assert entropy(np.array([0.5, 0.5, 0.0, 0.0])) == pytest.approx(math.log(2), abs=1e-12)


def test_entropy_rejects_negative_probabilities():
    with pytest.raises(DataError):
        entropy(np.array([1.2, -0.2]))


def test_entropy_bounds(rng):
    for _ in range(100):
        logits = rng.normal(scale=5.0, size=int(rng.integers(1, 20)))
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
        value = entropy(probs)
        assert 0.0 <= value <= math.log(probs.size)


def test_selection_examples():
    index, entropies = select_from_probs([np.array([0.9, 0.1]), np.array([0.5, 0.5])])
    assert index == 0
    assert_allclose(entropies, [0.325083, 0.693147], atol=1e-6)
    assert select_from_probs([np.array([0.3, 0.7])])[0] == 0
    same = np.array([0.2, 0.8])
    assert select_from_probs([same, same, same])[0] == 0


def test_selection_follows_permutation():
    probs = [np.array([0.5, 0.5]), np.array([0.9, 0.1]), np.array([0.6, 0.4])]
    assert select_from_probs(probs)[0] == 1
    assert select_from_probs([probs[2], probs[0], probs[1]])[0] == 2


def test_ensemble_sums_probabilities():
    out = outputs_from([[[0.6, 0.4]]], universal_probs=[[0.3, 0.7]])
    result = _combine(StrategyKind.ENSEMBLE, out)
    assert result.classes.tolist() == [1]
    assert_allclose(result.combined_probs[0], [0.45, 0.55])
    assert _combine(StrategyKind.ENTROPY_ONLY, out).classes.tolist() == [0]
    assert _combine(StrategyKind.UNIVERSAL_ONLY, out).classes.tolist() == [1]


def test_ensemble_with_identical_distributions_matches_single_adapter():
    out = outputs_from([[[0.2, 0.5, 0.3]]], universal_probs=[[0.2, 0.5, 0.3]])
    assert _combine(StrategyKind.ENSEMBLE, out).classes.tolist() == [1]


def test_ensemble_uses_minimum_entropy_adapter():
    # adapter 2 is confident about class 2, the universal adapter weakly prefers class 0
    out = outputs_from([[[0.4, 0.3, 0.3]], [[0.05, 0.05, 0.9]]], universal_probs=[[0.5, 0.2, 0.3]])
    result = _combine(StrategyKind.ENSEMBLE, out)
    assert result.selected_tasks.tolist() == [2]
    assert result.classes.tolist() == [2]


def test_maxlogit_picks_largest_raw_logit():
    logits = [[[1.0, 4.0, 0.0]], [[5.0, 0.0, 0.0]]]
    probs = np.exp(np.array(logits))
    probs /= probs.sum(axis=-1, keepdims=True)
    result = _combine(StrategyKind.MAXLOGIT_BASELINE, outputs_from(probs, task_logits=logits))
    assert result.classes.tolist() == [0]
    assert result.selected_tasks.tolist() == [2]


def test_maxlogit_ties_go_to_lowest_adapter():
    logits = [[[3.0, 0.0]], [[3.0, 0.0]]]
    probs = np.exp(np.array(logits))
    probs /= probs.sum(axis=-1, keepdims=True)
    result = _combine(StrategyKind.MAXLOGIT_BASELINE, outputs_from(probs, task_logits=logits))
    assert result.selected_tasks.tolist() == [1]


def test_strategy_names():
    assert InferenceStrategy.from_name("ensemble").needs_universal
    assert not InferenceStrategy.from_name("entropy_only").needs_universal
    with pytest.raises(ValueError):
        InferenceStrategy.from_name("vote")


def test_predict_probs_is_a_distribution(trained_state, tiny_stream):
    x = tiny_stream.tasks[0].test.x[0]
    probs = predict_probs(x, trained_state.task_adapters[0], trained_state.classifier, trained_state.backbone)
    assert probs.shape == (4,)
    assert probs.sum() == pytest.approx(1.0, abs=1e-12)


def test_select_adapter_matches_engine(trained_state, tiny_stream):
    x = tiny_stream.tasks[1].test.x[:5]
    engine = InferenceEngine(trained_state)
    outputs = engine.batch_outputs(x)
    for i in range(5):
        chosen, entropies = select_adapter(
            x[i], trained_state.task_adapters, trained_state.classifier, trained_state.backbone
        )
        assert_allclose(entropies, outputs.entropies[:, i], atol=1e-12)
        assert chosen.task_id == outputs.task_ids[outputs.selected[i]]


def test_predict_single_instance(trained_state, tiny_stream):
    x = tiny_stream.tasks[0].test.x[0]
    prediction = predict(x, trained_state, InferenceStrategy(StrategyKind.ENSEMBLE))
    assert prediction.class_id == int(np.argmax(prediction.combined_probs))
    assert np.all(prediction.combined_probs >= 0)
    assert prediction.per_adapter_entropy.shape == (2,)
    assert np.all(prediction.per_adapter_entropy <= math.log(4) + 1e-12)
    assert predict(x, trained_state, InferenceStrategy(StrategyKind.UNIVERSAL_ONLY)).selected_task == UNIVERSAL


def test_predict_all_matches_single_predictions(trained_state, tiny_stream):
    x = tiny_stream.test_union(2).x
    batched = InferenceEngine(trained_state, batch_size=5).predict_all(x)
    for strategy in ALL_STRATEGIES:
        classes = [predict(row, trained_state, strategy).class_id for row in x[:6]]
        assert batched[strategy.name].classes[:6].tolist() == classes


def test_missing_universal_adapter_is_rejected(trained_state):
    state = ModelState(
        backbone=trained_state.backbone,
        classifier=trained_state.classifier,
        task_adapters=trained_state.task_adapters,
    )
    with pytest.raises(CILError):
        InferenceEngine(state).predict_batch(np.zeros((1, 3, 4)), InferenceStrategy(StrategyKind.ENSEMBLE))
    result = InferenceEngine(state).predict_batch(np.zeros((1, 3, 4)), InferenceStrategy(StrategyKind.ENTROPY_ONLY))
    assert len(result) == 1


def test_single_task_strategies_agree(tiny_backbone, tiny_stream, tiny_train_config):
    state = ModelState(backbone=tiny_backbone, classifier=Classifier(8))
    train_task(tiny_stream.tasks[0], state, tiny_train_config)
    state.universal = fuse(state.task_adapters)
    predictions = InferenceEngine(state).predict_all(tiny_stream.tasks[0].test.x)
    reference = predictions[StrategyKind.ENSEMBLE.value].classes
    for name, result in predictions.items():
        assert result.classes.tolist() == reference.tolist(), name


def test_maxlogit_confuses_cross_task_pairs(pretrained_backbone, tiny_synthetic, tiny_protocol, tiny_train_config):
    synthetic = replace(tiny_synthetic, confusable_pairs=1, train_per_class=24, test_per_class=20)
    stream = make_synthetic_stream(synthetic, tiny_protocol)
    [(anchor, partner)] = stream.confusable_pairs
    owners = stream.task_of_class()
    assert owners[anchor] != owners[partner]

    cfg = replace(tiny_train_config, epochs=8, replay_samples_per_class=40, calibration_epochs=30, calibration_lr=0.1)
    state = ModelState(backbone=pretrained_backbone, classifier=Classifier(8))
    for task in stream.tasks:
        train_task(task, state, cfg)

    test = stream.test_union(stream.num_tasks)
    baseline = InferenceStrategy(StrategyKind.MAXLOGIT_BASELINE)
    predicted = InferenceEngine(state).predict_batch(test.x, baseline).classes
    pair, other = pair_error_rates(predicted, test.y, stream.confusable_pairs)
    assert pair > other
