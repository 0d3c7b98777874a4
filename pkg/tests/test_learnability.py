"""
test learnability
end-to-end training on generated markets: the imbalance-aware losses recover
minority classes that plain cross-entropy gives up on, and a market without
signal cannot be beaten
"""

import numpy as np
import pytest

from tests.conftest import synthetic_splits
from tests.test_training import TINY, _samples
from training import TrainConfig, evaluate_checkpoint, train

SEEDS = range(5)
COUNTERMEASURES = ("weighted", "sensitive", "focal", "adaptive")


def minority_recall(result):
    """Pooled recall over the down and up classes."""
    cm = result.confusion
    support = cm[0].sum() + cm[2].sum()
    return float((cm[0, 0] + cm[2, 2]) / max(support, 1))


def _fit(loss, seed, train_set, val_set, test_set, **overrides):
    config = TrainConfig(loss=loss, seed=seed, **overrides)
    result = train(config, train_set, val_set, progress=False)
    return evaluate_checkpoint(result.checkpoint, test_set)


@pytest.fixture(scope="module")
def signal_markets(tmp_path_factory):
    return {seed: synthetic_splits(tmp_path_factory.mktemp(f"s1_{seed}"), seed=seed, n_days=1,
                                   signal_strength=1.0)
            for seed in SEEDS}


@pytest.fixture(scope="module")
def noise_markets(tmp_path_factory):
    return {seed: synthetic_splits(tmp_path_factory.mktemp(f"s0_{seed}"), seed=seed, n_days=1,
                                   signal_strength=0.0)
            for seed in SEEDS}


@pytest.mark.slow
def test_countermeasures_recover_minority(signal_markets):
    """
    with full signal, plain cross-entropy stays with the majority while at least
    three of the four countermeasures reach minority recall 0.5 and balanced
    accuracy 0.6, averaged over five seeds
    """
    recall = {loss: [] for loss in ("plain",) + COUNTERMEASURES}
    balanced = {loss: [] for loss in COUNTERMEASURES}
    for seed, (train_set, val_set, test_set) in signal_markets.items():
        for loss in recall:
            result = _fit(loss, seed, train_set, val_set, test_set)
            recall[loss].append(minority_recall(result))
            if loss in balanced:
                balanced[loss].append(result.balanced_accuracy)

    assert np.mean(recall["plain"]) < 0.2
    passing = [loss for loss in COUNTERMEASURES
               if np.mean(recall[loss]) >= 0.5 and np.mean(balanced[loss]) >= 0.6]
    assert len(passing) >= 3, {loss: np.mean(r) for loss, r in recall.items()}


@pytest.mark.slow
def test_weighted_mlp_recall_with_signal(signal_markets):
    """the 8:1:8 weighted MLP clears minority recall 0.5 on held-out data"""
    recalls = [minority_recall(_fit("weighted", seed, *splits))
               for seed, splits in signal_markets.items()]
    assert np.mean(recalls) > 0.5


@pytest.mark.slow
def test_no_signal_stays_at_majority_share(noise_markets):
    """without signal no loss beats the majority share by more than the noise margin"""
    accuracies = []
    for seed, (train_set, val_set, test_set) in noise_markets.items():
        majority = float(np.mean(test_set.labels == 1))
        for loss in ("plain",) + COUNTERMEASURES:
            accuracy = _fit(loss, seed, train_set, val_set, test_set).accuracy
            assert accuracy <= majority + 0.03, (loss, seed)
            accuracies.append(accuracy)
    assert np.mean(accuracies) <= 0.83
    assert np.mean(accuracies[::len(COUNTERMEASURES) + 1]) == pytest.approx(0.8, abs=0.03)


@pytest.mark.slow
def test_countermeasures_not_below_plain_on_separable_data():
    """on separable 1:8:1 data every imbalance-aware loss keeps up with plain minority recall"""
    data = dict(shift=4.0, shares=(0.1, 0.8, 0.1))
    recall = {loss: [] for loss in ("plain",) + COUNTERMEASURES}
    for seed in SEEDS:
        train_set = _samples(1000, seed=seed, **data)
        val_set = _samples(250, seed=seed + 100, **data)
        test_set = _samples(500, seed=seed + 200, **data)
        for loss in recall:
            result = _fit(loss, seed, train_set, val_set, test_set, normalize=False,
                          max_epochs=20, **TINY)
            recall[loss].append(minority_recall(result))
    plain = np.mean(recall["plain"])
    for loss in COUNTERMEASURES:
        # a few test samples either way over five seeds
        assert np.mean(recall[loss]) >= plain - 0.02, (loss, recall)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
