"""
test training
scoring, early stopping, determinism, adaptive weights and the grid runner
"""

import numpy as np
import pytest

from dataset import SampleSet
from losses import adaptive_weights, spec_adaptive_weights
from nn import save_checkpoint
from pipeline_config import ConfigError, SplitError
from training import (
    TrainConfig,
    evaluate_checkpoint,
    run_grid,
    score_predictions,
    train,
    write_metrics,
)

TINY = dict(mlp_hidden=(8,), hidden_dim=4, batch_size=32, learning_rate=0.01)


def _samples(n, seed=0, window=4, n_features=2, shift=3.0, shares=(0.15, 0.7, 0.15)):
    """Imbalanced samples whose class shifts feature 0 of every timestep."""
    rng = np.random.default_rng(seed)
    labels = rng.choice(3, size=n, p=shares).astype(np.uint8)
    windows = rng.normal(size=(n, window, n_features))
    windows[:, :, 0] += (labels.astype(float) - 1.0)[:, None] * shift
    return SampleSet(windows.astype(np.float32), labels, np.arange(n, dtype=np.int64),
                     np.array(["ag"] * n, dtype=object))


def test_score_predictions_example():
    """accuracy, recall per class and balanced accuracy from a small example"""
    result = score_predictions([0, 1, 1, 2, 2], [0, 1, 2, 2, 0])
    assert result.accuracy == pytest.approx(0.6)
    assert result.confusion.tolist() == [[1, 0, 0], [0, 1, 1], [1, 0, 1]]
    np.testing.assert_allclose(result.class_accuracy, [1.0, 0.5, 0.5])
    assert result.balanced_accuracy == pytest.approx(2 / 3)
    assert result.n == 5


def test_score_absent_class():
    """a class missing from validation has undefined recall"""
    result = score_predictions([1, 1, 2], [1, 0, 2])
    assert np.isnan(result.class_accuracy[0])
    assert result.balanced_accuracy == pytest.approx(0.75)


def test_score_per_instrument():
    result = score_predictions([1, 1, 1, 1], [1, 0, 1, 1], ["ag", "ag", "cu", "cu"])
    assert result.instrument_accuracy == {"ag": 0.5, "cu": 1.0}


def test_score_empty():
    """empty validation splits cannot be scored"""
    with pytest.raises(SplitError):
        score_predictions([], [])


def test_early_stop_restores_best():
    """a peak at epoch 2 with patience 10 stops after epoch 12 and keeps epoch 2 weights"""
    snapshots = {}
    scripted = {1: 0.50, 2: 0.80}

    def validator(epoch, params):
        snapshots[epoch] = {k: v.copy() for k, v in params.items()}
        return scripted.get(epoch, 0.60)

    config = TrainConfig(early_stop_patience=10, max_epochs=50, **TINY)
    result = train(config, _samples(100), SampleSet.empty(4, 2), validator=validator,
                   progress=False)
    assert len(result.reports) == 12, f"expected 12 epochs, ran {len(result.reports)}"
    assert result.stopped_early
    assert result.best_epoch == 2 and result.best_accuracy == pytest.approx(0.8)
    assert result.checkpoint.epoch == 2
    for name, value in snapshots[2].items():
        np.testing.assert_array_equal(result.checkpoint.params[name], value)


def test_equal_accuracy_is_not_improvement():
    """ties with the best accuracy count towards patience"""
    config = TrainConfig(early_stop_patience=2, max_epochs=10, **TINY)
    result = train(config, _samples(60), SampleSet.empty(4, 2),
                   validator=lambda e, p: 0.5, progress=False)
    assert len(result.reports) == 3 and result.best_epoch == 1


def test_single_epoch():
    """max_epochs 1 runs exactly one epoch"""
    config = TrainConfig(max_epochs=1, **TINY)
    result = train(config, _samples(80), _samples(20, seed=1), progress=False)
    assert len(result.reports) == 1 and result.best_epoch == 1
    assert not result.stopped_early


@pytest.mark.parametrize("model", ["mlp", "lstm"])
def test_training_is_deterministic(tmp_path, model):
    """same seed and data give byte-identical checkpoints and metrics"""
    config = TrainConfig(model=model, max_epochs=2, undersample=True, seed=3, **TINY)
    outputs = []
    for run in ("a", "b"):
        result = train(config, _samples(120), _samples(30, seed=1), progress=False)
        save_checkpoint(tmp_path / run / "model.ckpt", result.checkpoint)
        write_metrics(result.reports, tmp_path / run / "metrics.jsonl")
        outputs.append(((tmp_path / run / "model.ckpt").read_bytes(),
                        (tmp_path / run / "metrics.jsonl").read_text()))
    assert outputs[0] == outputs[1]


def test_adaptive_weights_follow_validation():
    """epoch 1 weighs classes by inverse training share, later epochs by inverse class recall"""
    config = TrainConfig(loss="adaptive", max_epochs=3, early_stop_patience=5, **TINY)
    train_set = _samples(150)
    result = train(config, train_set, _samples(60, seed=2), progress=False)
    shares = np.bincount(train_set.labels, minlength=3) / len(train_set)
    np.testing.assert_allclose(result.reports[0].loss_weights, adaptive_weights(shares))
    expected = adaptive_weights(result.reports[0].class_accuracy)
    np.testing.assert_allclose(result.reports[1].loss_weights, expected)


def test_adaptive_seed_favours_rare_classes():
    """a 1:8:1 training split starts the minority classes at eight times the majority weight"""
    labels = np.array([0] * 10 + [1] * 80 + [2] * 10)
    spec = TrainConfig(loss="adaptive").loss_spec(labels)
    np.testing.assert_allclose(spec_adaptive_weights(spec), [8 / 17, 1 / 17, 8 / 17])
    assert TrainConfig(loss="adaptive").loss_spec().accuracies is None


def test_sensitive_counts_from_training_split():
    """sensitive loss is parameterised by training class counts"""
    train_set = _samples(100)
    config = TrainConfig(loss="sensitive", max_epochs=1, **TINY)
    result = train(config, train_set, _samples(20, seed=1), progress=False)
    counts = np.bincount(train_set.labels, minlength=3).tolist()
    assert list(result.loss_spec.class_counts) == counts
    assert result.checkpoint.meta["loss"]["class_counts"] == counts


def test_evaluate_matches_validation():
    """re-evaluating the best checkpoint reproduces its validation accuracy"""
    val_set = _samples(40, seed=1)
    for scope in ("sample", "global"):
        config = TrainConfig(max_epochs=2, normalization_scope=scope, **TINY)
        result = train(config, _samples(120), val_set, progress=False)
        assert evaluate_checkpoint(result.checkpoint, val_set).accuracy == \
            pytest.approx(result.best_accuracy)


def test_empty_splits():
    config = TrainConfig(max_epochs=1, **TINY)
    with pytest.raises(SplitError):
        train(config, SampleSet.empty(4, 2), _samples(10), progress=False)
    with pytest.raises(SplitError):
        train(config, _samples(10), SampleSet.empty(4, 2), progress=False)


def test_config_validation():
    """invalid training settings are rejected on construction"""
    for bad in (dict(batch_size=0), dict(early_stop_patience=0), dict(learning_rate=0.0),
                dict(loss="hinge"), dict(model="cnn"), dict(class_weights=(1.0, 0.0, 1.0)),
                dict(normalization_scope="batch"), dict(undersample_mode="smote")):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_config_file(tmp_path):
    """config files accept aliases, tuples and on/off switches"""
    path = tmp_path / "train.cfg"
    path.write_text("model = lstm\nlambda = 1.5  # focal\npatience = 3\n"
                    "mlp_hidden = 8,8\nundersample = on\n")
    config = TrainConfig.from_file(path, {"seed": 5, "loss": None})
    assert config.model == "lstm" and config.focal_lambda == 1.5
    assert config.early_stop_patience == 3 and config.mlp_hidden == (8, 8)
    assert config.undersample and config.seed == 5 and config.loss == "plain"


def test_config_unknown_key(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("dropout = 0.5\n")
    with pytest.raises(ConfigError):
        TrainConfig.from_file(path)


def test_run_grid(tmp_path):
    """every model x loss pair gets a checkpoint and a metrics file"""
    config = TrainConfig(max_epochs=1, **TINY)
    rows = run_grid(config, _samples(80), _samples(20, seed=1), tmp_path,
                    models=("mlp", "lstm"), losses=("plain", "focal"), progress=False)
    assert [(r["model"], r["loss"]) for r in rows] == [
        ("mlp", "plain"), ("mlp", "focal"), ("lstm", "plain"), ("lstm", "focal")]
    for row in rows:
        assert (tmp_path / f"{row['model']}_{row['loss']}" / "model.ckpt").exists()
        lines = (tmp_path / f"{row['model']}_{row['loss']}" / "metrics.jsonl").read_text()
        assert len(lines.splitlines()) == row["epochs_run"] == 1


@pytest.mark.slow
def test_mlp_learns_separable_data():
    """a separable problem reaches high validation accuracy"""
    config = TrainConfig(normalize=False, max_epochs=20, early_stop_patience=5,
                         mlp_hidden=(16,), batch_size=64, learning_rate=0.01)
    result = train(config, _samples(2000), _samples(400, seed=9), progress=False)
    assert result.best_accuracy > 0.9, f"accuracy only {result.best_accuracy:.3f}"


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
