"""Smoke test for the `mbn` extension module.

Build and install it first:

    pip install --no-build-isolation -e crates/py
    python -m pytest python/smoke_test.py
"""

import json

import pytest

import mbn


def small_splits(seed=0):
    return mbn.generate_splits(
        "7:1:1:1", 40, 4, [0.25, 0.35, 0.40, 0.45],
        dim=16, subspace_dim=4, meta=(3, 3), test=(5, 3), seed=seed,
    )


def test_generate_splits():
    train, meta, test = small_splits()
    assert train.group_counts() == [112, 16, 16, 16]
    assert meta.group_counts() == [9, 9, 9, 9]
    assert len(test) == 4 * 5 * 3
    assert train.dim == 16
    assert len(train.features()[0]) == 16
    assert small_splits()[0] == train
    assert small_splits(seed=1)[0] != train


def test_train_and_evaluate(tmp_path):
    train, meta, test = small_splits()
    config = mbn.TrainerConfig("mbn-cos", iterations=20, seed=0)
    config.batch_size = 16
    config.margin_lr = 0.1
    result = mbn.train(train, meta, config)
    assert len(result.losses) == 20
    assert result.margins[0] == 0.15
    assert all(0.0 <= m <= 0.8 for row in result.margin_history for m in row)
    assert result.trace_csv().startswith("iteration")

    report = mbn.evaluate(result.model, test, budget=40)
    assert len(report.accuracies) == 4
    assert json.loads(report.to_json())["average"] == pytest.approx(report.average)

    path = str(tmp_path / "model.txt")
    result.model.save(path)
    assert mbn.Model.load(path) == result.model
    emb = result.model.embed(test)
    assert len(emb) == len(test)
    assert sum(x * x for x in emb[0]) == pytest.approx(1.0)


def test_config_json_round_trip():
    config = mbn.TrainerConfig("arcface", iterations=50)
    text = config.to_json()
    data = json.loads(text)
    data["meta"]["tau"] = 0.3
    again = mbn.TrainerConfig.from_json("arcface", json.dumps(data))
    assert json.loads(again.to_json())["meta"]["tau"] == 0.3
    with pytest.raises(ValueError):
        mbn.TrainerConfig("bogus")


def test_metrics():
    avg, std, ser = mbn.fairness_summary([90.0, 80.0, 85.0, 95.0])
    assert avg == pytest.approx(87.5)
    assert ser == pytest.approx(4.0)
    assert mbn.fairness_summary([100.0, 90.0])[2] is None
    acc, _ = mbn.verification_accuracy([0.9, 0.8, 0.1, 0.2], [True, True, False, False])
    assert acc == 100.0
    with pytest.raises(ValueError):
        mbn.verification_accuracy([0.5], [True])


def test_gradcheck():
    passed, table = mbn.gradcheck(instances=2, meta_states=1)
    assert passed
    assert "meta-gradient/arc" in table
