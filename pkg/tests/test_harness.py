import csv
import json
import math

import numpy as np
import pytest

from apforge.archive import ChecksumError
from apforge.attacks import AttackConfig
from apforge.datasets import LabeledDataset, PerturbationSet
from apforge.defenses import DefenseConfig
from apforge.harness import (
    CSV_COLUMNS,
    ExperimentRecord,
    TrainConfig,
    cache_path,
    emit_report,
    evaluate,
    get_perturbations,
    load_data,
    load_records,
    run_experiment,
    sweep,
    train_model,
)
from apforge.numerics import init_model, zero_model

TAG = "synthetic:per_class=8,test_per_class=4,hw=8,classes=4"
QUICK = TrainConfig(epochs=2, batch_size=16)


@pytest.fixture
def cache(tmp_path, monkeypatch):
    monkeypatch.delenv("APFORGE_CACHE", raising=False)
    return tmp_path / "cache"


def test_train_config_invariants():
    for kw in (dict(epochs=0), dict(batch_size=0), dict(lr=-1.0)):
        with pytest.raises(ValueError):
            TrainConfig(**kw)
    cfg = TrainConfig(lr=0.1, lr_decay_every=10, lr_decay_factor=0.5)
    assert [cfg.lr_at(e) for e in (0, 9, 10, 25)] == [0.1, 0.1, 0.05, 0.025]


def test_evaluate_examples():
    m = zero_model(10, (3, 8, 8), (4, 8, 8))
    m.params["fc.b"][3] = 1.0
    test = LabeledDataset(np.zeros((20, 3, 8, 8)), np.repeat(np.arange(10), 2), 10)
    assert evaluate(m, test) == pytest.approx(0.10)
    dup = LabeledDataset(np.concatenate([test.images] * 2), np.concatenate([test.labels] * 2), 10)
    assert evaluate(m, dup) == evaluate(m, test)
    with pytest.raises(ValueError):
        evaluate(m, LabeledDataset(np.zeros((0, 3, 8, 8)), np.zeros(0, int), 10))


def test_evaluate_ties_to_lower_class():
    m = zero_model(3, (3, 8, 8), (4, 8, 8))
    test = LabeledDataset(np.zeros((3, 3, 8, 8)), np.array([0, 1, 2]), 3)
    assert evaluate(m, test) == pytest.approx(1 / 3)


def test_evaluate_matches_confusion_matrix():
    rng = np.random.default_rng(0)
    m = init_model(4, (3, 8, 8), (4, 8, 8), seed=3)
    test = LabeledDataset(rng.random((20, 3, 8, 8)), rng.integers(0, 4, 20), 4)
    from apforge.numerics import forward

    pred = forward(m, test.images).argmax(axis=1)
    conf = np.zeros((4, 4), int)
    for t, p in zip(test.labels, pred):
        conf[t, p] += 1
    assert evaluate(m, test) == pytest.approx(np.trace(conf) / 20)


def test_train_lr_zero_keeps_params():
    train, test = load_data(TAG)
    model, hist, _ = train_model(train, DefenseConfig(), TrainConfig(epochs=3, lr=0.0, batch_size=16), test)
    ref = init_model(4, (3, 8, 8), seed=0)
    for k in ref.params:
        assert np.array_equal(model.params[k], ref.params[k])
    assert len({round(h[2], 9) for h in hist}) == 1
    assert np.allclose([h[0] for h in hist], hist[0][0], rtol=1e-5)


@pytest.mark.parametrize("kind", ["None", "Standard", "CutOut", "MixUp", "CutMix", "Gray", "JPEG", "BDR",
                                  "Gaussian", "ULite", "UMax", "AT"])
def test_train_deterministic_every_defense(kind):
    train, test = load_data(TAG)
    d = DefenseConfig(kind, at_steps=2, umax_k=2)
    a, ha, _ = train_model(train, d, QUICK, test)
    b, hb, _ = train_model(train, d, QUICK, test)
    assert ha == hb and len(ha) == 2
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()


def test_conflicting_defenses_rejected():
    train, _ = load_data(TAG)
    for stack in ([DefenseConfig("AT"), DefenseConfig("UMax")], [DefenseConfig("Gray"), DefenseConfig("JPEG")],
                  [DefenseConfig("MixUp"), DefenseConfig("CutMix")]):
        with pytest.raises(ValueError, match="conflicting|at most one"):
            train_model(train, stack, QUICK)


def test_compatible_stack_runs():
    train, test = load_data(TAG)
    _, hist, imgs = train_model(train, [DefenseConfig("Gray"), DefenseConfig("CutOut")], QUICK, test)
    assert len(hist) == 2
    assert np.array_equal(imgs[:, 0], imgs[:, 1])


def test_run_experiment_clean_equals_baseline(cache):
    rec = run_experiment(None, DefenseConfig(), 1.0, QUICK, TAG, cache)
    train, test = load_data(TAG)
    model, hist, _ = train_model(train, DefenseConfig(), QUICK, test)
    assert rec.attack_name == "None" and rec.clean_test_acc == evaluate(model, test)
    assert rec.history == [tuple(h) for h in hist]
    assert rec.history[-1][2] == rec.clean_test_acc


def test_record_invariants():
    with pytest.raises(ValueError):
        ExperimentRecord("EM", "None", 1.0, 0.03, 1.2, 0.5, 1, 0, 0.0, [(1, 1, 1)])
    with pytest.raises(ValueError):
        ExperimentRecord("EM", "None", 1.0, 0.03, 0.2, 0.5, 2, 0, 0.0, [(1, 1, 1)])


def test_cache_hit_identical_bytes(cache):
    train, _ = load_data(TAG)
    cfg = AttackConfig("AR")
    first = get_perturbations(cfg, train, TAG, cache)
    path = cache_path(cfg, TAG, cache)
    raw = path.read_bytes()
    second = get_perturbations(cfg, train, TAG, cache)
    assert path.read_bytes() == raw and first.deltas.tobytes() == second.deltas.tobytes()


def test_cache_corruption_regenerates(cache):
    train, _ = load_data(TAG)
    cfg = AttackConfig("LSP", patch_size=4)
    good = get_perturbations(cfg, train, TAG, cache)
    path = cache_path(cfg, TAG, cache)
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0x55
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        PerturbationSet.load(path)
    again = get_perturbations(cfg, train, TAG, cache)
    assert again.deltas.tobytes() == good.deltas.tobytes()
    PerturbationSet.load(path)


def test_cache_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("APFORGE_CACHE", str(tmp_path / "env"))
    train, _ = load_data(TAG)
    get_perturbations(AttackConfig("OPS"), train, TAG, tmp_path / "ignored")
    assert list((tmp_path / "env").glob("OPS-*.apbt"))
    assert not (tmp_path / "ignored").exists()


def test_sweep_order_grid_of_one_and_failures(cache):
    one = sweep([AttackConfig("OPS")], [DefenseConfig()], [1.0], QUICK, TAG, cache)
    direct = run_experiment(AttackConfig("OPS"), DefenseConfig(), 1.0, QUICK, TAG, cache)
    assert [r.key() for r in one.records] == [direct.key()]
    res = sweep([AttackConfig("OPS"), AttackConfig("LSP", patch_size=3)], [DefenseConfig(), DefenseConfig("Gray")],
                [0.5, 1.0], QUICK, TAG, cache)
    assert [(r.attack_name, r.defense_name, r.ratio) for r in res.records] == [
        ("OPS", "None", 0.5), ("OPS", "None", 1.0), ("OPS", "Gray", 0.5), ("OPS", "Gray", 1.0)]
    assert len(res.failures) == 4 and "OPS" in res.summary
    with pytest.raises(ValueError):
        sweep([], [DefenseConfig()], [1.0], QUICK, TAG, cache)


def _record(i):
    hist = [(1.0 / (e + 1), 0.1 * e, 0.05 * e) for e in range(3)]
    return ExperimentRecord("EM", ["None", "Gray", "JPEG"][i % 3], 0.2 * (i % 5 + 1), 8 / 255, 0.123456,
                            0.9, 3, i, 1.5, hist)


def test_emit_report_one_record(tmp_path):
    files = emit_report([_record(0)], tmp_path)
    rows = list(csv.reader((tmp_path / "results.csv").open()))
    assert rows[0] == list(CSV_COLUMNS) and len(rows) == 2
    assert rows[1][4] == "0.1235" and rows[1][3] == "0.0314"
    dat = (tmp_path / "EM_None.dat").read_text().splitlines()
    assert dat == ["1 0.0000 0.0000", "2 0.1000 0.0500", "3 0.2000 0.1000"]
    assert len(files) == 3


def test_emit_report_round_trip_and_count(tmp_path):
    recs = [_record(i) for i in range(12)]
    emit_report(recs, tmp_path)
    assert load_records(tmp_path / "results.json") == recs
    rows = list(csv.reader((tmp_path / "results.csv").open()))
    assert len(rows) == 13
    assert len(list(tmp_path.glob("*.dat"))) == 12


def test_emit_report_errors(tmp_path):
    with pytest.raises(ValueError):
        emit_report([], tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_report([_record(0)], blocker / "sub")


def test_load_data_tags():
    train, test = load_data(TAG)
    assert train.images.shape == (32, 3, 8, 8) and len(test) == 16
    for bad in ("mnist", "synthetic:foo=1", "cifar10"):
        with pytest.raises(ValueError):
            load_data(bad)
