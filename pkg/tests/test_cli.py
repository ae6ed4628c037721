import csv
import json

import pytest

from apforge.cli import apply_override, load_config, main

TAG = "synthetic:per_class=8,test_per_class=4,hw=8,classes=4"


@pytest.fixture
def env(tmp_path, monkeypatch):
    monkeypatch.setenv("APFORGE_CACHE", str(tmp_path / "cache"))
    return tmp_path


def write(path, obj):
    path.write_text(json.dumps(obj))
    return path


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 5 and "FAIL" not in out


def test_unknown_command_and_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["explode"])
    assert exc.value.code == 1
    assert "usage" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["selftest", "--bogus"])
    assert exc.value.code == 1


def test_bad_config_is_validation_error(env, capsys):
    bad = env / "bad.json"
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad)]) == 1
    assert main(["train", "--config", str(env / "missing.json")]) == 1
    cfg = write(env / "c.json", {"data": TAG, "attack": {"attack": "NOPE"}})
    assert main(["train", "--config", str(cfg)]) == 1
    cfg = write(env / "d.json", {"data": TAG, "colour": 1})
    assert main(["train", "--config", str(cfg)]) == 1
    assert main(["selftest", "--set", "novalue"]) == 1


def test_overrides():
    cfg = {"train": {"epochs": 3}}
    apply_override(cfg, "train.epochs=5")
    apply_override(cfg, "attack.attack=LSP")
    apply_override(cfg, "ratio=0.5")
    assert cfg == {"train": {"epochs": 5}, "attack": {"attack": "LSP"}, "ratio": 0.5}


def test_seed_flag(tmp_path):
    p = write(tmp_path / "c.json", {"attack": {"attack": "AR", "seed": 4}, "train": {"seed": 4}})
    assert load_config(p)["attack"]["seed"] == 4
    cfg = load_config(p, seed=9)
    assert cfg["attack"]["seed"] == 9 and cfg["train"]["seed"] == 9


def test_poison_reuses_cache(env):
    cfg = write(env / "p.json", {"data": TAG, "attack": {"attack": "LSP", "patch_size": 4}})
    assert main(["poison", "--config", str(cfg), "--out", str(env / "o1")]) == 0
    cached = sorted((env / "cache").glob("*.apbt"))
    stamp = cached[0].stat().st_mtime_ns
    assert main(["poison", "--config", str(cfg), "--out", str(env / "o2")]) == 0
    assert cached[0].stat().st_mtime_ns == stamp
    assert (env / "o1" / "LSP.apbt").read_bytes() == (env / "o2" / "LSP.apbt").read_bytes()


def test_train_eval_and_report(env, capsys):
    cfg = write(env / "t.json", {"data": TAG, "attack": {"attack": "OPS"}, "defense": {"kind": "Gray"},
                                 "train": {"epochs": 2, "batch_size": 16}})
    assert main(["train", "--config", str(cfg), "--out", str(env / "o")]) == 0
    assert (env / "o" / "results.csv").exists() and (env / "o" / "OPS_Gray.dat").exists()
    capsys.readouterr()
    assert main(["eval", "--config", str(cfg), "--out", str(env / "e")]) == 0
    acc = float(capsys.readouterr().out.strip())
    assert 0 <= acc <= 1
    (env / "o" / "results.csv").unlink()
    assert main(["report", "--out", str(env / "o")]) == 0
    assert (env / "o" / "results.csv").exists()
    assert main(["report", "--out", str(env / "nothing")]) == 1


def test_sweep_2x2(env):
    cfg = write(env / "s.json", {"data": TAG, "attacks": [{"attack": "OPS"}, {"attack": "AR"}],
                                 "defenses": [{"kind": "None"}, {"kind": "BDR"}], "ratios": [1.0],
                                 "train": {"epochs": 1, "batch_size": 16}})
    assert main(["sweep", "--config", str(cfg), "--out", str(env / "s")]) == 0
    rows = list(csv.reader((env / "s" / "results.csv").open()))
    assert len(rows) == 5


def test_sweep_failure_exit_2(env):
    cfg = write(env / "s.json", {"data": TAG, "attacks": [{"attack": "LSP", "patch_size": 3}],
                                 "defenses": ["None"], "train": {"epochs": 1}})
    assert main(["sweep", "--config", str(cfg), "--out", str(env / "s")]) == 2
