import json
import math

import pytest

import glad


def test_harmonic_mean():
    assert abs(glad.harmonic_mean(84.47, 74.22) - 79.01) <= 0.005
    assert abs(glad.harmonic_mean(85.05, 76.74) - 80.68) <= 0.005
    assert glad.harmonic_mean(0.0, 0.0) == 0.0
    with pytest.raises(glad.ContractError):
        glad.harmonic_mean(-1.0, 3.0)


def test_gradient_pieces():
    eps = glad.sam_perturbation([3.0, 4.0], 0.1)
    assert eps == pytest.approx([0.06, 0.08], abs=1e-15)
    assert glad.sam_perturbation([0.0, 0.0], 0.1) is None

    out, projected = glad.project_conflict([1.0, 0.0], [-1.0, 1.0])
    assert projected
    assert abs(out[0]) < 1e-11 and out[1] == 1.0
    same, projected = glad.project_conflict([1.0, 0.0], [2.0, 1.0])
    assert not projected and same == [2.0, 1.0]

    assert glad.fuse_gradients([1.0, 2.0], [-3.0, 4.0], 0.5) == [-1.0, 3.0]
    with pytest.raises(glad.ConfigError):
        glad.fuse_gradients([1.0], [1.0], 1.5)
    assert glad.cosine_lr(50, 100, 0.2) == pytest.approx(0.1)


def test_lora_merge():
    layer = glad.LoraLinear(6, 5, rank=2, gamma=2.0, seed=3)
    assert layer.forward([[0.1] * 6], use_lora=True) == layer.forward([[0.1] * 6], use_lora=False)
    layer.randomize_b(0.5, seed=4)
    x = [[0.3, -0.2, 0.5, 1.0, -0.7, 0.1], [0.0, 0.4, -0.1, 0.2, 0.9, -0.5]]
    before = layer.forward(x)
    layer.merge()
    assert layer.merged
    after = layer.forward(x)
    for r0, r1 in zip(before, after):
        for a, b in zip(r0, r1):
            assert abs(a - b) <= 1e-8
    with pytest.raises(glad.ContractError):
        layer.merge()
    with pytest.raises(glad.ConfigError):
        glad.LoraLinear(4, 3, rank=2)


def test_config_and_task():
    keys = glad.config_keys()
    assert keys[0] == "task.d_in" and "gradreg.alpha" in keys
    cfg = glad.default_config({"train.epochs": 3, "flags.use_kl": False})
    assert cfg["train.epochs"] == "3" and cfg["flags.use_kl"] == "false"
    assert glad.config_hash() == glad.config_hash({"label": "other"})
    assert glad.config_hash() != glad.config_hash({"gradreg.rho": 0.2})
    with pytest.raises(glad.ConfigError):
        glad.default_config({"no.such.key": 1})

    task = glad.generate_task({"task.test_per_class": 5}, seed=2)
    assert len(task["train"]["labels"]) == 160
    assert len(task["test_base"]["x"]) == 50
    assert not set(task["base_ids"]) & set(task["novel_ids"])
    assert task == glad.generate_task({"task.test_per_class": 5}, seed=2)


def test_run_and_render(tmp_path):
    overrides = {"seeds": [1], "train.epochs": 2, "task.test_per_class": 10}
    rec = glad.run(overrides, tmp_path)
    assert rec["label"] == "run"
    m = rec["median"]
    assert 0.0 <= m["base_acc"] <= 100.0
    assert math.isclose(m["hm"], glad.harmonic_mean(m["base_acc"], m["novel_acc"]), rel_tol=1e-12)
    assert (tmp_path / "run_run.json").exists()
    assert json.loads((tmp_path / "run_run.json").read_text())["config_hash"] == rec["config_hash"]

    table = glad.render_records([rec], "csv")
    assert table.splitlines()[0] == "label,config_hash,seeds,base_acc,novel_acc,hm,flatness,failed"
    md = glad.render_records([rec])
    assert md.startswith("| Row |")
