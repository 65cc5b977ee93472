import json
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from marsseg.config import (
    ConfigError,
    ExperimentConfig,
    RunManifest,
    apply_override,
    dump_config,
    load_config,
    make_run_dir,
    read_run_manifest,
)
from marsseg.eval import SweepRecord, SweepResult
from marsseg.replication import Replication

ROOT = Path(__file__).resolve().parents[1]


def test_defaults_roundtrip_through_yaml(tmp_path):
    cfg = ExperimentConfig()
    (tmp_path / "c.yaml").write_text(dump_config(cfg))
    again = load_config(tmp_path / "c.yaml")
    assert again == cfg
    assert again.hash() == cfg.hash()


def test_shipped_configs_load():
    for path in sorted((ROOT / "configs").glob("*.yaml")):
        load_config(path)


@pytest.mark.parametrize("text, where", [
    ("finetune: {learning_rate: fast}", "finetune.learning_rate"),
    ("finetune: {batch_size: 2.5}", "finetune.batch_size"),
    ("pretrain: {steps: true}", "pretrain.steps"),
    ("sweep: {fractions: 0.5}", "sweep.fractions"),
    ("sweep: {fractions: [0.0]}", "sweep"),
    ("sweep: {init_modes: [imagenet]}", "sweep"),
    ("model: {encoder: {depth: 3}}", "model.encoder.depth"),
    ("bogus: {}", "bogus"),
    ("- 1", "config"),
])
def test_errors_name_the_field(tmp_path, text, where):
    (tmp_path / "c.yaml").write_text(text)
    with pytest.raises(ConfigError, match=rf"^{where}"):
        load_config(tmp_path / "c.yaml")


def test_missing_and_invalid_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")
    (tmp_path / "bad.yaml").write_text("a: [1,\n")
    with pytest.raises(ConfigError, match="invalid YAML"):
        load_config(tmp_path / "bad.yaml")


def test_overrides():
    cfg = load_config(None, ["finetune.learning_rate=0.01", "sweep.seeds=[3, 4]",
                             "model.atrous.output_size=[64, 64]"])
    assert cfg.finetune.learning_rate == 0.01
    assert cfg.sweep.seeds == (3, 4)
    assert cfg.model.atrous.output_size == (64, 64)
    with pytest.raises(ConfigError):
        apply_override({}, "no_equals_sign")
    with pytest.raises(ConfigError):
        apply_override({"a": 1}, "a.b=2")


@given(st.floats(1e-6, 10, allow_nan=False), st.integers(1, 256))
def test_hash_tracks_content(lr, bs):
    a = load_config(None, [f"finetune.learning_rate={lr!r}", f"finetune.batch_size={bs}"])
    b = load_config(None, [f"finetune.learning_rate={lr!r}", f"finetune.batch_size={bs}"])
    assert a.hash() == b.hash()
    c = load_config(None, [f"finetune.learning_rate={lr * 2!r}", f"finetune.batch_size={bs}"])
    assert c.hash() != a.hash()


def test_run_dir_and_manifest(tmp_path):
    cfg = ExperimentConfig()
    d1 = make_run_dir(tmp_path, "eval", cfg)
    d2 = make_run_dir(tmp_path, "eval", cfg)
    assert d1 != d2 and d1.name.startswith("eval-") and d1.name.endswith(cfg.hash())
    (d1 / "out.csv").write_text("x\n")
    m = RunManifest("eval", ["eval"], cfg.to_dict(), cfg.hash(), 0, True)
    m.finalize(d1)
    got = read_run_manifest(d1)
    assert got["status"] == "ok" and set(got["outputs"]) == {"out.csv"}
    assert json.loads((d1 / "run_manifest.json").read_text())["config_hash"] == cfg.hash()
    with pytest.raises(ConfigError):
        read_run_manifest(tmp_path)


def _records(acc):
    return [SweepRecord(f, s, m, a, (None,) * 6, 1) for (f, s, m), a in acc.items()]


def test_verdict():
    acc = {}
    for s in range(5):
        acc[0.05, s, "pretrained"] = 0.6 if s else 0.4
        acc[0.05, s, "random"] = 0.5
        acc[1.0, s, "pretrained"] = 0.8
        acc[1.0, s, "random"] = 0.82
    v = Replication(SweepResult(_records(acc)), []).verdict()
    assert (v.low, v.high, v.wins, v.seeds) == (0.05, 1.0, 4, 5)
    assert v.margin_low == pytest.approx(0.06) and v.margin_high == pytest.approx(-0.02)
    assert v.passed

    acc[0.05, 1, "pretrained"] = 0.45  # second loss drops wins below 4 of 5
    assert not Replication(SweepResult(_records(acc)), []).verdict().passed


def test_verdict_needs_widening_margin():
    acc = {}
    for s in range(5):
        acc[0.05, s, "pretrained"], acc[0.05, s, "random"] = 0.6, 0.55
        acc[1.0, s, "pretrained"], acc[1.0, s, "random"] = 0.9, 0.8
    v = Replication(SweepResult(_records(acc)), []).verdict()
    assert v.wins == 5 and not v.passed


def test_verdict_ignores_incomplete_pairs():
    acc = {(0.05, 0, "pretrained"): 0.6, (0.05, 1, "random"): 0.5,
           (1.0, 0, "pretrained"): 0.9, (1.0, 0, "random"): 0.9}
    v = Replication(SweepResult(_records(acc)), []).verdict()
    assert v.seeds == 0 and not v.passed


def test_exponent_floats_without_a_dot(tmp_path):
    (tmp_path / "c.yaml").write_text("finetune: {learning_rate: 1e-4}\npretrain: {weight_decay: 5E-5}\n")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.finetune.learning_rate == 1e-4 and cfg.pretrain.weight_decay == 5e-5
