import json

import numpy as np
import pytest

from dappo import cli, report
from dappo.config import ExperimentConfig
from dappo.errors import ConfigurationError


def write(tmp_path, doc):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(doc))
    return p


def test_defaults_resolve():
    cfg = ExperimentConfig.load()
    assert cfg.robot == "quad" and cfg.seeds == [0, 1, 2]
    assert sum(n for _, n in cfg.stages) == 250
    assert cfg.spec.max_steps == 1000


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigurationError, match="ppo.epoch"):
        ExperimentConfig.load(write(tmp_path, {"ppo": {"epoch": 3}}))


def test_bad_stage_rejected(tmp_path):
    with pytest.raises(ConfigurationError):
        ExperimentConfig.load(write(tmp_path, {"stages": [["V", 3]]}))


def test_flags_override(tmp_path):
    cfg = ExperimentConfig.load(write(tmp_path, {"robot_spec": {"max_steps": 50}}), robot="hex", seed=4, out="x")
    assert cfg.robot == "hex" and cfg.seeds == [4] and cfg.out == "x"
    assert cfg.spec.max_steps == 50 and cfg.spec.n_legs == 6


def test_hash_depends_on_seed_not_out():
    a = ExperimentConfig.load(out="a")
    b = ExperimentConfig.load(out="b")
    assert a.hash(0) == b.hash(0)
    assert len({a.hash(s) for s in (0, 1, 2)}) == 3


def test_missing_artifact_names_producer(tmp_path, capsys):
    assert cli.main(["evaluate", "--out", str(tmp_path), "--seed", "0"]) == 2
    assert "train-dappo" in capsys.readouterr().err
    assert cli.main(["collect", "--out", str(tmp_path), "--seed", "0"]) == 2
    assert "train-expert" in capsys.readouterr().err


def test_compare_identical_policies():
    x = np.array([1.0, 2.0, -0.5])
    c = report.compare(x, x)
    assert c["improvement_pct"] == 0.0
    assert c["wins"] == 0 and c["ties"] == 3 and c["win_rate"] == 0.0


def test_compare_improvement_uses_magnitude():
    c = report.compare(np.array([-1.0, -1.0]), np.array([-2.0, -2.0]))
    assert c["improvement_pct"] == pytest.approx(50.0)
    assert c["wins"] == 2


def test_class_labels_cover_all_classes():
    labels = [report.class_label(c, 4) for c in range(33)]
    assert labels[0] == "healthy" and len(set(labels)) == 33
    assert labels[1] == "L0:jam"


def test_svg_reproducible(tmp_path):
    for name in ("a.svg", "b.svg"):
        report.per_class_bars(tmp_path / name, ["x", "y"], [1.0, 2.0], [1.5, 0.5], "t")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_csv_metadata_round_trip(tmp_path):
    report.write_csv(tmp_path / "m.csv", ("a", "b"), [[1, 0.1], [2, float("nan")]], {"config_hash": "h"})
    assert (tmp_path / "m.csv").read_text().startswith("# config_hash=h\n")
    assert report.read_csv(tmp_path / "m.csv")[0] == {"a": "1", "b": "0.1"}
