import json

import pytest

from mltp import config as C
from mltp.errors import ConfigError


def test_defaults_mirror_first_profile():
    cfg = C.from_dict({})
    assert (cfg.batch_size, cfg.epochs, cfg.optimizer.kind, cfg.optimizer.lr) == (128, 150, "adam", 1e-3)
    assert cfg.optimizer.schedule == [[50, 0.1], [100, 0.1]]
    assert (cfg.alpha.mean, cfg.alpha.std, cfg.objective.eta) == (0.001, 0.001, 1.0)
    assert cfg.seeds == [0, 1, 2]


def test_second_profile():
    cfg = C.from_dict({"profile": "momentum90"})
    assert (cfg.epochs, cfg.optimizer.kind, cfg.optimizer.lr, cfg.optimizer.momentum) == (90, "momentum", 0.05, 0.9)
    assert cfg.optimizer.schedule == [[30, 0.1], [60, 0.1]]
    assert (cfg.alpha.mean, cfg.objective.eta, cfg.objective.beta, cfg.init) == (0.01, 0.5, 1e-5, "kaiming")


def test_user_values_override_profile():
    cfg = C.from_dict({"profile": "momentum90", "optimizer": {"lr": 0.1}})
    assert cfg.optimizer.lr == 0.1 and cfg.optimizer.kind == "momentum"


@pytest.mark.parametrize("doc", [
    {"epoch": 3},
    {"optimizer": {"learning_rate": 0.1}},
    {"data": {"augment": {"rotate": True}}},
    {"network": {"layers": [{"kind": "fc", "units": 3, "width": 2}]}},
])
def test_unknown_keys_are_errors(doc):
    with pytest.raises(ConfigError, match="unknown"):
        C.from_dict(doc)


@pytest.mark.parametrize("doc", [
    {"profile": "bogus"},
    {"precision": 16},
    {"objective": {"variant": "maml"}},
    {"optimizer": {"schedule": [[50, 0.1], [40, 0.1]]}},
    {"network": {"num_classes": 3}},
    {"data": {"sampler": "random"}},
    {"batch_size": 1, "objective": {"variant": "mltp_fo"}},
    {"optimizer": "adam"},
])
def test_invalid_values_are_errors(doc):
    with pytest.raises(ConfigError):
        C.from_dict(doc)


def test_bad_json_and_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        C.loads("{not json")
    with pytest.raises(ConfigError):
        C.load(tmp_path / "missing.json")


@pytest.mark.parametrize("doc", [{}, {"profile": "momentum90"},
                                 {"network": {"preset": "cnet1", "width": 0.05,
                                              "input_shape": [1, 8, 8]},
                                  "objective": {"variant": "mltp_conv", "mask": [0]}}])
def test_resolved_config_is_a_fixed_point(doc):
    cfg = C.from_dict(doc)
    again = C.loads(cfg.dumps())
    assert again == cfg
    assert again.dumps() == cfg.dumps()


def test_overrides():
    cfg = C.apply_overrides(C.from_dict({}), seed=7, out="x", deterministic=True, precision=64)
    assert (cfg.seeds, cfg.out_dir, cfg.deterministic, cfg.precision) == ([7], "x", True, 64)


def test_preset_network():
    cfg = C.from_dict({"network": {"preset": "cnet2", "width": 1 / 64, "input_shape": [3, 8, 8],
                                   "num_classes": 10, "name": "c2"}})
    spec = cfg.network_spec()
    assert spec.name == "c2" and [l.kind for l in spec.layers].count("conv") == 2


def test_dump_is_json():
    data = json.loads(C.from_dict({}).dumps())
    assert data["profile"] == "adam150"
