from pathlib import Path

import pytest
import yaml

from ddpinn import config
from ddpinn.errors import ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
PARTS = str(CONFIGS / "partitions")


def _burgers(**extra):
    return {"problem": {"kind": "burgers"},
            "decomposition": {"type": "cartesian", "nx": 2, "ny": 2, "domain": [[-1, 1], [0, 1]]}, **extra}


def test_minimal_burgers_gets_defaults():
    cfg = config.from_dict(_burgers())
    s = cfg.subdomain(0)
    assert s["learning_rate"] == 8e-4
    assert s["hidden"] == [20] * 5 and s["activation"] == "tanh" and s["scale"] == 10
    assert s["weights"] == {"w_u": 20.0, "w_f": 1.0, "w_i": 20.0, "w_iflux": 20.0, "w_if": 20.0}
    assert cfg.method == "xpinn" and cfg.n_subdomains == 4


@pytest.mark.parametrize("kind,lr", [("navier_stokes", 6e-4), ("heat_inverse", 6e-3)])
def test_problem_learning_rates(kind, lr):
    raw = {"problem": {"kind": kind}, "decomposition": {"nx": 1, "ny": 1}}
    assert config.from_dict(raw).subdomain(0)["learning_rate"] == lr


def test_cpinn_time_split_rejected():
    with pytest.raises(ConfigError) as info:
        config.from_dict(_burgers(method="cpinn"))
    assert info.value.path == "decomposition.ny"
    raw = _burgers(method="cpinn")
    raw["decomposition"]["ny"] = 1
    assert config.from_dict(raw).method == "cpinn"


def test_cpinn_rejected_on_heat_and_polygons():
    with pytest.raises(ConfigError):
        config.from_dict({"problem": {"kind": "heat_inverse"}, "method": "cpinn",
                          "decomposition": {"nx": 2, "ny": 1}})
    with pytest.raises(ConfigError):
        config.from_dict({"problem": {"kind": "navier_stokes"}, "method": "cpinn",
                          "decomposition": {"type": "polygon", "partition": "heat_4.json"}}, base_dir=PARTS)


def test_override_applies_to_one_subdomain_only(tmp_path):
    raw = {"problem": {"kind": "heat_inverse"},
           "decomposition": {"type": "polygon", "partition": str(Path(PARTS) / "synthetic_10.json")},
           "overrides": {7: {"points": {"residual": 800}}}}
    cfg = config.from_dict(raw)
    echo = yaml.safe_load(cfg.echo(tmp_path / "config.yaml"))
    counts = [s["points"]["residual"] for s in echo["resolved"]]
    assert counts[7] == 800
    assert all(c == 3000 for i, c in enumerate(counts) if i != 7)


def test_echo_round_trip(tmp_path):
    cfg = config.parse_config(CONFIGS / "heat_inverse_4.yaml")
    cfg.echo(tmp_path / "config.yaml")
    cfg.base_dir = str(CONFIGS)
    again = config.from_dict(yaml.safe_load((tmp_path / "config.yaml").read_text()), base_dir=CONFIGS)
    assert again == cfg


def test_tampered_echo_rejected(tmp_path):
    cfg = config.from_dict(_burgers())
    raw = yaml.safe_load(cfg.echo())
    raw["resolved"][2]["learning_rate"] = 1.0
    with pytest.raises(ConfigError, match="resolved"):
        config.from_dict(raw)


@pytest.mark.parametrize("patch,path", [
    ({"epochs": -1}, "epochs"),
    ({"bogus": 1}, "bogus"),
    ({"method": "fpinn"}, "method"),
    ({"method": "pinn"}, "method"),
    ({"overrides": {9: {"activation": "tanh"}}}, "overrides.9"),
    ({"defaults": {"activation": "relu"}}, "defaults.activation"),
    ({"defaults": {"weights": {"w_u": -2}}}, "defaults.weights.w_u"),
    ({"transport": {"mode": "mpi"}}, "transport.mode"),
    ({"precision": 16}, "precision"),
])
def test_validation_paths(patch, path):
    with pytest.raises(ConfigError) as info:
        config.from_dict(_burgers(**patch))
    assert info.value.path == path


def test_bad_problem_and_missing_files(tmp_path):
    with pytest.raises(ConfigError) as info:
        config.from_dict({"problem": {"kind": "euler"}, "decomposition": {}})
    assert info.value.path == "problem.kind"
    with pytest.raises(ConfigError):
        config.from_dict({"problem": {"kind": "heat_inverse"},
                          "decomposition": {"type": "polygon", "partition": "nope.json"}}, base_dir=tmp_path)
    with pytest.raises(ConfigError):
        config.parse_config(tmp_path / "missing.yaml")
    (tmp_path / "bad.yaml").write_text("problem: [unclosed")
    with pytest.raises(ConfigError):
        config.parse_config(tmp_path / "bad.yaml")


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.yaml")))
def test_shipped_configs_parse(name):
    cfg = config.parse_config(CONFIGS / name)
    specs, _ = cfg.decompose()
    assert len(specs) == cfg.n_subdomains
