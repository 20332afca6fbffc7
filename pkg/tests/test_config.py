import numpy as np
import pytest

from evenet.config import (ConfigError, floats, format_kv, ints, parse_kv, run_spec_from_kv, run_spec_to_kv,
                           train_config_from_kv, train_config_to_kv)
from evenet.phantom import default_spec


def test_parse_kv():
    kv = parse_kv("# comment\n a = 1 \n\nb.c = x y # trailing\n")
    assert kv == {"a": "1", "b.c": "x y"}
    assert parse_kv(format_kv(kv)) == kv


@pytest.mark.parametrize("text", ["novalue", " = 3", "a = 1\na = 2"])
def test_parse_kv_errors(text):
    with pytest.raises(ConfigError):
        parse_kv(text)


def test_number_lists():
    assert floats("1 2.5", 2) == (1.0, 2.5)
    assert ints("3 4") == (3, 4)
    with pytest.raises(ConfigError):
        floats("1 2", 3)
    with pytest.raises(ConfigError):
        ints("1.5")


def test_train_config_roundtrip():
    tcfg, scfg = train_config_from_kv({"epochs": "7", "lambda": "0.5", "hidden": "8 4", "seed": "3"})
    assert tcfg.epochs == 7 and tcfg.loss.lam == 0.5 and scfg.hidden == (8, 4) and scfg.seed == 3
    assert tcfg.lr_decay_factor == 0.95 and tcfg.loss.lam_kl == 0.4
    assert train_config_from_kv(train_config_to_kv(tcfg, scfg)) == (tcfg, scfg)


@pytest.mark.parametrize("kv", [{"epoch": "3"}, {"epochs": "x"}, {"epochs": "0"}, {"lr_decay_factor": "1.5"}])
def test_train_config_errors(kv):
    with pytest.raises(ConfigError):
        train_config_from_kv(kv)


def test_run_spec_defaults():
    spec = run_spec_from_kv({})
    assert spec.base == default_spec() and spec.n_phantoms == 10 and spec.split == (0.6, 0.2, 0.2)
    assert spec.protocol.n_measurements == 35


def test_run_spec_roundtrip():
    kv = {
        "dims": "16 16 8", "seed": "5", "n_phantoms": "4", "protocol.n_directions": "12", "protocol.sigma": "0.05",
        "jitter.center": "0.5", "lesion.radius": "2.5", "lesion.shape": "box",
        "region.0.name": "bg", "region.0.shape": "fill",
        "region.1.name": "wm", "region.1.radii": "0.3 0.3 0.3", "region.1.eigenvalues": "0.0017 0.0003 0.0003",
        "lesion.region": "wm",
    }
    spec = run_spec_from_kv(kv)
    assert spec.seed == 5 and spec.base.dims == (16, 16, 8) and len(spec.base.regions) == 2
    again = run_spec_from_kv(run_spec_to_kv(spec))
    assert run_spec_to_kv(again) == run_spec_to_kv(spec)
    np.testing.assert_array_equal(again.protocol.bvecs, spec.protocol.bvecs)
    lesion = spec.lesion_for(spec.base)
    assert lesion.radius == 2.5 and lesion.shape == "box"
    np.testing.assert_allclose(lesion.center, (7.5, 7.5, 3.5))


@pytest.mark.parametrize("kv", [
    {"colour": "red"},
    {"dims": "1 2"},
    {"n_phantoms": "2"},
    {"region.1.name": "x"},
    {"region.0.shape": "fill"},
    {"lesion.shape": "star"},
    {"protocol.n_directions": "3"},
])
def test_run_spec_errors(kv):
    with pytest.raises(ConfigError):
        run_spec_from_kv(kv)
