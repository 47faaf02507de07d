import json

import numpy as np
import pytest

from tcinet import io
from tcinet.errors import ValidationError
from tcinet.features import featurize_connections
from tcinet.sem import FitConfig, fit
from tcinet.synth import GenConfig, generate


@pytest.fixture(scope="module")
def portfolio():
    return generate(GenConfig(n_entities=60, n_policies=90, n_connections=200, claim_rate=0.3, seed=2))


def test_dataset_roundtrip(tmp_path, portfolio):
    g, truth = portfolio
    io.write_dataset(g, tmp_path, truth)
    back = io.read_dataset(tmp_path)
    assert back.equals(g)
    assert io.fingerprint(back) == io.fingerprint(g)
    side = io.read_truth(tmp_path)
    np.testing.assert_array_equal(side["actual_claim"], truth.z)
    assert json.loads((tmp_path / io.TRUTH_PARAMS).read_text())["psi"] == truth.params.psi


def test_tau_override(tmp_path, portfolio):
    g, truth = portfolio
    io.write_dataset(g, tmp_path)
    (tmp_path / io.DATASET_CFG).unlink()
    with pytest.raises(ValidationError, match="tau"):
        io.read_dataset(tmp_path)
    assert io.read_dataset(tmp_path, tau=g.tau).equals(g)


def test_missing_directory():
    with pytest.raises(FileNotFoundError):
        io.read_dataset("/nonexistent/tcinet")


def test_bad_dates_are_schema_errors(tmp_path, portfolio):
    g, _ = portfolio
    io.write_dataset(g, tmp_path)
    pol = (tmp_path / io.POLICIES).read_text().splitlines()
    first = pol[1].split(",")
    first[2] = "yesterday"
    pol[1] = ",".join(first)
    (tmp_path / io.POLICIES).write_text("\n".join(pol) + "\n")
    with pytest.raises(ValidationError):
        io.read_dataset(tmp_path)


def test_config_parsing(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\niterations = 50\nmh-steps=20   # trailing\n\n")
    assert io.read_config(p) == {"iterations": "50", "mh_steps": "20"}
    p.write_text("iterations 50\n")
    with pytest.raises(ValidationError):
        io.read_config(p)


def test_model_roundtrip(tmp_path, portfolio):
    g, _ = portfolio
    result = fit(featurize_connections(g), FitConfig(iterations=2, seed=3))
    path = tmp_path / "model.json"
    io.save_model(result, path, io.fingerprint(g))
    loaded, doc = io.load_model(path)
    np.testing.assert_array_equal(loaded.params.vector(), result.params.vector())
    np.testing.assert_array_equal(loaded.latents.P, result.latents.P)
    assert loaded.columns == result.columns
    assert loaded.config == result.config
    assert doc["dataset_fingerprint"] == io.fingerprint(g)
    # serialisation is canonical
    assert io.dumps_model(loaded, doc["dataset_fingerprint"]) == path.read_text()


def test_model_schema_version(tmp_path):
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"schema_version": 99}))
    with pytest.raises(ValidationError, match="schema"):
        io.load_model(p)
    p.write_text("{not json")
    with pytest.raises(ValidationError):
        io.load_model(p)
