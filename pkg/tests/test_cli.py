import json

import pytest

from lqreplication.cli import EXIT_CONFIG, EXIT_INVARIANT, EXIT_OK, InvariantFailure, dumps, main, run_verify
from lqreplication.config import ConfigError, load_config, parse_config
from lqreplication.weights import make_weight

SCALAR = """
[system]
n = 1
d = 1
A = 0.0
b = 1.0
a = 0.0
T = 1.0

[weight]
kind = "pure-power"
alpha = {alpha}

[payoff]
{payoff}

[simulation]
paths = {paths}
steps = {steps}
seed = 7

[output]
keep = 4
"""

DETERMINISTIC = 'family = "deterministic"\nf0 = 1.0'
LINEAR = 'family = "linear-wiener"\nc0 = 0.0\nC = 1.0'


def write_config(tmp_path, name="run.toml", alpha=0.75, payoff=LINEAR, paths=2000, steps=64):
    path = tmp_path / name
    path.write_text(SCALAR.format(alpha=alpha, payoff=payoff, paths=paths, steps=steps))
    return str(path)


def test_dumps_is_stable():
    text = dumps({"b": [1.0, 0.1, 2], "a": {"x": 1e-20}})
    assert json.loads(text) == {"b": [1.0, 0.1, 2], "a": {"x": 1e-20}}
    assert text == dumps({"b": [1.0, 0.1, 2], "a": {"x": 1e-20}})


def test_replicate_deterministic_summary(tmp_path, capsys):
    cfg = write_config(tmp_path, payoff=DETERMINISTIC, paths=4, steps=4096)
    out = tmp_path / "out"
    assert main(["replicate", "--config", cfg, "--out", str(out)]) == EXIT_OK
    s = json.loads((out / "summary.json").read_text())
    assert s["mu_bar"] == pytest.approx([0.25], rel=1e-14)
    assert s["J_star"] == pytest.approx(0.25, rel=1e-14)
    assert abs(s["mc_cost"] - 0.25) <= 1e-3
    header = (out / "paths.csv").read_text().splitlines()[0]
    assert header == "path_id,f_0,x_T_0,residual_0,cost,mu_T_0"
    assert (out / "trajectories.csv").exists() and (out / "timings.json").exists()
    assert "J*=0.25" in capsys.readouterr().out


def test_replicate_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["replicate", "--config", cfg, "--out", str(a)]) == EXIT_OK
    assert main(["replicate", "--config", cfg, "--out", str(b), "--threads", "4"]) == EXIT_OK
    for name in ("summary.json", "paths.csv", "trajectories.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    c = tmp_path / "c"
    assert main(["replicate", "--config", cfg, "--out", str(c), "--seed", "8"]) == EXIT_OK
    assert (a / "paths.csv").read_bytes() != (c / "paths.csv").read_bytes()


def test_low_alpha_is_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path, alpha=0.4)
    assert main(["replicate", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "weight.alpha" in capsys.readouterr().err


def test_unknown_key_is_rejected(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text(open(write_config(tmp_path)).read().replace("seed = 7", "seed = 7\nsead = 3"))
    with pytest.raises(ConfigError, match="simulation.sead"):
        load_config(str(path))


def test_verify_passes_and_names_checks(tmp_path, capsys):
    cfg = write_config(tmp_path, paths=20000)
    code = main(["verify", "--config", cfg, "--out", str(tmp_path / "v"), "--ladder", "64,256,1024"])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "residual RMSE strictly decreasing: pass" in out
    assert "cost consistency: pass" in out


def test_verify_deterministic_mu_constant(tmp_path, capsys):
    cfg = write_config(tmp_path, payoff=DETERMINISTIC, paths=50)
    assert main(["verify", "--config", cfg, "--out", str(tmp_path / "v"), "--ladder", "64,256"]) == EXIT_OK
    assert "mu constant: pass" in capsys.readouterr().out


def test_verify_detects_mismatched_riccati_cache(tmp_path):
    cfg = load_config(write_config(tmp_path, payoff=DETERMINISTIC, paths=50))
    with pytest.raises(InvariantFailure) as err:
        run_verify(cfg, None, ladder=(64, 256), riccati_weight=make_weight("pure-power", 0.6, 1.0))
    assert "cost consistency" in err.value.names


def test_oracle_command(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "o"
    assert main(["oracle", "--config", cfg, "--out", str(out), "--depths", "4,6,8"]) == EXIT_OK
    rep = json.loads((out / "oracle.json").read_text())
    assert rep["gap_non_increasing"]
    assert main(["oracle", "--config", cfg, "--depths", "13"]) == EXIT_CONFIG
    det = write_config(tmp_path, name="det.toml", payoff=DETERMINISTIC)
    assert main(["oracle", "--config", det, "--out", str(out), "--depths", "1"]) == EXIT_OK
    rep = json.loads((out / "oracle.json").read_text())
    assert rep["reports"][0]["oracle_cost"] == pytest.approx(0.25, rel=1e-12)


BONDS = """
[application]
kind = "bonds"
maturities = {maturities}
targets = {targets}

[weight]
alpha = 0.75

[simulation]
paths = 50
steps = 64
seed = 5
"""


def test_bonds_command(tmp_path):
    path = tmp_path / "bonds.toml"
    path.write_text(BONDS.format(maturities="[1.0]", targets="[0.05]"))
    out = tmp_path / "b"
    assert main(["bonds", "--config", str(path), "--out", str(out)]) == EXIT_OK
    s = json.loads((out / "summary.json").read_text())
    assert s["mean_xi_hat"] == pytest.approx([0.951229424500714], abs=1e-12)
    assert (out / "bonds.csv").read_text().startswith("path_id,k,f_k,int_r,xi_hat_k\n")


def test_bonds_rejects_decreasing_maturities(tmp_path, capsys):
    path = tmp_path / "bonds.toml"
    path.write_text(BONDS.format(maturities="[2.0, 1.0]", targets="[0.05, 0.05]"))
    assert main(["bonds", "--config", str(path), "--out", str(tmp_path / "b")]) == EXIT_CONFIG
    assert "maturities" in capsys.readouterr().err


def test_application_and_system_are_exclusive():
    with pytest.raises(ConfigError, match="system"):
        parse_config({"application": {"kind": "dividend", "T": 1.0}, "system": {"n": 1},
                      "weight": {"alpha": 0.75}, "payoff": {"family": "gbm-terminal", "S0": 1.0}})


@pytest.mark.parametrize("name", ["fixed_target", "wiener_target", "cash_call", "dividend", "bonds_flat"])
def test_shipped_configs_load(name):
    load_config(f"configs/{name}.toml")
