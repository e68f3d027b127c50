import csv
from pathlib import Path

import pytest

from otafl.cli import main
from otafl.config import ConfigError, ExperimentConfig, dump_config, load_config, parse_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

SMALL = """\
[experiment]
protocols = cwfl, cotaf
seeds = 0

[data]
K = 8
per_client_size = 10
m = 3

[schedule]
T = 12
E = 3
eta = 0.05

[channel]
snr_db = 10

[topology]
C = 2
"""


def test_defaults_validate():
    ExperimentConfig().validate()


def test_parse_types():
    cfg = parse_config(SMALL)
    assert cfg.protocols == ("cwfl", "cotaf")
    assert cfg.seeds == (0,)
    assert cfg.K == 8 and cfg.eta == 0.05 and cfg.snr_db == 10.0
    assert cfg.sigma2 is None


def test_unknown_key_reports_line():
    text = SMALL.replace("eta = 0.05", "eta = 0.05\nwarmup = 3")
    with pytest.raises(ConfigError, match=r"<config>:14: unknown key 'warmup'"):
        parse_config(text)


def test_unknown_section_reports_line():
    with pytest.raises(ConfigError, match=r":3: unknown section \[optimizer\]"):
        parse_config("[data]\nK = 4\n[optimizer]\nx = 1\n")


def test_bad_value_reports_line():
    with pytest.raises(ConfigError, match=r"<config>:6: bad value for K"):
        parse_config(SMALL.replace("K = 8", "K = eight"))


@pytest.mark.parametrize("patch", [
    ("protocols = cwfl, cotaf", "protocols = cwfl, gossip"),
    ("seeds = 0", "seeds ="),
    ("C = 2", "C = 9"),
    ("T = 12", "T = 2"),
    ("protocols = cwfl, cotaf", "protocols = cwfl-prox"),
])
def test_invalid_configs(patch):
    with pytest.raises(ConfigError):
        parse_config(SMALL.replace(*patch))


def test_missing_data_path():
    with pytest.raises(ConfigError, match="does not exist"):
        parse_config("[data]\nsource = idx\npath = /nonexistent/dir\n")


def test_dump_roundtrip():
    cfg = parse_config(SMALL)
    assert parse_config(dump_config(cfg)) == cfg
    assert cfg.digest() == parse_config(dump_config(cfg)).digest()


def test_shipped_quadratic_config_loads():
    assert load_config(CONFIGS / "quadratic.ini").K == 25


def _write(tmp_path, text=SMALL):
    p = tmp_path / "small.ini"
    p.write_text(text)
    return p


def test_cli_bad_config_exit_code(tmp_path, capsys):
    p = _write(tmp_path, SMALL.replace("[topology]", "[topology]\nshape = star"))
    assert main(["run", "--config", str(p)]) == 2
    err = capsys.readouterr().err
    assert "small.ini:" in err and "shape" in err


def test_cli_missing_config(tmp_path):
    assert main(["run", "--config", str(tmp_path / "none.ini")]) == 2


def test_cli_run_is_deterministic(tmp_path):
    p = _write(tmp_path)
    for name in ("a", "b"):
        assert main(["run", "--config", str(p), "--seed", "1", "--out", str(tmp_path / name)]) == 0
    for f in ("traces.csv", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert main(["verify", "--csv", str(tmp_path / "a" / "traces.csv")]) == 0


def test_cli_ledger(capsys):
    assert main(["ledger", "--K", "25", "--C", "4", "--rounds", "50"]) == 0
    out = {line.split()[0]: line.split()[1:] for line in capsys.readouterr().out.splitlines()[1:]}
    assert out["cwfl"] == ["16", "800"]
    assert out["dsgd"] == ["600", "30000"]
    assert out["cotaf"] == ["1", "50"]


@pytest.mark.parametrize("K", [5, 25, 40])
def test_ledger_cwfl_cheaper_when_fewer_heads(K):
    from otafl.experiments import channel_ledger
    for C in range(1, K):
        rows = {p: total for p, _, total in channel_ledger(K, C, 10)}
        assert rows["cwfl"] < rows["dsgd"]


def test_cli_sweep_clusters(tmp_path, capsys):
    p = _write(tmp_path, SMALL.replace("protocols = cwfl, cotaf", "protocols = cwfl"))
    assert main(["sweep", "--config", str(p), "--clusters", "3,4", "--out", str(tmp_path / "sw")]) == 0
    with open(tmp_path / "sw" / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["clusters"] for r in rows] == ["3", "4"]
    assert all(r["distance"] for r in rows)
    assert (tmp_path / "sw" / "cell000.csv").exists()


def test_cli_sweep_needs_axis(tmp_path):
    assert main(["sweep", "--config", str(_write(tmp_path))]) == 2


def test_cli_verify_csv_detects_problems(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("protocol,seed\ncwfl,0,extra\n")
    assert main(["verify", "--csv", str(p)]) == 1
