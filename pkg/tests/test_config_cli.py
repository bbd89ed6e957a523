import csv
import io
import json

import pytest

from edgemsi import bounds
from edgemsi.cli import EXIT_CONFIG, EXIT_IO, main
from edgemsi.config import ConfigError, parse_config, serialize_config, validate_config, with_value
from edgemsi.experiment import CSV_COLUMNS

MIN = {"protocol": {"kind": "favg"}, "rounds": 3}


def _write(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return p


def test_minimal_config_defaults(tmp_path):
    cfg = parse_config(_write(tmp_path, MIN))
    assert cfg.seed == 0 and cfg.protocol.hyper.eta == 0.1 and cfg.data.n_devices == 10
    assert cfg.blockfl is None and cfg.target_loss is None


def _paths(data):
    with pytest.raises(ConfigError) as exc:
        validate_config(data)
    return [p for p, _ in exc.value.errors]


def test_negative_eta_names_field():
    assert _paths({"protocol": {"kind": "favg", "hyper": {"eta": -1}}, "rounds": 1}) == ["protocol.hyper.eta"]


def test_unknown_and_missing_fields():
    assert "protocol.hyper.etaa" in _paths({"protocol": {"kind": "favg", "hyper": {"etaa": 1}}, "rounds": 1})
    assert "rounds" in _paths({"protocol": {"kind": "favg"}})
    assert "protocol.kind" in _paths({"protocol": {"kind": "nope"}, "rounds": 1})


def test_section_kind_mismatch():
    with pytest.raises(ConfigError):
        validate_config({**MIN, "blockfl": {}})


def test_bad_json(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        parse_config(p)


def test_roundtrip(tmp_path):
    data = {**MIN, "dp": {"noise_sigma": 0.1}, "protocol": {"kind": "dsgd", "mixing": [[1, 1], [1, 1]]}}
    cfg = validate_config(data)
    again = parse_config(_write(tmp_path, json.loads(serialize_config(cfg))))
    assert again == cfg


def test_with_value_creates_sections():
    cfg = validate_config({"protocol": {"kind": "blockfl"}, "rounds": 1})
    assert with_value(cfg, "blockfl.lambda_bgr", 0.3).blockfl.lambda_bgr == 0.3
    with pytest.raises(ConfigError):
        with_value(cfg, "protocol.kind", 1)
    with pytest.raises(ConfigError):
        with_value(cfg, "protocol.hyper.nope", 1)


def _rows(text):
    return list(csv.reader(io.StringIO(text)))


def test_run_zero_rounds_header_only(tmp_path, capsys):
    p = _write(tmp_path, {**MIN, "rounds": 0})
    assert main(["run", "--config", str(p), "--quiet"]) == 0
    assert _rows(capsys.readouterr().out) == [list(CSV_COLUMNS)]


@pytest.mark.parametrize("kind", ["favg", "fd", "dsgd", "blockfl", "extfl"])
def test_column_count_constant(tmp_path, kind):
    out = tmp_path / "o.csv"
    assert main(["run", "--config", str(_write(tmp_path, {"protocol": {"kind": kind}, "rounds": 2})), "--out", str(out), "--quiet"]) == 0
    rows = _rows(out.read_text())
    assert rows[0] == list(CSV_COLUMNS)
    assert all(len(r) == len(CSV_COLUMNS) for r in rows)
    assert rows[1][-1] == kind


def test_cumulative_columns_monotone(tmp_path):
    out = tmp_path / "o.csv"
    main(["run", "--config", str(_write(tmp_path, {**MIN, "rounds": 6, "protocol": {"kind": "favg", "hyper": {"tau": 2}}})), "--out", str(out), "--quiet"])
    rows = _rows(out.read_text())[1:]
    for col in (1, 2, 3):
        vals = [float(r[col]) for r in rows]
        assert vals == sorted(vals)


def test_seed_override_changes_output(tmp_path):
    p = _write(tmp_path, MIN)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    main(["run", "--config", str(p), "--out", str(a), "--quiet"])
    main(["run", "--config", str(p), "--out", str(b), "--seed", "9", "--quiet"])
    assert a.read_bytes() != b.read_bytes()


def test_invalid_config_exit_code(tmp_path, capsys):
    p = _write(tmp_path, {"protocol": {"kind": "favg", "hyper": {"eta": -1}}, "rounds": 1})
    assert main(["run", "--config", str(p)]) == EXIT_CONFIG
    assert "protocol.hyper.eta" in capsys.readouterr().err


def test_unwritable_output(tmp_path):
    p = _write(tmp_path, MIN)
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "missing" / "x.csv"), "--quiet"]) == EXIT_IO


def test_sweep_single_point_matches_run(tmp_path):
    p = _write(tmp_path, MIN)
    run_out = tmp_path / "run.csv"
    main(["run", "--config", str(p), "--out", str(run_out), "--quiet"])
    d = tmp_path / "sweep"
    assert main(["sweep", "--config", str(p), "--param", "protocol.hyper.eta", "--grid", "0.1", "--out", str(d), "--quiet"]) == 0
    assert (d / "point_000.csv").read_bytes() == run_out.read_bytes()
    summary = _rows((d / "summary.csv").read_text())
    assert summary[0] == ["param_value", "final_test_acc", "completion_latency_s", "cum_bits_up"]


def test_sweep_eta_keeps_bits(tmp_path):
    p = _write(tmp_path, MIN)
    d = tmp_path / "sweep"
    main(["sweep", "--config", str(p), "--param", "protocol.hyper.eta", "--grid", "0.05,0.1,0.2", "--out", str(d), "--quiet"])
    bits = {r[3] for r in _rows((d / "summary.csv").read_text())[1:]}
    assert len(bits) == 1


def test_sweep_bad_path(tmp_path):
    p = _write(tmp_path, MIN)
    assert main(["sweep", "--config", str(p), "--param", "protocol.hyper.bogus", "--grid", "1", "--out", str(tmp_path / "s")]) == EXIT_CONFIG


def test_sweep_completion_latency(tmp_path):
    p = _write(tmp_path, {**MIN, "rounds": 20, "target_loss": 2.0})
    d = tmp_path / "s"
    main(["sweep", "--config", str(p), "--param", "protocol.hyper.eta", "--grid", "0.2", "--out", str(d), "--quiet"])
    row = _rows((d / "summary.csv").read_text())[1]
    assert float(row[2]) > 0


def test_bounds_command_matches_module(capsys):
    assert main(["bounds", "--n", "200", "--eps", "0.1", "--hsize", "1000", "--vc", "5", "--kl", "0.5"]) == 0
    rows = dict(_rows(capsys.readouterr().out)[1:])
    assert float(rows["finite_h"]) == bounds.ge_finite_h(1000, 200, 0.1)
    assert float(rows["pac_vc"]) == bounds.ge_pac_vc(5, 200, 0.1)
    assert float(rows["pac_bayes"]) == bounds.ge_pac_bayes(0.5, 200, 0.1)


def test_bounds_kl_zero_eps_one(capsys):
    main(["bounds", "--n", "10", "--eps", "1", "--kl", "0"])
    assert dict(_rows(capsys.readouterr().out)[1:])["pac_bayes"] == "0.0"


def test_bounds_from_param_count(capsys):
    main(["bounds", "--n", "1000", "--eps", "0.05", "--params", "100", "--bits", "8"])
    rows = dict(_rows(capsys.readouterr().out)[1:])
    assert float(rows["finite_h"]) == bounds.ge_finite_h(log_hsize=bounds.log_hypothesis_count(100, 8), n=1000, eps=0.05)


def test_bounds_needs_an_input():
    assert main(["bounds", "--n", "10", "--eps", "0.1"]) == EXIT_CONFIG


@pytest.mark.parametrize("name", ["favg_noniid", "fd_share", "blockfl", "extfl"])
def test_example_configs_validate(name):
    from pathlib import Path

    parse_config(Path(__file__).parent.parent / "configs" / f"{name}.json")
