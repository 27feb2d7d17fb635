import csv
import io

import numpy as np
import pytest

from pqsystem.cli import ConfigError, main, parse_config, parse_grid

from conftest import config

SMALL = """\
p: 2
q: 2
alpha: 2
beta: 2
c1: 2
c2: 2
domain:
  dim: 1
  bounds: [[0, 1]]
resolution: 17
weight:
  default: -1
  pieces:
    - {lower: [0.7], upper: [1.0], value: 1}
"""


@pytest.fixture
def small(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(SMALL)
    return path


def _rows(text):
    body = [line for line in text.splitlines() if not line.startswith("#")]
    return list(csv.DictReader(io.StringIO("\n".join(body))))


def test_eigen_report(capsys):
    assert main(["eigen", str(config("nonnegative_1d"))]) == 0
    out = capsys.readouterr().out
    lam1 = float(next(line for line in out.splitlines() if line.startswith("lambda1:")).split()[1])
    assert lam1 == pytest.approx(np.pi**2, rel=2e-3)


def test_invalid_exponent_names_the_key(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(SMALL.replace("p: 2\n", "p: 0.5\n", 1))
    assert main(["eigen", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "'p'" in err and "line 1" in err


@pytest.mark.parametrize(
    "text,key",
    [
        (SMALL + "extra: 1\n", "extra"),
        (SMALL.replace("resolution: 17\n", ""), "resolution"),
        (SMALL.replace("c2: 2", "c2: -1"), "c2"),
    ],
)
def test_config_errors(text, key):
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.key == key


def test_malformed_yaml_exits_2(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("p: [2\nq: 2\n")
    assert main(["solve", str(bad), "--lambda", "1", "--mu", "1"]) == 2


def test_dump_fields(tmp_path, capsys):
    out = tmp_path / "fields"
    assert main(["eigen", str(config("sign_changing_1d")), "--dump-fields", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["phi1.txt", "psi1.txt"]
    assert main(["eigen", str(config("sign_changing_1d")), "--dump-fields", str(out)]) == 2
    assert main(["eigen", str(config("sign_changing_1d")), "--dump-fields", str(out), "--force"]) == 0


def test_grid_parsing():
    assert parse_grid("0.1:10:25", True) == pytest.approx(np.geomspace(0.1, 10, 25))
    assert parse_grid("1:2:3", False) == pytest.approx([1.0, 1.5, 2.0])
    for bad in ("1:2:0", "2:1:3", "a:b:c", "0:1:3"):
        with pytest.raises(ConfigError):
            parse_grid(bad, bad.startswith("0:"))


def test_empty_grid_exits_2(small):
    assert main(["curve", str(small), "f", "--r-grid", "1:2:0"]) == 2


def test_log_grid_rows_and_manifest(small, tmp_path):
    out = tmp_path / "f.csv"
    args = ["curve", str(small), "f", "--r-grid", "0.1:10:25", "--log", "--starts", "2", "-o", str(out)]
    assert main(args) == 0
    text = out.read_text()
    rows = _rows(text)
    assert len(rows) == 25
    assert [float(r["r"]) for r in rows] == pytest.approx(np.geomspace(0.1, 10, 25), rel=1e-12)
    assert list(rows[0])[:6] == ["r", "lambda_f", "mu_f", "kind", "feasibility_gap", "starts_used"]
    header = [line for line in text.splitlines() if line.startswith("#")]
    for key in ("command", "seed", "tol", "problem_hash", "version"):
        assert any(line.startswith(f"# {key}:") for line in header), key
    # refuse to overwrite, then identical bytes on a forced rerun
    assert main(args) == 2
    assert main(args + ["--force"]) == 0
    assert out.read_text() == text


def test_curve_both_orders_the_curves(small, capsys):
    assert main(["curve", str(small), "both", "--r-grid", "0.5:2:3", "--log", "--starts", "2"]) == 0
    rows = _rows(capsys.readouterr().out)
    assert len(rows) == 3
    for row in rows:
        assert float(row["picone_upper"]) >= float(row["lambda_e_lower"])
        assert row["ordered"] in ("true", "false")


def test_certify(capsys):
    assert main(["certify", str(config("nonpositive_1d"))]) == 0
    assert "no certificate region" in capsys.readouterr().out
    assert main(["certify", str(config("sign_changing_1d"))]) == 0
    out = capsys.readouterr().out
    assert "lambda_bound:" in out and "discrete_picone_valid: p=true q=true" in out


def test_solve_certificate_verdict(capsys):
    assert main(["solve", str(config("nonpositive_1d")), "--lambda", "3", "--mu", "3"]) == 0
    assert "verdict: no-nontrivial (certificate)" in capsys.readouterr().out


def test_solve_writes_solution(small, tmp_path, capsys):
    outdir = tmp_path / "sol"
    assert main(["solve", str(small), "--lambda", "12", "--mu", "12", "--out-dir", str(outdir)]) == 0
    out = capsys.readouterr().out
    assert "verdict: solution" in out and "positivity: positive-interior" in out
    text = (outdir / "solution.csv").read_text()
    assert "# problem_hash:" in text and len(_rows(text)) == 17


def test_solve_not_found_is_a_result(small, capsys):
    # far above the threshold curve but below the Picone level: no certificate, no solution
    assert main(["solve", str(small), "--lambda", "30", "--mu", "1"]) == 0
    out = capsys.readouterr().out
    assert "verdict: not found" in out and "reason:" in out


def test_probe(capsys):
    assert main(["probe", str(config("nonnegative_1d")), "--lambda", "20", "--mu", "1"]) == 0
    assert "verdict: no-positive-f-nonneg" in capsys.readouterr().out
