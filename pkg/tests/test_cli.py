import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from parabolic.cli import RunConfig, UsageError, dumps_report, main, run


@pytest.fixture(scope="module")
def threebody_out(tmp_path_factory):
    out = tmp_path_factory.mktemp("tb")
    status = main(["threebody", "--order", "10", "--out", str(out)])
    return status, out


def read_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=float)


def test_empty_config_exits_2(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text("")
    assert main(["run", "--config", str(cfg)]) == 2
    cfg.write_text("{}")
    assert main(["run", "--config", str(cfg)]) == 2
    assert "error" in capsys.readouterr().err


def test_missing_command_and_bad_keys(tmp_path, capsys):
    assert main([]) == 2
    assert main(["gallery"]) == 2
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"system": "toy", "bogus": 1}))
    assert main(["run", "--config", str(cfg)]) == 2
    with pytest.raises(UsageError):
        RunConfig(system="nope")
    with pytest.raises(UsageError):
        RunConfig(system="toy", rho=-1.0)


def test_gallery_toy_flags(tmp_path, capsys):
    assert main(["gallery", "toy", "--a", "0.05", "--b", "0.75", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["checks"]["every y diverges"] and rep["checks"]["H3 fails"]
    assert rep["toy"]["b_plus_3a"] == pytest.approx(0.9)
    head, rows = read_csv(tmp_path / "toy_scan.csv")
    assert head == ["y0", "exceeded_at", "growth_slope", "bounded"] and len(rows) == 21
    capsys.readouterr()
    assert main(["gallery", "toy", "--a", "0.4", "--b", "0.5"]) == 0
    assert json.loads(capsys.readouterr().out)["toy"]["bounded_count"] == 1


def test_gallery_lossdiff(tmp_path):
    assert main(["gallery", "lossdiff", "--out", str(tmp_path / "ld.json")]) == 0
    rep = json.loads((tmp_path / "ld.json").read_text())
    assert rep["lossdiff"]["max_difference"] <= 1e-8
    assert rep["hypotheses"]["H3"]


def test_threebody_report(threebody_out):
    status, out = threebody_out
    rep = json.loads((out / "report.json").read_text())
    assert rep["Y_vanishes_above_7"]
    assert rep["checks"]["residual slope"]
    # the only failing checks are K_x^5..K_x^7 = 0
    assert status == 1
    assert sorted(rep["structure"]["failures"]) == ["K_x^5 = 0", "K_x^6 = 0", "K_x^7 = 0"]
    jets = json.loads((out / "jets.json").read_text())
    assert {"K_x^2", "K_y^10", "Y^5"} <= set(jets)


def test_residual_csv_sorted(threebody_out):
    _, out = threebody_out
    head, rows = read_csv(out / "residual_scan.csv")
    assert head == ["radius", "residual"]
    assert np.all(np.diff(rows[:, 0]) > 0)


def test_envelope_csv_brackets_orbits(threebody_out):
    _, out = threebody_out
    head, rows = read_csv(out / "envelope.csv")
    assert head == ["orbit", "j", "lower", "actual", "upper"]
    assert np.all(rows[:, 2] <= rows[:, 3]) and np.all(rows[:, 3] <= rows[:, 4])


def test_reexport_is_byte_identical(threebody_out, tmp_path):
    status, out = threebody_out
    assert main(["threebody", "--order", "10", "--out", str(tmp_path)]) == status
    for name in ("report.json", "jets.json", "residual_scan.csv", "envelope.csv"):
        assert (out / name).read_bytes() == (tmp_path / name).read_bytes()


def test_verify_manufactured(tmp_path):
    status, rep = run(RunConfig(system="manufactured", rho=0.05, out=str(tmp_path),
                                stages=["constants", "refine", "verify"]))
    assert status == 0
    assert rep["refine"]["converged"] and rep["verify"]["weighted"] <= 1e-6
    head, rows = read_csv(tmp_path / "contraction.csv")
    assert np.all(np.diff(rows[:, 1]) < 0)


def test_refine_rejects_low_order():
    with pytest.raises(UsageError):
        run(RunConfig(system="manufactured", order=2, stages=["constants", "refine"]))


def test_user_jet_file(tmp_path):
    from parabolic.polyalg import grade
    doc = {"p": grade({(2, 0): [-1.0]}, 2, 1).to_json(), "q": grade({(1, 1): [1.0]}, 2, 1).to_json(),
           "cone_normals": [[1.0]]}
    f = tmp_path / "jet.json"
    f.write_text(json.dumps(doc))
    status, rep = run(RunConfig(system="user-jet-file", jet_file=str(f), stages=["constants", "hypotheses"]))
    assert status == 0 and rep["constants"]["a_p"] == pytest.approx(1.0, rel=1e-6)
    with pytest.raises(UsageError):
        RunConfig(system="user-jet-file", jet_file=str(tmp_path / "missing.json"))


def test_dumps_report_handles_nonfinite():
    s = dumps_report({"b": np.float64("nan"), "a": [np.inf, np.int64(3)]})
    assert json.loads(s) == {"a": ["inf", 3], "b": "nan"}


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "parabolic", "gallery", "toy"], capture_output=True, text=True)
    assert r.returncode == 0 and json.loads(r.stdout)["passed"]
