import numpy as np
import pytest

from sketchcpd.cli import main
from sketchcpd.numerics import RngStream
from sketchcpd.projections import gaussian_projection, save_projection


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def body(out):
    return [l for l in out.splitlines() if not l.startswith("#")]


def test_calibrate_theory_and_round_trip(capsys):
    code, out, _ = run(capsys, "calibrate", "--M", "50", "--w", "200", "--arl", "5000", "--method", "theory")
    assert code == 0
    b = float(body(out)[0])
    assert b == pytest.approx(51.04, abs=0.05)
    code, out, _ = run(capsys, "arl", "--M", "50", "--w", "200", "--b", repr(b))
    assert float(body(out)[0]) == pytest.approx(5000, rel=1e-3)


def test_invalid_target_exit_2(capsys):
    code, _, err = run(capsys, "calibrate", "--arl", "0.5")
    assert code == 2 and "error" in err


def test_unknown_flag_exit_2(capsys):
    assert run(capsys, "calibrate", "--bogus", "1")[0] == 2


def test_config_file_and_override(tmp_path, capsys):
    cfg = tmp_path / "c.conf"
    cfg.write_text("# thresholds\nM = 30\nw = 200\narl = 5000\n")
    code, out, _ = run(capsys, "calibrate", "--config", str(cfg))
    assert float(body(out)[0]) == pytest.approx(36.36, abs=0.05)
    assert "# M = 30" in out
    code, out, _ = run(capsys, "calibrate", "--config", str(cfg), "--M", "10")
    assert float(body(out)[0]) == pytest.approx(19.59, abs=0.05)
    cfg.write_text("colour = red\n")
    assert run(capsys, "calibrate", "--config", str(cfg))[0] == 2


def test_detect_zero_stream_no_alarm(tmp_path, capsys):
    path = tmp_path / "s.csv"
    path.write_text("0,0,0\n" * 6)
    code, out, _ = run(capsys, "detect", "--input", str(path), "--b", "1", "--w", "10")
    assert code == 3
    rows = body(out)
    assert rows[0] == "t,statistic,khat,fired"
    assert all(float(r.split(",")[1]) == 0.0 for r in rows[1:])


def test_detect_shift_alarms_near_change(tmp_path, capsys):
    g = np.random.default_rng(0)
    A = gaussian_projection(4, 10, RngStream(1))
    save_projection(A, tmp_path / "A.csv")
    x = g.standard_normal((80, 10))
    x[50:] += 10.0
    y = x @ A.entries.T
    np.savetxt(tmp_path / "y.csv", y, delimiter=",")
    code, out, err = run(capsys, "detect", "--input", str(tmp_path / "y.csv"), "--projection-file",
                         str(tmp_path / "A.csv"), "--b", "30", "--w", "20")
    assert code == 0
    t, stat, khat, fired = err.strip().split(",")[1:]
    assert 50 < int(t) <= 53 and abs(int(khat) - 50) <= 2 and fired == "1"


def test_detect_missing_full_rows_match_fixed(tmp_path, capsys):
    y = np.random.default_rng(1).standard_normal((30, 5))
    np.savetxt(tmp_path / "y.csv", y, delimiter=",")
    _, fixed, _ = run(capsys, "detect", "--input", str(tmp_path / "y.csv"), "--b", "1e9", "--w", "8")
    _, missing, _ = run(capsys, "detect", "--input", str(tmp_path / "y.csv"), "--b", "1e9", "--w", "8",
                        "--mode", "missing")
    a = np.array([[float(v) for v in r.split(",")] for r in body(fixed)[1:]])
    b = np.array([[float(v) for v in r.split(",")] for r in body(missing)[1:]])
    assert np.allclose(a, b, rtol=1e-10)


def test_detect_parse_errors(tmp_path, capsys):
    path = tmp_path / "s.csv"
    path.write_text("1,2\n3,x\n")
    code, _, err = run(capsys, "detect", "--input", str(path), "--b", "5")
    assert code == 2 and "line 2" in err
    path.write_text("1,2\n3\n")
    assert run(capsys, "detect", "--input", str(path), "--b", "5")[0] == 2
    path.write_text("1,\n")
    assert run(capsys, "detect", "--input", str(path), "--b", "5")[0] == 2


def test_detect_stdin(monkeypatch, capsys):
    import io
    monkeypatch.setattr("sys.stdin", io.StringIO("0,,1\n5,5,\n9,9,9\n"))
    code, out, _ = run(capsys, "detect", "--stdin", "--mode", "missing", "--b", "20", "--w", "5")
    assert code == 0 and body(out)[-1].endswith(",1")


def test_simulate_and_threads_env(monkeypatch, capsys):
    monkeypatch.setenv("SKETCHCPD_THREADS", "2")
    args = ["simulate", "--M", "5", "--N", "20", "--w", "20", "--b", "8", "--replicates", "40", "--seed", "1"]
    _, a, _ = run(capsys, *args)
    _, b, _ = run(capsys, *args, "--threads", "1")
    assert a == b
    code, out, _ = run(capsys, *args, "--what", "edd", "--mu-value", "50")
    assert code == 0 and body(out)[1].startswith("edd,1,")


def test_experiment_files_identical(tmp_path, capsys):
    args = ["experiment", "table1", "--seed", "7", "--replicates", "30"]
    run(capsys, *args, "--out", str(tmp_path / "a.csv"), "--threads", "1")
    run(capsys, *args, "--out", str(tmp_path / "b.csv"), "--threads", "4")
    a = (tmp_path / "a.csv").read_text()
    assert a == (tmp_path / "b.csv").read_text()
    lines = [l for l in a.splitlines() if not l.startswith("#")]
    assert lines[0].startswith("M,b_theo,b_simu")
    assert run(capsys, "experiment", "nope")[0] == 2


def test_normality_command(tmp_path, capsys):
    np.savetxt(tmp_path / "r.csv", np.random.default_rng(2).standard_normal((100, 3)), delimiter=",")
    code, out, _ = run(capsys, "normality", "--input", str(tmp_path / "r.csv"))
    ks, p, n = body(out)[1].split(",")
    assert code == 0 and int(n) == 300 and float(p) > 0.01
