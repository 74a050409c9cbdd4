import json

import numpy as np
import pytest

from spinforge.cli import main, odmr_map, parse_range, UsageError
from spinforge.io import read_csv
from spinforge.sites import load_database, spin_params
from spinforge.spin_core import solve, transition_arrays


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_parse_range_units():
    assert parse_range("0:50mT:501", "field") == (0.0, pytest.approx(0.05), 501)
    assert parse_range("100G:1T:3", "field") == (pytest.approx(0.01), 1.0, 3)
    assert parse_range("-10:10MHz:5", "freq") == (-10.0, 10.0, 5)
    assert parse_range("0:1GHz:5", "freq")[1] == 1000.0
    for bad in ("0:0:2", "0:1:1", "1:0:5", "0:1", "0:1parsec:3", "a:1:3"):
        with pytest.raises(UsageError):
            parse_range(bad, "field")


def test_sites_show(capsys):
    code, out, _ = run(capsys, "sites", "show", "4H", "beta")
    assert code == 0
    assert "g_zz = 1.870(5)" in out
    assert "A (xx, yy, zz) = (103, 188, 174(5)) MHz" in out
    code, out, _ = run(capsys, "sites", "show", "6H:gamma")
    assert "GS2 - GS1: 16(1) GHz" in out and "lifetime: 31(1) ns" in out
    code, out, _ = run(capsys, "sites", "show", "4H", "alpha")
    assert "lifetime: 167(1) ns" in out and "1278.808(6) nm" in out
    assert "[literature]" in out


def test_sites_json(capsys):
    code, out, _ = run(capsys, "sites", "show", "4H:beta", "--json")
    d = json.loads(out)
    assert d["GS1"]["g_perp"]["provenance"] == "bounded"


def test_unknown_site(capsys):
    code, _, err = run(capsys, "sites", "show", "4H", "delta")
    assert code == 2
    diag = json.loads(err.strip().splitlines()[-1])
    assert diag["error"] == "unknown-site" and "did you mean" in diag["message"]


def test_levels(tmp_path, capsys):
    out = tmp_path / "lv.csv"
    code, _, err = run(capsys, "levels", "--site", "4H:beta", "--orbital", "GS1",
                       "--b-range", "0:50mT:501", "-o", str(out))
    assert code == 0
    assert "warning" in err and "0 < g < 1" in err
    d = read_csv(out)
    assert d["B_mT"].size == 501
    L = np.array([d[f"level_{k:02d}"] for k in range(16)])
    assert np.max(np.abs(L.sum(axis=0))) < 1e-3


def test_levels_degenerate_range(tmp_path, capsys):
    out = tmp_path / "lv.csv"
    code, _, _ = run(capsys, "levels", "--b-range", "0:0mT:2", "-o", str(out))
    assert code == 2
    assert not out.exists()


def test_levels_zero_hyperfine_are_lines(tmp_path, capsys):
    out = tmp_path / "lv.csv"
    assert run(capsys, "levels", "--set", "A=0,0,0", "--b-range", "0:50mT:51", "-o", str(out))[0] == 0
    d = read_csv(out)
    B = d["B_mT"]
    for k in range(16):
        y = d[f"level_{k:02d}"]
        fit = np.polyval(np.polyfit(B, y, 1), B)
        ss = np.sum((y - y.mean()) ** 2)
        r2 = 1 - np.sum((y - fit) ** 2) / ss if ss > 0 else 1.0
        assert r2 > 1 - 1e-9


def test_odmr_geometries(tmp_path, capsys):
    par, perp = tmp_path / "par.csv", tmp_path / "perp.csv"
    base = ("odmr", "--b-range", "0:50mT:11", "--f-range", "0:1200MHz:601")
    assert run(capsys, *base, "-o", str(par))[0] == 0
    assert run(capsys, *base, "--geometry", "perp", "--set", "g_perp=0", "-o", str(perp))[0] == 0
    a, b = read_csv(par)["intensity"], read_csv(perp)["intensity"]
    assert a.max() > 0
    assert b.max() < 1e-6 * a.max()


def test_odmr_narrow_line_concentrates_on_transitions():
    db = load_database()
    p, _ = spin_params(db["4H:beta"], "GS1", warn=False)
    B = 0.02
    t = transition_arrays(solve(p, [0, 0, B]), p, nuclear=False)
    strong = t["freq"][t["par"] > 1e-3 * t["par"].max()]
    f = np.linspace(0, 1200, 120001)
    m = odmr_map(p, [B], f, linewidth=0.02)[0]
    top = f[np.argsort(m)[::-1][:5]]
    for x in top:
        assert np.min(np.abs(strong - x)) < 0.02


def test_esr(tmp_path, capsys):
    out = tmp_path / "esr.csv"
    code, _, _ = run(capsys, "esr", "--angles", "0:90deg:4", "-o", str(out))
    assert code == 0
    text = out.read_text()
    assert "GS1" in text and "GS2" in text


def test_lineshape_and_isotope_fit(tmp_path, capsys):
    ls_csv, fit_json = tmp_path / "ls.csv", tmp_path / "fit.json"
    assert run(capsys, "lineshape", "-o", str(ls_csv))[0] == 0
    assert run(capsys, "fit", "isotope", "--data", str(ls_csv), "-o", str(fit_json))[0] == 0
    est = json.loads(fit_json.read_text())["estimates"]
    assert est["shift_c"] == pytest.approx(22.0, rel=1e-3)
    assert est["shift_si"] == pytest.approx(2.0, rel=1e-3)


def test_clock(tmp_path, capsys):
    out = tmp_path / "clk.csv"
    assert run(capsys, "clock", "-o", str(out))[0] == 0
    d = read_csv(out)
    assert np.all(np.abs(d["slope_MHz_per_mT"]) < 0.1)


def test_fit_g2_round_trip(tmp_path, capsys):
    data, res = tmp_path / "g2.csv", tmp_path / "g2.json"
    assert run(capsys, "dynamics", "g2", "--noise", "0.01", "--seed", "7", "-o", str(data))[0] == 0
    assert run(capsys, "fit", "g2", "--data", str(data), "-o", str(res))[0] == 0
    d = json.loads(res.read_text())
    assert d["status"] == "converged"
    for k, v in (("a", 1.0), ("b", 0.1), ("tau1", 0.07), ("tau2", 2.0)):
        assert d["estimates"][k] == pytest.approx(v, rel=0.05)
        lo, hi = d["intervals"][k]
        assert lo <= d["estimates"][k] <= hi


def test_fit_decay_6h_beta(tmp_path, capsys):
    data, res = tmp_path / "dc.csv", tmp_path / "dc.json"
    argv = ("dynamics", "decay", "--tau", "11", "--t-range", "0:100ns:501", "--noise", "0.01", "--seed", "3")
    assert run(capsys, *argv, "-o", str(data))[0] == 0
    assert run(capsys, "fit", "decay", "--data", str(data), "-o", str(res))[0] == 0
    assert json.loads(res.read_text())["estimates"]["tau"] == pytest.approx(11, rel=0.02)


def test_fit_rabi(tmp_path, capsys):
    data, res = tmp_path / "rb.csv", tmp_path / "rb.json"
    assert run(capsys, "dynamics", "rabi", "-o", str(data))[0] == 0
    assert run(capsys, "fit", "rabi", "--data", str(data), "-o", str(res))[0] == 0
    d = json.loads(res.read_text())
    assert d["derived"]["omega_R_MHz"] == pytest.approx(2.0, rel=1e-4)
    assert d["estimates"]["gamma"] == pytest.approx(0.5, rel=1e-3)


def test_fit_spin_from_map(tmp_path, capsys):
    m, res = tmp_path / "map.csv", tmp_path / "spin.json"
    assert run(capsys, "odmr", "--b-range", "0:50mT:26", "--f-range", "0:1500MHz:3001",
               "--linewidth", "3", "-o", str(m))[0] == 0
    code, _, _ = run(capsys, "fit", "spin", "--data", str(m), "--min-prominence", "1e-4",
                     "--set", "A=110,180,165", "--set", "g_zz=1.85", "-o", str(res))
    assert code == 0
    est = json.loads(res.read_text())["estimates"]
    for k, v in (("g_zz", 1.870), ("A_xx", 103), ("A_yy", 188), ("A_zz", 174)):
        assert est[k] == pytest.approx(v, rel=5e-3)


def test_malformed_csv_no_output(tmp_path, capsys):
    bad, res = tmp_path / "bad.csv", tmp_path / "out.json"
    bad.write_text("t_ns,signal\n1,2\n3,abc\n")
    code, _, err = run(capsys, "fit", "decay", "--data", str(bad), "-o", str(res))
    assert code == 4
    assert json.loads(err.strip().splitlines()[-1])["error"] == "io"
    assert not res.exists()


def test_schema_mismatch(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y\n1,2\n3,4\n")
    assert run(capsys, "fit", "g2", "--data", str(bad))[0] == 4


def test_missing_data_file(tmp_path, capsys):
    assert run(capsys, "fit", "g2", "--data", str(tmp_path / "nope.csv"))[0] == 4


def test_nonconvergence_exit_code(tmp_path, capsys):
    data, res = tmp_path / "dc.csv", tmp_path / "dc.json"
    data.write_text("t_ns,signal\n0,1\n1,1\n2,1\n3,1\n")
    code, _, err = run(capsys, "fit", "decay", "--data", str(data), "-o", str(res))
    assert code == 3
    assert json.loads(err.strip().splitlines()[-1])["error"] == "numerical"


def test_noise_requires_seed(capsys):
    assert run(capsys, "dynamics", "g2", "--noise", "0.1")[0] == 2


def test_usage_errors(capsys):
    assert run(capsys)[0] == 2
    assert run(capsys, "levels", "--orbital", "GS9")[0] == 2
    assert run(capsys, "levels", "--set", "bogus=1")[0] == 2


def test_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("b-range: 0:20mT:21\nset:\n  A: [0, 0, 0]\n")
    out = tmp_path / "lv.csv"
    assert run(capsys, "levels", "--config", str(cfg), "-o", str(out))[0] == 0
    assert read_csv(out)["B_mT"].size == 21
    cfg.write_text("bogus: 1\n")
    assert run(capsys, "levels", "--config", str(cfg))[0] == 2


DETERMINISM = [
    ("sites", "list"),
    ("sites", "show", "4H:beta", "--json"),
    ("levels", "--b-range", "0:50mT:51"),
    ("odmr", "--b-range", "0:50mT:6", "--f-range", "0:1000MHz:201", "--temperature", "3.3"),
    ("esr", "--angles", "0:90deg:3", "--b-range", "0:1T:201"),
    ("lineshape", "--site", "6H:beta"),
    ("clock", "--b-range", "0:20mT:201"),
    ("dynamics", "rabi", "--noise", "0.01", "--seed", "1", "--detuning-sigma", "0.3"),
    ("dynamics", "podmr", "--seed", "1"),
    ("dynamics", "g2", "--noise", "0.01", "--seed", "1"),
    ("dynamics", "decay", "--noise", "0.01", "--seed", "1"),
]


@pytest.mark.parametrize("argv", DETERMINISM, ids=lambda a: "-".join(a[:2]))
def test_byte_identical(tmp_path, capsys, argv):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(capsys, *argv, "-o", str(a))[0] == 0
    assert run(capsys, *argv, "-o", str(b))[0] == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.stat().st_size > 0


def test_fit_output_deterministic(tmp_path, capsys):
    data = tmp_path / "g2.csv"
    run(capsys, "dynamics", "g2", "--noise", "0.01", "--seed", "2", "-o", str(data))
    outs = []
    for name in ("x.json", "y.json"):
        run(capsys, "fit", "g2", "--data", str(data), "-o", str(tmp_path / name))
        outs.append((tmp_path / name).read_bytes())
    assert outs[0] == outs[1]


def test_different_seed_differs(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    run(capsys, "dynamics", "g2", "--noise", "0.01", "--seed", "1", "-o", str(a))
    run(capsys, "dynamics", "g2", "--noise", "0.01", "--seed", "2", "-o", str(b))
    assert a.read_bytes() != b.read_bytes()


def test_negative_range_start(tmp_path, capsys):
    out = tmp_path / "ls.csv"
    assert main(["lineshape", "--grid", "-15:70:171", "-o", str(out)]) == 0
    d = read_csv(out, ("detuning_GHz",))
    assert d["detuning_GHz"][0] == -15.0 and d["detuning_GHz"][-1] == 70.0
    assert main(["dynamics", "rabi", "--t-range", "0:1us:11", "--delta", "-0.5", "-o", str(tmp_path / "r.csv")]) == 0


def test_fit_rabi_all_free_is_singular(tmp_path, capsys):
    data = tmp_path / "r.csv"
    assert main(["dynamics", "rabi", "--t-range", "0:3us:301", "--omega-r", "5", "--delta", "0.5",
                 "--gamma", "0.5", "--noise", "0.01", "--seed", "3", "-o", str(data)]) == 0
    out = tmp_path / "fit.json"
    code = main(["fit", "rabi", "--data", str(data), "--free", "omega_R,delta,gamma,contrast", "-o", str(out)])
    assert code == 3
    assert json.loads(out.read_text())["status"] == "singular"
