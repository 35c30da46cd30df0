import csv
import io
import os
import subprocess
import sys

import pytest

from outlierbft.cli import main
from outlierbft.detector import compute_svd, estimate_rank, load_model
from outlierbft.fusion import fit_norm, read_matrix_csv, write_matrix_csv


def run(*argv):
    return main([str(a) for a in argv])


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def gen_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("gen")
    assert run("gen", "--out", d, "--seed", 7, "--quiet") == 0
    return d


def test_gen_is_deterministic(gen_dir, tmp_path):
    assert run("gen", "--out", tmp_path, "--seed", 7, "--quiet") == 0
    for name in ("data.csv", "labels.csv"):
        assert (tmp_path / name).read_bytes() == (gen_dir / name).read_bytes()
    assert run("gen", "--out", tmp_path / "other", "--seed", 8, "--quiet") == 0
    assert (tmp_path / "other" / "data.csv").read_bytes() != (gen_dir / "data.csv").read_bytes()


def test_gen_labels_have_one_row_per_slot(tmp_path):
    assert run("gen", "--out", tmp_path, "--slots", 40, "--devices", 10, "--rank", 3,
               "--corrupt-fraction", 0.2, "--quiet") == 0
    lab = rows(tmp_path / "labels.csv")
    assert len(lab) == 41 and len(lab[0]) == 11
    assert all(sum(int(x) for x in r[1:]) == 2 for r in lab[1:])


def test_gen_noiseless_rank(tmp_path):
    assert run("gen", "--out", tmp_path, "--sigma", 0, "--quiet") == 0
    _, D = read_matrix_csv(tmp_path / "data.csv")
    assert D.shape == (100, 100)
    stats = fit_norm(D)
    Dn = (D - stats.mean[:, None]) / stats.scale[:, None]
    assert estimate_rank(compute_svd(Dn), 1e-6) == 5


def test_train_reports_generated_rank(gen_dir, tmp_path, capsys):
    assert run("train", gen_dir / "data.csv", "--out", tmp_path) == 0
    assert "rank 5" in capsys.readouterr().out
    assert load_model(tmp_path / "model.json").rank == 5


def test_train_epsilon_near_one_gives_rank_one(gen_dir, tmp_path):
    assert run("train", gen_dir / "data.csv", "--epsilon", 0.999, "--model-out", tmp_path / "m.json",
               "--quiet") == 0
    assert load_model(tmp_path / "m.json").rank == 1


def test_malformed_csv_is_a_data_error(tmp_path, capsys):
    p = tmp_path / "bad.csv"
    p.write_text("a.0,b.0\n1,2\n3,x\n")
    assert run("train", p) == 3
    assert "line 3" in capsys.readouterr().err


def _split(path, out_dir, cut):
    lay, D = read_matrix_csv(path)
    parts = []
    for name, M in (("train.csv", D[:, :cut]), ("test.csv", D[:, cut:])):
        buf = io.StringIO()
        write_matrix_csv(buf, lay, M)
        (out_dir / name).write_text(buf.getvalue())
        parts.append(out_dir / name)
    return lay, D, parts


def test_detect_flag_rate_on_clean_data(tmp_path):
    assert run("gen", "--out", tmp_path, "--slots", 300, "--seed", 3, "--quiet") == 0
    _, _, (tr, te) = _split(tmp_path / "data.csv", tmp_path, 200)
    assert run("train", tr, "--model-out", tmp_path / "m.json", "--quiet") == 0
    out = tmp_path / "det.csv"
    assert run("detect", te, "--model", tmp_path / "m.json", "--out", out, "--quiet") == 0
    body = rows(out)[1:]
    assert len(body) == 100
    flags = sum(len(r[1].split(";")) for r in body if r[1])
    assert abs(flags / (100 * 100) - 0.05) <= 0.02


def test_detect_lists_planted_spike(gen_dir, tmp_path):
    assert run("train", gen_dir / "data.csv", "--model-out", tmp_path / "m.json", "--quiet") == 0
    lay, D = read_matrix_csv(gen_dir / "data.csv")
    D = D.copy()
    D[3, 7] += 50 * D[3].std()
    buf = io.StringIO()
    write_matrix_csv(buf, lay, D)
    (tmp_path / "spiked.csv").write_text(buf.getvalue())
    for extra in ((), ("--masked",)):
        out = tmp_path / "det.csv"
        assert run("detect", tmp_path / "spiked.csv", "--model", tmp_path / "m.json", "--out", out, "--quiet",
                   *extra) == 0
        row = rows(out)[1 + 7]
        assert row[0] == "7" and lay.names[3] in row[1].split(";")


def test_detect_empty_file(gen_dir, tmp_path, capsys):
    assert run("train", gen_dir / "data.csv", "--model-out", tmp_path / "m.json", "--quiet") == 0
    (tmp_path / "empty.csv").write_text("")
    capsys.readouterr()
    assert run("detect", tmp_path / "empty.csv", "--model", tmp_path / "m.json") == 0
    assert capsys.readouterr().out == ""


def test_detect_dimension_mismatch(gen_dir, tmp_path):
    assert run("train", gen_dir / "data.csv", "--model-out", tmp_path / "m.json", "--quiet") == 0
    (tmp_path / "small.csv").write_text("x.0\n1\n")
    assert run("detect", tmp_path / "small.csv", "--model", tmp_path / "m.json") == 3


def test_simulate_twice_is_identical(tmp_path):
    for d in ("a", "b"):
        assert run("simulate", "--preset", "baseline", "--slots", 4, "--out", tmp_path / d, "--quiet") == 0
    assert sorted(os.listdir(tmp_path / "a")) == sorted(os.listdir(tmp_path / "b"))
    run_a = [x for x in os.listdir(tmp_path / "a") if not x.endswith(".csv")][0]
    for name in os.listdir(tmp_path / "a" / run_a):
        assert (tmp_path / "a" / run_a / name).read_bytes() == (tmp_path / "b" / run_a / name).read_bytes()


def test_simulate_byzantine_beyond_third_fails(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('preset = "baseline"\n[scenario]\nslots = 3\n'
                   '[adversary]\nbyzantine_fraction = 0.4\n[run]\nengine = "kernel"\n')
    assert run("simulate", "--config", cfg, "--out", tmp_path, "--quiet") == 0
    d = [x for x in os.listdir(tmp_path) if os.path.isdir(tmp_path / x)][0]
    assert '"outcome": "consensus-failure"' in (tmp_path / d / "summary.json").read_text()


def test_simulate_config_errors(tmp_path):
    assert run("simulate", "--quiet") == 2
    assert run("simulate", "--config", tmp_path / "missing.toml") == 2
    cfg = tmp_path / "c.toml"
    cfg.write_text("[scenario]\nslotz = 3\n")
    assert run("simulate", "--config", cfg) == 2


def test_sweep_cells(tmp_path):
    spec = tmp_path / "s.toml"
    spec.write_text("trials = 2\nseed = 1\n[topology]\ndevices = 9\n"
                    "[axes]\np_d = [0.0, 0.46]\np_fa = [0.05, 0.5]\nf_raw = [0.0, 0.5]\n")
    assert run("sweep", "--config", spec, "--out", tmp_path / "o", "--quiet") == 0
    surf = rows(tmp_path / "o" / "surface.csv")
    cells = {(r[0], r[1]): dict(zip(surf[0], r)) for r in surf[1:]}
    assert abs(float(cells[("0.46", "0.05")]["analytic_f_raw_max"]) - 0.5782) <= 1e-4
    assert cells[("0.0", "0.5")]["zone"] == "fail zone"
    assert len(rows(tmp_path / "o" / "grid.csv")) == 1 + 8 * 2


def test_roc_output(tmp_path):
    cfg = tmp_path / "r.toml"
    cfg.write_text("seed = 4\n[data]\ndevices = 20\ntrain_slots = 100\ntest_slots = 50\n"
                   "[roc]\nmultipliers = [0.0, 1.0, 10.0, 100.0, 1000000.0]\n")
    assert run("roc", "--config", cfg, "--out", tmp_path, "--quiet") == 0
    body = [[float(x) for x in r] for r in rows(tmp_path / "roc.csv")[1:]]
    assert body[0][2] > 0.95 and body[-1][1:] == [0.0, 0.0]
    for a, b in zip(body, body[1:]):
        assert b[1] <= a[1] and b[2] <= a[2]


def test_bad_gen_rank_and_seed(tmp_path):
    assert run("gen", "--out", tmp_path, "--rank", 100) == 2
    with pytest.raises(SystemExit) as exc:
        run("gen", "--seed", -1)
    assert exc.value.code == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "outlierbft.cli", "gen", "--out", str(tmp_path), "--slots", "20",
                           "--devices", "8", "--rank", "2"], capture_output=True, text=True)
    assert proc.returncode == 0 and "data.csv" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "outlierbft.cli", "nope"], capture_output=True, text=True)
    assert proc.returncode == 2
