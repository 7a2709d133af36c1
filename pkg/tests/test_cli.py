import json

import numpy as np
import pytest

from reptile.cli import combo_name, main, run
from reptile.config import ConfigError, load_config
from reptile.io import SCHEMA_LINE, read_csv


def test_defaults_roundtrip_through_resolved_text():
    for command in ("sine-demo", "fewshot", "combo-sweep", "overlap-sweep", "taylor-check", "manifold-demo"):
        cfg = load_config(command)
        again = load_config(command, text=cfg.to_text())
        assert again.sections == cfg.sections


def test_unknown_keys_and_sections_rejected():
    with pytest.raises(ConfigError, match="inner.kk"):
        load_config("fewshot", text="[inner]\nkk = 3\n")
    with pytest.raises(ConfigError, match="bogus"):
        load_config("fewshot", text="[bogus]\nx = 1\n")
    with pytest.raises(ConfigError, match="inner.k"):
        load_config("fewshot", text="[inner]\nk = three\n")


def test_combo_config_needs_disjoint_batches():
    with pytest.raises(ConfigError, match="batch_size"):
        load_config("combo-sweep", text="[inner]\nbatch_size = 20\n")
    with pytest.raises(ConfigError, match="all-zero"):
        load_config("combo-sweep", text="[run]\ncombos = 0,0,0,0\n")


def test_list_values_parse():
    cfg = load_config("combo-sweep", text="[run]\ncombos = 1,0,0,0; 1,1,1,1\nnormalizations = average\n")
    assert cfg["run"]["combos"] == ((1, 0, 0, 0), (1, 1, 1, 1))
    assert cfg["run"]["normalizations"] == ("average",)


def test_combo_names():
    assert combo_name((1, 1, 0, 0), "sum") == "g1+g2_sum"
    assert combo_name((0, 0, 0, 1), "average") == "g4_average"


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[manifold]\nnope = 1\n")
    assert main(["manifold-demo", "--config", str(bad), "--out", str(tmp_path / "a")]) == 2
    far = tmp_path / "far.ini"
    far.write_text("[manifold]\nscenario = lines\niterations = 10\nrecord_every = 5\n")
    assert main(["manifold-demo", "--config", str(far), "--out", str(tmp_path / "b")]) == 4
    ok = tmp_path / "ok.ini"
    ok.write_text("[manifold]\nscenario = lines\niterations = 20000\n")
    assert main(["manifold-demo", "--config", str(ok), "--out", str(tmp_path / "c")]) == 0
    diverge = tmp_path / "div.ini"
    diverge.write_text("[task]\nfamily = quadratic\n[study]\nalphas = 1e-3,1e-2,1e-1,1e200\nn_samples = 3\nks = 3\ncheck = maml\n")
    assert main(["taylor-check", "--config", str(diverge), "--out", str(tmp_path / "d")]) in (0, 4)


def test_manifold_constant_step_is_flagged(tmp_path):
    # the two random subspaces do not intersect, so a fixed step keeps oscillating between them
    art = run("manifold-demo", out=tmp_path, text="[manifold]\niterations = 20000\nanneal = false\n")
    assert not art.passed and not art.summary["converged"]
    assert art.summary["final_distance"] > 1e-6


def test_outputs_have_schema_and_resolved_config(tmp_path):
    art = run("manifold-demo", out=tmp_path, text="[manifold]\nscenario = lines\niterations = 2000\nrecord_every = 100\n")
    header, rows = read_csv(tmp_path / "study_manifold_trace.csv")
    assert header == ["iter", "phi0", "phi1", "distance"]
    assert len(rows) == 21
    resolved = (tmp_path / "config.resolved").read_text()
    assert "iterations = 2000" in resolved and "tolerance = 1e-06" in resolved
    assert json.loads((tmp_path / "eval_summary.json").read_text())["oracle"] == pytest.approx([1.0, 0.0])


_TINY_FEWSHOT = """
[outer]
iterations = 6
meta_batch = 3
[eval]
trials = 20
every = 3
curve_trials = 5
steps = 3
[run]
algorithms = reptile,maml,joint
"""


def test_fewshot_runs_are_byte_identical_across_workers(tmp_path):
    a = run("fewshot", out=tmp_path / "a", text=_TINY_FEWSHOT, workers=1)
    b = run("fewshot", out=tmp_path / "b", text=_TINY_FEWSHOT, workers=3)
    for f in a.files:
        if f.suffix == ".csv":
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
            assert f.read_text().startswith(SCHEMA_LINE)
    assert set(a.summary) == {"reptile", "maml", "joint"}


def test_zero_iterations_gives_chance(tmp_path):
    art = run("fewshot", out=tmp_path, text="[outer]\niterations = 0\n[eval]\nevery = 0\n[run]\nalgorithms = reptile\n")
    r = art.summary["reptile"]
    assert abs(r["accuracy"] - 0.2) < 4 * r["stderr"] + 0.01


def test_sine_demo_small(tmp_path):
    text = "[outer]\niterations = 5\n[run]\nmaml_iterations = 2\n[inner]\nk = 3\n[eval]\ntrials = 3\n"
    art = run("sine-demo", out=tmp_path, text=text, svg=True)
    header, rows = read_csv(tmp_path / "study_sine_curves.csv")
    assert header == ["run", "x", "f_pre", "f_post", "f_true"]
    assert len(rows) == 3 * 50
    assert (tmp_path / "sine_curves.svg").read_text().startswith("<svg")
    assert set(art.summary) == {"random-init", "reptile", "maml"}


def test_combo_and_overlap_small(tmp_path):
    combo = run("combo-sweep", out=tmp_path / "c", text="[outer]\niterations = 3\n[eval]\ntrials = 5\nevery = 0\n[run]\ncombos = 1,0,0,0; 1,1,1,1\nnormalizations = sum\n")
    assert set(combo.summary) == {"g1_sum", "g1+g2+g3+g4_sum"}
    assert (tmp_path / "c" / "study_combo_g1_sum.csv").exists()
    ov = run("overlap-sweep", out=tmp_path / "o", text="[outer]\niterations = 2\n[eval]\ntrials = 5\n[sweep]\nvalues = 1,5\n")
    header, rows = read_csv(tmp_path / "o" / "study_overlap.csv")
    assert len(rows) == 8 and header[:3] == ["axis", "value", "arm"]
    with pytest.raises(ConfigError):
        run("overlap-sweep", out=tmp_path / "p", text="[task]\ntail_shots = 0\n[outer]\niterations = 1\n")


def test_taylor_check_on_quadratics(tmp_path):
    text = "[task]\nfamily = quadratic\n[study]\nn_samples = 20\nks = 2\ncheck = maml,reptile\n"
    art = run("taylor-check", out=tmp_path, text=text)
    assert art.summary["reptile_k2"]["flag"] == "exact"
    assert art.passed
    header, rows = read_csv(tmp_path / "study_coefficients.csv")
    assert ["2", "reptile", "2", "1"] in rows
