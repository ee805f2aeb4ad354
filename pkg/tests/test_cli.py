import csv
import json
import subprocess
import sys

import pytest

from tafusion.cli import main
from tafusion.config import RunConfig, load_config, parse_config, with_overrides
from tafusion.errors import ConfigError

SMALL = """
[data]
n_subjects = 80
[model]
d_s = 4
hidden = 8
sparse_d = 4
sparse_hidden = 3
vitals_c_hf = 3
vitals_c_lf = 4
ecg_c_sig = 3
ecg_c_lf = 4
[pretrain]
max_epochs = 2
[fusion]
max_epochs = 2
[end_to_end]
max_epochs = 2
[eval]
folds = 4
n_perm = 100
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text(SMALL)
    return str(p)


def run(*argv):
    return main([*argv, "--log-level", "WARNING"])


# ------------------------------------------------------------------ config


def test_config_precedence():
    cfg = parse_config("[data]\nbeta_x = 0.5\nweights = 0, 2, 0, 0\n[run]\nseed = 4\n"
                       "[model]\nfreeze_encoders = yes\n[pretrain]\nlr = 0.001\n")
    assert cfg.data.beta_x == 0.5 and cfg.data.weights == (0, 2, 0, 0)
    assert cfg.seed == 4 and cfg.model.freeze_encoders
    assert cfg.model.pretrain.lr == 0.001 and cfg.model.fusion.lr == RunConfig().model.fusion.lr
    over = with_overrides(cfg, seed=9, task="regression")
    assert over.seed == 9 and over.data.seed == 9 and over.data.task == "regression"
    assert with_overrides(cfg).seed == 4
    assert RunConfig.from_dict(json.loads(cfg.canonical())) == cfg


def test_config_inline_comments():
    cfg = parse_config("[data]\nweights = 0, 2, 0, 0  ; labs only\ntask = regression # note\n")
    assert cfg.data.weights == (0, 2, 0, 0) and cfg.data.task == "regression"


@pytest.mark.parametrize("text", ["[data]\nn_subject = 3\n", "[extra]\na = 1\n",
                                  "[data]\nbeta_x = high\n", "[model]\nfreeze_encoders = maybe\n",
                                  "[model]\npretrain = 3\n", "no section\n", "[eval]\nfolds = 1\n",
                                  "[data]\ntask = survival\n"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.ini")


# --------------------------------------------------------------------- cli


def test_gen_twice_same_digest(tmp_path, cfg_file):
    digests = []
    for name, seed in (("a", "1"), ("b", "1"), ("c", "2")):
        assert run("gen", "--config", cfg_file, "--seed", seed, "--out", str(tmp_path / name)) == 0
        digests.append(json.loads((tmp_path / name / "manifest.json").read_text())["digest"])
        assert (tmp_path / name / "run_manifest.json").is_file()
    assert digests[0] == digests[1] != digests[2]
    for f in ("subjects.jsonl", "signals.bin", "signals.idx", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_errors_are_one_line(tmp_path, cfg_file, capsys):
    assert run("gen", "--config", cfg_file, "--out", str(tmp_path / "d")) == 0
    capsys.readouterr()
    cases = [
        ("train", "--config", cfg_file, "--data", str(tmp_path / "d"), "--out", str(tmp_path / "m")),
        ("train", "--config", cfg_file, "--data", str(tmp_path / "d"), "--out", str(tmp_path / "m"),
         "--checkpoints", str(tmp_path / "missing")),
        ("eval", "--data", str(tmp_path / "d"), "--bundle", str(tmp_path / "nope"), "--out", "x"),
        ("pretrain", "--data", str(tmp_path / "nothing"), "--out", "x"),
        ("pretrain", "--config", cfg_file, "--data", str(tmp_path / "d"), "--modalities", "eeg",
         "--out", "x"),
        ("frobnicate",),
    ]
    for argv in cases:
        assert run(*argv) == 2
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1 and err[0].startswith("error: config: ")


def test_gradcheck_command(capsys):
    assert run("gradcheck") == 0
    out = capsys.readouterr().out.strip().splitlines()
    worst = float(out[-1].split(":")[1])
    assert out[-1].startswith("max relative error") and worst < 1e-4
    assert any(l.startswith("two_modality_forward") for l in out)


def test_pipeline_outputs(tmp_path, cfg_file):
    d, c, m, r = (str(tmp_path / x) for x in "dcmr")
    common = ("--config", cfg_file, "--seed", "5")
    assert run("gen", *common, "--out", d) == 0
    assert run("pretrain", *common, "--data", d, "--modalities", "static,labs", "--out", c) == 0
    # checkpoints lack the vitals encoder
    assert run("train", *common, "--data", d, "--checkpoints", c, "--out", m) == 2
    assert run("train", *common, "--data", d, "--checkpoints", c, "--modalities",
               "static,labs", "--no-biattention", "--out", m) == 0
    assert run("eval", "--data", d, "--bundle", m, "--out", r) == 0
    rows = list(csv.reader(open(tmp_path / "r" / "metrics.csv")))
    assert rows[0] == ["manifest_id", "variant", "fold", "metric", "value"]
    assert {row[3] for row in rows[1:]} == {"auroc", "auprc"}
    assert {row[1] for row in rows[1:]} == {"no_biattention"}
    mid = json.loads((tmp_path / "r" / "run_manifest.json").read_text())["manifest_id"]
    for f in ("metrics.csv", "predictions.csv", "roc_points.csv", "pr_points.csv"):
        assert all(row[0] == mid for row in list(csv.reader(open(tmp_path / "r" / f)))[1:])
    for f in ("roc.png", "pr.png"):
        assert (tmp_path / "r" / f).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    # a differently seeded run must not reuse these checkpoints
    assert run("train", "--config", cfg_file, "--seed", "6", "--data", d, "--checkpoints", c,
               "--modalities", "static,labs", "--out", str(tmp_path / "m2")) == 2
    # training without pretraining needs no checkpoints
    assert run("train", *common, "--data", d, "--modalities", "static", "--no-pretrain",
               "--out", str(tmp_path / "m3")) == 0


def test_ablate_and_profile(tmp_path, cfg_file):
    d = str(tmp_path / "d")
    # enough subjects that every test fold holds both classes
    assert run("gen", "--config", cfg_file, "--n-subjects", "240", "--out", d) == 0
    a = tmp_path / "abl"
    assert run("ablate", "--config", cfg_file, "--data", d, "--modalities", "static,ecg",
               "--no-shared", "--out", str(a)) == 0
    rows = list(csv.reader(open(a / "scores.csv")))
    variants = {row[1] for row in rows[1:]}
    assert variants == {"full", "no_shared", "unimodal_static", "unimodal_ecg"}
    assert {row[2] for row in rows[1:]} == {"0", "1", "2", "3"}
    sig = list(csv.reader(open(a / "significance.csv")))
    assert {row[2] for row in sig[1:]} == {"no_shared", "unimodal_static", "unimodal_ecg"}
    assert all(0 < float(row[6]) <= 1 for row in sig[1:])
    assert (a / "ablation_auroc.png").is_file()
    p = tmp_path / "prof"
    assert run("profile", "--data", d, "--intervals", "5", "--out", str(p)) == 0
    rows = list(csv.reader(open(p / "missingness.csv")))
    assert len(rows) - 1 == 5 * (9 + 24)
    png = (p / "missingness.png").read_bytes()
    assert b"Software" not in png
    assert run("profile", "--data", d, "--intervals", "5", "--out", str(tmp_path / "prof2")) == 0
    assert (tmp_path / "prof2" / "missingness.png").read_bytes() == png
    assert (tmp_path / "prof2" / "missingness.csv").read_bytes() == (p / "missingness.csv").read_bytes()


def test_console_script_exit_code(tmp_path):
    r = subprocess.run([sys.executable, "-m", "tafusion.cli", "train", "--data", str(tmp_path),
                        "--out", str(tmp_path / "m")], capture_output=True, text=True)
    assert r.returncode == 2
    assert r.stdout == ""
    assert r.stderr.startswith("error: config: no dataset at")
