import json
from pathlib import Path

import pytest

from trackrank.cli import main
from trackrank.config import load_config
from trackrank.data import generate_synthetic, load_dataset
from trackrank.trainer import untrained_checkpoint

SMALL = {
    "synth": {"num_identities": 16, "tracklets_per_identity": 4, "frames_per_tracklet": 8,
              "feature_dim": 16, "sigma_within": 0.1, "sigma_between": 1.0,
              "camera_shift": 1.0},
    "sampler": {"P": 4, "K": 4, "T": 4},
    "train": {"steps": 150},
}


@pytest.fixture
def config(tmp_path):
    def write(**overrides):
        doc = json.loads(json.dumps(SMALL))
        for key, value in overrides.items():
            if isinstance(value, dict) and isinstance(doc.get(key), dict):
                doc[key].update(value)
            else:
                doc[key] = value
        path = tmp_path / f"cfg_{len(list(tmp_path.glob('cfg_*')))}.json"
        path.write_text(json.dumps(doc))
        return str(path)
    return write


SEPARABLE = Path(__file__).resolve().parents[1] / "configs" / "separable.json"


def run(*argv):
    return main([str(a) for a in argv])


# synth

def test_synth_default_is_loadable(tmp_path, capsys):
    assert run("synth", "--out", tmp_path / "d") == 0
    train = load_dataset(tmp_path / "d" / "train.json")
    test = load_dataset(tmp_path / "d" / "test.json")
    assert train.num_identities == 32 and test.num_identities == 32
    assert test.with_role("query") and test.with_role("gallery")
    assert "train_manifest" in capsys.readouterr().out


def test_synth_same_seed_is_byte_identical(tmp_path, config):
    cfg = config()
    for d in ("a", "b"):
        assert run("synth", "--config", cfg, "--seed", 7, "--out", tmp_path / d) == 0
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                     if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*")
                     if p.is_file())
    assert files_a == files_b and files_a
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


@pytest.mark.parametrize("value", [0, -1.0])
def test_synth_rejects_bad_sigma(tmp_path, config, capsys, value):
    cfg = config(synth={"sigma_between": value})
    assert run("synth", "--config", cfg, "--out", tmp_path / "d") == 2
    assert "sigma_between" in capsys.readouterr().err
    assert not (tmp_path / "d").exists()


def test_unknown_config_key(tmp_path, config, capsys):
    cfg = config(train={"stpes": 3})
    assert run("train", "--config", cfg, "--out", tmp_path / "o") == 2
    assert "stpes" in capsys.readouterr().err


def test_existing_output_needs_force(tmp_path, config):
    out = tmp_path / "d"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    assert run("synth", "--config", config(), "--out", out) == 2
    assert (out / "keep.txt").exists()
    assert run("synth", "--config", config(), "--out", out, "--force") == 0
    assert not (out / "keep.txt").exists()


# train / eval

@pytest.fixture
def trained(tmp_path):
    cfg = str(SEPARABLE)
    out = tmp_path / "run"
    assert run("train", "--config", cfg, "--out", out) == 0
    return cfg, out


def test_train_reaches_high_map(trained):
    _, out = trained
    report = json.loads((out / "train.json").read_text())
    assert report["final"]["map"] >= 0.95
    assert (out / "checkpoint" / "checkpoint.json").exists()
    lines = (out / "loss_log.jsonl").read_text().splitlines()
    assert len(lines) == 500


def test_train_echoes_requested_head(tmp_path, config):
    out = tmp_path / "rnn"
    assert run("train", "--config", config(train={"steps": 2}), "--head", "rnn",
               "--readout", "output_average", "--hidden-size", 8, "--out", out) == 0
    head = json.loads((out / "train.json").read_text())["train_config"]["head"]
    assert head == {"kind": "rnn", "cell": "lstm", "hidden_size": 8,
                    "readout": "output_average"}


def test_missing_dataset_leaves_nothing(tmp_path, config):
    cfg = config(dataset={"train": str(tmp_path / "missing.json"),
                          "test": str(tmp_path / "missing.json")})
    out = tmp_path / "o"
    assert run("train", "--config", cfg, "--out", out) != 0
    assert not out.exists()


def test_train_from_manifests(tmp_path, config):
    assert run("synth", "--config", config(), "--out", tmp_path / "d") == 0
    out = tmp_path / "o"
    assert run("train", "--config", config(train={"steps": 3}),
               "--train-manifest", tmp_path / "d" / "train.json",
               "--test-manifest", tmp_path / "d" / "test.json", "--out", out) == 0
    assert (out / "train.json").exists()


def test_eval_report_structure(trained, capsys):
    cfg, out = trained
    capsys.readouterr()
    assert run("eval", "--config", cfg, "--checkpoint", out / "checkpoint", "--json") == 0
    report = json.loads(capsys.readouterr().out)
    assert {"map", "cmc", "num_valid_queries", "runtime"} <= set(report)
    assert set(report["cmc"]) == {"1", "5", "10", "20"}


def test_eval_rerank_lambda_one_is_identity(trained, capsys):
    cfg, out = trained
    ck = out / "checkpoint"
    capsys.readouterr()
    run("eval", "--config", cfg, "--checkpoint", ck, "--json")
    plain = json.loads(capsys.readouterr().out)
    run("eval", "--config", cfg, "--checkpoint", ck, "--json", "--rerank", "--lambda", 1)
    reranked = json.loads(capsys.readouterr().out)
    assert reranked["rerank"] and reranked["map"] == plain["map"]


def test_untrained_checkpoint_scores_lower(tmp_path, trained, capsys):
    cfg, out = trained
    rc = load_config(cfg)
    train_ds, _ = generate_synthetic(rc.synth_config())
    untrained = tmp_path / "untrained"
    untrained_checkpoint(train_ds, rc.train_config()).save(untrained)
    capsys.readouterr()
    run("eval", "--config", cfg, "--checkpoint", untrained, "--json")
    before = json.loads(capsys.readouterr().out)["map"]
    run("eval", "--config", cfg, "--checkpoint", out / "checkpoint", "--json")
    after = json.loads(capsys.readouterr().out)["map"]
    assert before < after


def test_zero_steps_is_a_config_error(tmp_path):
    assert run("train", "--config", SEPARABLE, "--steps", 0, "--out", tmp_path / "o") == 2


def test_eval_requires_checkpoint(capsys):
    assert run("eval") == 2


def test_resume_flag_continues(tmp_path, config):
    cfg = config(train={"steps": 4})
    assert run("train", "--config", cfg, "--out", tmp_path / "full") == 0
    assert run("train", "--config", cfg, "--steps", 2, "--out", tmp_path / "half") == 0
    assert run("train", "--config", cfg, "--resume", tmp_path / "half" / "checkpoint",
               "--out", tmp_path / "rest") == 0
    full = (tmp_path / "full" / "loss_log.jsonl").read_text().splitlines()
    half = (tmp_path / "half" / "loss_log.jsonl").read_text().splitlines()
    rest = (tmp_path / "rest" / "loss_log.jsonl").read_text().splitlines()
    assert half + rest == full


# gradcheck

def test_gradcheck_single_row(capsys):
    assert run("gradcheck", "--head", "avg", "--seeds", 2, "--json") == 0
    report = json.loads(capsys.readouterr().out)
    assert [r["name"] for r in report["rows"]] == ["avg"]


def test_gradcheck_tight_tolerance_fails(capsys):
    code = run("gradcheck", "--head", "gru_final", "--head", "triplet", "--seeds", 2,
               "--tolerance", 1e-12)
    assert code == 1
    out = capsys.readouterr().out
    assert out.count("FAIL") == 2


def test_gradcheck_unknown_target():
    assert run("gradcheck", "--head", "bogus") == 2


# compare

def test_compare_rows_and_determinism(tmp_path, config, capsys):
    cfg = config(train={"steps": 20})
    args = ("compare", "--config", cfg, "--heads", "avg", "att_fc_softmax", "--seeds", 2)
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    a = json.loads((tmp_path / "a" / "compare.json").read_text())
    b = json.loads((tmp_path / "b" / "compare.json").read_text())
    assert [r["name"] for r in a["rows"]] == ["image (T=1)", "avg", "att_fc_softmax"]
    assert a["rows"][0]["T"] == 1 and a["rows"][1]["T"] == 4
    assert a["rows"] == b["rows"]
    assert ((tmp_path / "a" / "compare.txt").read_text()
            == (tmp_path / "b" / "compare.txt").read_text())
    table = (tmp_path / "a" / "compare.txt").read_text()
    assert "mAP" in table and "CMC-20" in table
