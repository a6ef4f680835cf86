import json

import pytest

from praclab import cli

TINY_INI = """
[model]
d_model = 16
n_heads = 2
n_layers = 2
d_ff = 32

[train]
steps = 500
batch = 8
eval_grids = 4

[attack]
n_iter = 10
swap_every = 2
n_val_grids = 1

[eval]
reps = 1

[run]
targets = 30
clean_reps = 1
finetune_steps = 1
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    ini = root / "tiny.ini"
    ini.write_text(TINY_INI)
    base = ["--config", str(ini), "--seed", "5", "--out", str(root / "art")]
    codes = {}
    codes["gen"] = cli.main(["gen-data", *base])
    # enough steps for well-formed outputs; eval exits nonzero when none are valid
    codes["train"] = cli.main(["train", *base, "--allow-weak"])
    codes["attack"] = cli.main(["attack", *base, "--method", "prac"])
    codes["ce"] = cli.main(["attack", *base, "--method", "ce"])
    codes["avg"] = cli.main(["attack", *base, "--ablation", "avg_grad"])
    patch = root / "art" / "attacks" / "prac" / "target_30.png"
    codes["ssr"] = cli.main(["eval", *base, "--suite", "ssr", "--patch", str(patch)])
    codes["ce_ssr"] = cli.main(["eval", *base, "--suite", "ssr",
                                "--patch", str(root / "art" / "attacks" / "ce" / "target_30.png")])
    codes["clean"] = cli.main(["eval", *base, "--suite", "clean", "--target", "30"])
    codes["position"] = cli.main(["eval", *base, "--suite", "position", "--patch", str(patch)])
    codes["transfer"] = cli.main(["eval", *base, "--suite", "transfer", "--patch", str(patch)])
    codes["report"] = cli.main(["report", *base])
    return root, base, codes


def test_pipeline_exit_codes(pipeline):
    _, _, codes = pipeline
    assert codes == {k: 0 for k in codes}


def test_pipeline_artifacts(pipeline):
    root, _, _ = pipeline
    art = root / "art"
    assert (art / "catalog.jsonl").read_text().count("\n") == 40
    assert (art / "victim.tvlm").exists()
    train = json.loads((art / "train.json").read_text())
    meta = json.loads((art / "attacks" / "prac" / "target_30.json").read_text())
    assert meta["config_hash"] == train["config_hash"] and meta["seed"] == 5
    assert (art / "attacks" / "prac" / "target_30.log.jsonl").exists()
    avg_log = (art / "attacks" / "prac+avg_grad" / "target_30.log.jsonl").read_text()
    assert "pcgrad_bypassed" in avg_log
    reports = sorted(p.name for p in (art / "reports").iterdir())
    assert "prac_target30.jsonl" in reports and "clean_target30.jsonl" in reports
    assert any(n.startswith("position_prac") for n in reports)
    text = (art / "report.md").read_text()
    assert "| clean | prac | ce |" in text.replace("| row | ", "| ")
    assert (art / "eval-ssr.config.ini").read_text().startswith(f"# config_hash = {train['config_hash']}")


def test_gen_data_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert cli.main(["gen-data", "--seed", "3", "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a" / "catalog.jsonl").read_bytes() == (tmp_path / "b" / "catalog.jsonl").read_bytes()


def test_seed_is_required(tmp_path, capsys):
    assert cli.main(["gen-data", "--out", str(tmp_path)]) == 2
    assert "--seed is required" in capsys.readouterr().err


def test_env_var_sets_artifact_root(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.ENV_ROOT, str(tmp_path / "env"))
    assert cli.main(["gen-data", "--seed", "1"]) == 0
    assert (tmp_path / "env" / "catalog.jsonl").exists()


def test_unknown_config_key_rejected(tmp_path, capsys):
    ini = tmp_path / "bad.ini"
    ini.write_text("[attack]\nstep = 3\n")
    assert cli.main(["gen-data", "--seed", "1", "--config", str(ini), "--out", str(tmp_path)]) == 2
    assert "unknown key 'step'" in capsys.readouterr().err


def test_undersized_catalog_rejected(tmp_path):
    ini = tmp_path / "small.ini"
    ini.write_text("[catalog]\ncount = 12\n")
    assert cli.main(["gen-data", "--seed", "1", "--config", str(ini), "--out", str(tmp_path)]) == 2


def test_unknown_ablation_lists_valid_flags(pipeline, capsys):
    _, base, _ = pipeline
    assert cli.main(["attack", *base, "--ablation", "no_heads"]) == 2
    err = capsys.readouterr().err
    assert all(flag in err for flag in ("avg_grad", "no_init", "no_head_active", "no_Timg",
                                        "second_last_layer_only", "no_trajectory"))


def test_missing_patch_file(pipeline, capsys):
    _, base, _ = pipeline
    assert cli.main(["eval", *base, "--suite", "ssr", "--patch", "/nonexistent/p.png"]) == 2
    assert "does not exist" in capsys.readouterr().err


def test_corrupt_checkpoint(tmp_path, pipeline, capsys):
    root, _, _ = pipeline
    out = tmp_path / "art"
    out.mkdir()
    (out / "catalog.jsonl").write_bytes((root / "art" / "catalog.jsonl").read_bytes())
    (out / "victim.tvlm").write_bytes(b"TVLM" + b"\x00" * 10)
    assert cli.main(["eval", "--seed", "5", "--out", str(out), "--suite", "clean"]) == 2
    assert "error" in capsys.readouterr().err


def test_train_zero_steps_records_chance(tmp_path):
    ini = tmp_path / "t.ini"
    ini.write_text(TINY_INI)
    args = ["--config", str(ini), "--seed", "2", "--out", str(tmp_path)]
    assert cli.main(["gen-data", *args]) == 0
    assert cli.main(["train", *args, "--steps", "0"]) == 1
    rec = json.loads((tmp_path / "train.json").read_text())
    assert rec["steps"] == 0 and rec["accuracy"] < 0.9


def test_empty_report_warns(tmp_path):
    with pytest.warns(UserWarning, match="empty"):
        assert cli.main(["report", "--seed", "1", "--out", str(tmp_path)]) == 0


def test_conflicting_hashes_split_columns(pipeline, tmp_path):
    root, _, _ = pipeline
    src = root / "art" / "reports" / "prac_target30.jsonl"
    (tmp_path / "reports").mkdir()
    lines = src.read_text().splitlines()
    (tmp_path / "reports" / "a.jsonl").write_text("\n".join(lines) + "\n")
    head = json.loads(lines[0])
    head["config_hash"] = "other"
    (tmp_path / "reports" / "b.jsonl").write_text("\n".join([json.dumps(head)] + lines[1:]) + "\n")
    text = cli.build_report(tmp_path)
    assert "prac@other" in text
