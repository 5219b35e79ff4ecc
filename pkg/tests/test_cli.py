import csv
import io
import subprocess
import sys

import pytest

from lgattn.cli import build_parser, main
from lgattn.config import RunConfig, defaults, parse_config
from lgattn.errors import ConfigError
from lgattn.seeding import derive_seed


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


# -- config ----------------------------------------------------------------------

def test_empty_file_gives_defaults(tmp_path):
    (tmp_path / "c.txt").write_text("")
    assert parse_config(tmp_path / "c.txt") == RunConfig()
    assert parse_config(text="# only a comment\n\n") == RunConfig()


def test_flags_override_file_override_defaults(tmp_path):
    (tmp_path / "c.txt").write_text("attn=local\nwindow=512\nsteps=700\n")
    cfg = parse_config(tmp_path / "c.txt", {"window": "64"})
    assert cfg.window == 64 and cfg.steps == 700 and cfg.attn == "local" and cfg.batch_size == 8


def test_group_without_group_size_names_the_key():
    with pytest.raises(ConfigError) as err:
        parse_config(text="attn=group\nwindow=32\n")
    assert "group_size" in str(err.value)


@pytest.mark.parametrize("text,key,line", [
    ("steps=10\nbogus=1\n", "bogus", 2),
    ("batch_size=eight\n", "batch_size", 1),
    ("mask_cross_doc=maybe\n", "mask_cross_doc", 1),
])
def test_bad_lines_report_key_and_line(text, key, line):
    with pytest.raises(ConfigError) as err:
        parse_config(text=text)
    assert key in str(err.value) and f"line {line}" in str(err.value)


def test_effective_config_is_sorted_and_round_trips():
    cfg = parse_config(text="attn=group\nwindow=32\ngroup_size=2\ntrain_data=x.txt\n")
    lines = cfg.to_text().splitlines()
    assert lines == sorted(lines) and len(lines) == len(defaults())
    assert parse_config(text=cfg.to_text()) == cfg


def test_model_seed_derived_from_run_seed():
    a, b = parse_config(flags={"seed": "1"}), parse_config(flags={"seed": "2"})
    assert a.model_config().seed == derive_seed(1, "init") != b.model_config().seed
    assert derive_seed(1, "init") == derive_seed(1, "init") != derive_seed(1, "data")


def test_help_lists_every_key_with_default(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["--help"])
    out = capsys.readouterr().out
    for key in defaults():
        assert f"  {key} = " in out
    assert "warmup = 200" in out and "window = none" in out


# -- check -------------------------------------------------------------------------

def _rows(out):
    return list(csv.DictReader(io.StringIO(out)))


def test_check_all_pass(capsys):
    code, out, _ = run(capsys, "check")
    rows = _rows(out)
    assert code == 0
    assert {r["suite"] for r in rows} == {"blockwise", "approx", "group", "rope", "alibi", "cache", "grad"}
    assert all(r["passed"] == "pass" for r in rows)


def test_check_suite_filter(capsys):
    code, out, _ = run(capsys, "check", "rope")
    assert code == 0 and {r["suite"] for r in _rows(out)} == {"rope"}


def test_check_fault_injection_fails(capsys):
    code, out, _ = run(capsys, "check", "blockwise", "--fault", "blockwise_mask")
    (row,) = _rows(out)
    assert code == 1 and row["passed"] == "FAIL"
    assert float(row["max_diff"]) > float(row["tolerance"])


def test_check_unknown_suite(capsys):
    code, _, err = run(capsys, "check", "nonsense")
    assert code == 2 and "nonsense" in err


# -- other subcommands -------------------------------------------------------------------

def test_flops_csv(capsys):
    code, out, _ = run(capsys, "flops", "--attn", "global,group", "--D", "768", "--N", "16384", "--W", "512",
                       "--L", "4")
    rows = _rows(out)
    assert code == 0 and [r["kind"] for r in rows] == ["global", "group"]
    assert float(rows[1]["attn_ops"]) / float(rows[0]["attn_ops"]) == 0.28125


def test_flops_bad_kind(capsys):
    code, _, err = run(capsys, "flops", "--attn", "dilated")
    assert code == 2 and "dilated" in err


def test_train_eval_generate_round_trip(tmp_path, capsys):
    corpus = tmp_path / "corpus.txt"
    corpus.write_text("\n".join(["abcabcabcabc" * 3, "xyzxyzxyz" * 4, "hello hello hello"] * 4) + "\n")
    packed = tmp_path / "packed.bin"
    code, _, err = run(capsys, "data", "pack", "--input", str(corpus), "--seq-len", "32", "--out", str(packed))
    assert code == 0 and "12 documents" in err
    cfg = tmp_path / "run.txt"
    cfg.write_text("n_layers=2\nhidden_size=16\nn_heads=2\nhead_dim=8\nff_hidden=32\nmax_seq_len=32\n"
                   "attn=group\nwindow=4\ngroup_size=2\nsteps=6\nwarmup=2\nseq_len=32\nbatch_size=2\nlog_every=2\n")
    out_dir = tmp_path / "out"
    code, out, _ = run(capsys, "train", "--config", str(cfg), "--train_data", str(packed), "--eval_data",
                       str(corpus), "--out_dir", str(out_dir))
    assert code == 0
    assert "group_size=2" in out.splitlines() and "steps=6" in out.splitlines()
    assert (out_dir / "metrics.csv").read_text().splitlines()[0] == "step,lr,loss"
    assert len((out_dir / "metrics.csv").read_text().splitlines()) == 4
    assert (out_dir / "eval.csv").read_text().startswith("bucket_min,bucket_max,count,ppl\n")

    code, out, _ = run(capsys, "eval", "--checkpoint", str(out_dir / "checkpoint.zbra"), "--data", str(corpus))
    rows = _rows(out)
    assert code == 0 and rows[0]["count"] == "12" and float(rows[0]["ppl"]) > 1

    argv = ["generate", "--checkpoint", str(out_dir / "checkpoint.zbra"), "--prompt", "abc", "--max-new", "5"]
    code, first, _ = run(capsys, *argv)
    code2, second, _ = run(capsys, *argv)
    assert code == code2 == 0 and first == second
    code, _, _ = run(capsys, *argv, "--attn-override", "global")
    assert code == 0
    code, _, err = run(capsys, *argv, "--attn-override", "hidden_size=8")
    assert code == 2 and "hidden_size" in err


def test_train_without_data_is_config_error(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--out_dir", str(tmp_path / "o"), "--steps", "300")
    assert code == 2 and "train_data" in err


def test_missing_checkpoint_is_runtime_error(tmp_path, capsys):
    code, _, _ = run(capsys, "eval", "--checkpoint", str(tmp_path / "none"), "--data", str(tmp_path))
    assert code == 3


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "lgattn.cli", "flops", "--attn", "local", "--N", "100", "--W",
                           "10", "--D", "2"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.splitlines()[1].split(",")[:3] == ["local", "100", "2000"]
