import subprocess
import sys

import numpy as np
import pytest

from setseq.cli import main, parse_candidates, parse_config_file, parse_ordering
from setseq.harness import ConfigError, read_metrics

TINY_SORT = ["--n", "3", "--process-steps", "1", "--glimpses", "1",
             "--max-steps", "20", "--val-every", "10", "--val-size", "30",
             "--test-size", "40", "--batch-size", "8", "--lstm-hidden", "8",
             "--memory-dim", "8", "--reader-hidden", "6", "--seed", "5"]


def run_cli(args):
    return subprocess.run([sys.executable, "-m", "setseq.cli", *args],
                          capture_output=True, text=True)


def test_parse_ordering_and_candidates():
    assert parse_ordering("5,1,3,4,2") == (5, 1, 3, 4, 2)
    assert parse_candidates("1,2,3;3,2,1") == ((1, 2, 3), (3, 2, 1))
    with pytest.raises(ConfigError):
        parse_ordering("1,two,3")


def test_config_file_parsing(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("""# sorting run
task = sort
n = 4            # set size
learning_rate = 0.05
mask_visited = false
fixed_ordering = 2,1,3
""")
    values = parse_config_file(path)
    assert values == {"task": "sort", "n": 4, "learning_rate": 0.05,
                      "mask_visited": False, "fixed_ordering": (2, 1, 3)}
    bad = tmp_path / "bad.cfg"
    bad.write_text("not_a_key = 3\n")
    with pytest.raises(ConfigError):
        parse_config_file(bad)
    worse = tmp_path / "worse.cfg"
    worse.write_text("just some words\n")
    with pytest.raises(ConfigError):
        parse_config_file(worse)


def test_train_sort_cli_writes_run_dir(tmp_path):
    out = tmp_path / "run"
    # reader/memory dims come from a config file; flags take precedence
    cfg = tmp_path / "small.cfg"
    cfg.write_text("reader_hidden = 6\nmemory_dim = 8\nn = 2\n")
    code = main(["train-sort", "--config", str(cfg), *TINY_SORT, "--out", str(out)])
    assert code == 0
    assert (out / "metrics.csv").exists()
    assert (out / "model.ckpt").exists()
    cfg_text = (out / "config.txt").read_text()
    assert "n = 3" in cfg_text  # flag overrode the config file
    rows = read_metrics(out / "metrics.csv")
    assert any(m == "exact_acc" and sp == "test" for _, sp, m, _ in rows)


def test_eval_subcommand_round_trips(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train-sort", *TINY_SORT, "--out", str(out)]) == 0
    test_rows = [r for r in read_metrics(out / "metrics.csv") if r[1] == "test"]
    capsys.readouterr()
    code = main(["eval", "--checkpoint", str(out / "model.ckpt"),
                 "--config", str(out / "config.txt")])
    assert code == 0
    printed = capsys.readouterr().out
    exact = [v for _, _, m, v in test_rows if m == "exact_acc"][0]
    assert f"exact_acc = {exact}" in printed


def test_report_subcommand(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train-sort", *TINY_SORT, "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["report", str(out / "metrics.csv")]) == 0
    printed = capsys.readouterr().out
    assert "exact_acc" in printed and "last" in printed


def test_config_error_exit_code_two(tmp_path):
    assert main(["train-sort", "--n", "0", "--max-steps", "1"]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("mystery = 1\n")
    assert main(["train-sort", "--config", str(bad)]) == 2


def test_training_abort_exit_code_one(capsys):
    # An absurd learning rate blows up the softmax head: log-probabilities hit
    # -inf and the run must abort with diagnostics.
    code = main(["train-star", "--children", "3", "--vocab", "5",
                 "--train-samples", "50", "--max-steps", "50", "--val-every",
                 "25", "--val-size", "30", "--batch-size", "4",
                 "--lstm-hidden", "8", "--embed-dim", "6", "--seed", "2",
                 "--learning-rate", "1e308", "--clip-norm", "0"])
    assert code == 1
    err = capsys.readouterr().err
    assert "training aborted" in err and "step" in err
    assert "|" in err  # parameter norm dump


def test_cli_subprocess_entry_point(tmp_path):
    out = tmp_path / "run"
    proc = run_cli(["train-sort", *TINY_SORT, "--out", str(out)])
    assert proc.returncode == 0, proc.stderr
    assert "exact_acc" in proc.stdout
    proc = run_cli(["train-sort", "--n", "-3"])
    assert proc.returncode == 2


def test_order_search_cli(tmp_path):
    out = tmp_path / "search"
    code = main(["order-search", "--vocab", "4", "--gram-len", "3",
                 "--corpus-train", "80", "--corpus-valid", "40",
                 "--max-steps", "16", "--val-every", "8", "--batch-size", "4",
                 "--lstm-hidden", "8", "--embed-dim", "6", "--seed", "2",
                 "--pretrain-steps", "6", "--pretrain-orderings", "2",
                 "--candidates", "1,2,3;3,2,1", "--out", str(out)])
    assert code == 0
    assert (out / "orderings.tsv").exists()
    for line in (out / "orderings.tsv").read_text().splitlines():
        pi = tuple(int(x) for x in line.split("\t")[2].split(","))
        assert pi in ((1, 2, 3), (3, 2, 1))


def test_train_ngram_cli_fixed_ordering(tmp_path):
    out = tmp_path / "ngram"
    code = main(["train-ngram", "--vocab", "4", "--gram-len", "3",
                 "--corpus-train", "80", "--corpus-valid", "40",
                 "--max-steps", "10", "--val-every", "5", "--batch-size", "4",
                 "--lstm-hidden", "8", "--embed-dim", "6", "--seed", "2",
                 "--ordering", "3,1,2", "--out", str(out)])
    assert code == 0
    assert "perplexity" in (out / "metrics.csv").read_text().replace(",", " ")


def test_train_star_cli(tmp_path):
    out = tmp_path / "star"
    code = main(["train-star", "--children", "3", "--vocab", "5",
                 "--train-samples", "50", "--order", "head_last",
                 "--max-steps", "10", "--val-every", "5", "--val-size", "50",
                 "--batch-size", "4", "--lstm-hidden", "8", "--embed-dim", "6",
                 "--seed", "2", "--out", str(out)])
    assert code == 0
    rows = read_metrics(out / "metrics.csv")
    assert any(m == "oracle_nll" for _, _, m, _ in rows)