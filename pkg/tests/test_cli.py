"""End-to-end coverage of the command-line surface.

Each command is driven through ``main`` in-process so exit codes, stdout, and
stderr are all observable.  A module-scoped fixture trains one tiny joint
checkpoint and index that the query-side commands share; the ablation and
determinism tests train their own throwaway runs.
"""

import io
import json
import os
import subprocess
from contextlib import redirect_stderr, redirect_stdout

import pytest

from assertgen.cli import DEFAULTS, ENV_CONFIG, CliError, load_config, main
from assertgen.synthbench import SynthSpec, generate_synthetic, write_synthetic
from assertgen.tokenizer import load_tokenizer, tokenizer_fingerprint


def run_cli(*args):
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main([str(a) for a in args])
    return code, out.getvalue(), err.getvalue()


# Small enough that a full training run is a sub-second affair.
TINY = dict(
    d_model=16, encoder_layers=1, decoder_layers=1, heads=2, ff_multiplier=2,
    max_input_len=48, max_output_len=16, dropout=0.0, batch_size=4,
    max_epochs=2, k=2, patience=5, lr=1e-3, beam=3, vocab_size=150, seed=0,
)


def sets(**overrides):
    merged = dict(TINY, **overrides)
    return [flag for key, value in merged.items() for flag in ("--set", f"{key}={value}")]


@pytest.fixture(autouse=True)
def _no_env_config(monkeypatch):
    monkeypatch.delenv(ENV_CONFIG, raising=False)


@pytest.fixture(scope="module")
def cli_artifacts(tmp_path_factory):
    os.environ.pop(ENV_CONFIG, None)
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    bench = generate_synthetic(SynthSpec(n=16, family="copy", seed=0))
    write_synthetic(bench, data)
    art = {
        "root": root,
        "train_src": data / "copy-train.source",
        "train_tgt": data / "copy-train.target",
        "valid_src": data / "copy-valid.source",
        "valid_tgt": data / "copy-valid.target",
        "test_src": data / "copy-test.source",
        "test_tgt": data / "copy-test.target",
        "tok": root / "tok.vocab",
        "run": root / "run",
        "index": root / "codebase.idx",
        "inputs": root / "queries.txt",
    }
    code, out, _ = run_cli(
        "train-tokenizer", "--source", art["train_src"], "--target", art["train_tgt"],
        "--out", art["tok"], *sets(),
    )
    assert code == 0 and "hash " in out
    code, out, _ = run_cli(
        "train",
        "--train-source", art["train_src"], "--train-target", art["train_tgt"],
        "--valid-source", art["valid_src"], "--valid-target", art["valid_tgt"],
        "--tokenizer", art["tok"], "--out", art["run"], *sets(),
    )
    assert code == 0 and "best epoch" in out
    art["ckpt"] = art["run"] / "best.ckpt"
    code, out, _ = run_cli(
        "index", "--checkpoint", art["ckpt"], "--tokenizer", art["tok"],
        "--source", art["train_src"], "--target", art["train_tgt"],
        "--out", art["index"], *sets(),
    )
    assert code == 0 and "indexed 16 pairs" in out
    art["inputs"].write_text(
        "".join(line + "\n" for line in art["test_src"].read_text().splitlines()),
        encoding="utf-8",
    )
    return art


def test_defaults_are_the_baseline_config():
    assert load_config(None, []) == DEFAULTS


def test_config_file_then_set_flags_override_in_order(tmp_path):
    cfg = tmp_path / "conf"
    cfg.write_text("# comment\n\nlr = 0.001\nbatch_size=32\n", encoding="utf-8")
    loaded = load_config(str(cfg), ["lr=0.0005"])
    assert loaded["lr"] == 0.0005
    assert loaded["batch_size"] == 32
    assert loaded["k"] == DEFAULTS["k"]


def test_environment_variable_supplies_the_config_path(tmp_path, monkeypatch):
    env_cfg = tmp_path / "env-conf"
    env_cfg.write_text("beam=7\n", encoding="utf-8")
    monkeypatch.setenv(ENV_CONFIG, str(env_cfg))
    assert load_config(None, [])["beam"] == 7
    explicit = tmp_path / "explicit"
    explicit.write_text("beam=9\n", encoding="utf-8")
    assert load_config(str(explicit), [])["beam"] == 9


def test_unknown_config_key_is_rejected():
    with pytest.raises(CliError, match="unknown config key"):
        load_config(None, ["warmup=10"])


def test_value_coercion_covers_every_key_class():
    loaded = load_config(None, [
        "tie_embedding=yes", "index_refresh_batches=17", "prob_mode=linear", "k=3",
    ])
    assert loaded["tie_embedding"] is True
    assert loaded["index_refresh_batches"] == 17
    assert loaded["prob_mode"] == "linear"
    assert load_config(None, ["tie_embedding=0"])["tie_embedding"] is False
    assert load_config(None, ["index_refresh_batches=none"])["index_refresh_batches"] is None
    with pytest.raises(CliError, match="expects a boolean"):
        load_config(None, ["tie_embedding=maybe"])


def test_malformed_config_lines_name_the_location(tmp_path):
    cfg = tmp_path / "bad"
    cfg.write_text("lr=0.001\nbatch_size\n", encoding="utf-8")
    with pytest.raises(CliError, match=r"bad:2: expected KEY=VALUE"):
        load_config(str(cfg), [])
    with pytest.raises(CliError, match="--set expects KEY=VALUE"):
        load_config(None, ["lr"])


def test_missing_config_file_is_a_clean_error(tmp_path):
    with pytest.raises(CliError, match="cannot read config file"):
        load_config(str(tmp_path / "absent"), [])


def test_show_config_prints_sorted_key_value_lines():
    code, out, _ = run_cli("--show-config")
    assert code == 0
    lines = out.strip().splitlines()
    keys = [line.split("=", 1)[0] for line in lines]
    assert keys == sorted(DEFAULTS)
    assert "index_refresh_batches=none" in lines
    assert "tie_embedding=false" in lines
    assert f"beam={DEFAULTS['beam']}" in lines


def test_no_command_prints_usage_and_exits_2():
    code, _, err = run_cli()
    assert code == 2
    assert "usage:" in err


def test_failures_render_as_one_error_line(tmp_path):
    code, _, err = run_cli(
        "prepare", "--source", tmp_path / "nope.source", "--target", tmp_path / "nope.target",
    )
    assert code == 1
    assert err.startswith("error:")


def test_prepare_prints_the_type_table(cli_artifacts):
    code, out, _ = run_cli(
        "prepare", "--source", cli_artifacts["train_src"], "--target", cli_artifacts["train_tgt"],
    )
    assert code == 0
    rows = {line.split()[0]: line.split()[1] for line in out.splitlines()[1:]}
    assert rows["Equals"] == "16"
    assert rows["Total"] == "16"
    assert rows["True"] == "0"


def test_prepare_split_writes_three_corpus_pairs(cli_artifacts, tmp_path):
    code, out, _ = run_cli(
        "prepare", "--source", cli_artifacts["train_src"], "--target", cli_artifacts["train_tgt"],
        "--out", tmp_path, "--split", "0.5,0.25,0.25",
    )
    assert code == 0
    written = 0
    for name in ("corpus-train", "corpus-valid", "corpus-test"):
        assert (tmp_path / f"{name}.source").exists()
        assert (tmp_path / f"{name}.target").exists()
        written += len((tmp_path / f"{name}.source").read_text().splitlines())
    assert written == 16
    assert out.count("wrote ") == 3
    code, _, err = run_cli(
        "prepare", "--source", cli_artifacts["train_src"], "--target", cli_artifacts["train_tgt"],
        "--out", tmp_path, "--split", "0.5,0.5",
    )
    assert code == 1
    assert "three comma-separated ratios" in err


def test_trained_tokenizer_hash_matches_the_artifact(cli_artifacts):
    tok = load_tokenizer(cli_artifacts["tok"])
    code, out, _ = run_cli(
        "train-tokenizer", "--source", cli_artifacts["train_src"],
        "--target", cli_artifacts["train_tgt"], "--out", cli_artifacts["root"] / "tok2.vocab",
        *sets(),
    )
    assert code == 0
    assert f"hash {tokenizer_fingerprint(tok)}" in out


def test_train_writes_run_artifacts(cli_artifacts):
    run = cli_artifacts["run"]
    for name in ("best.ckpt", "final.ckpt", "history.log", "config.txt"):
        assert (run / name).exists()


def test_retrieve_lists_ranked_neighbours(cli_artifacts):
    query = cli_artifacts["inputs"].read_text().splitlines()[0]
    code, out, _ = run_cli(
        "retrieve", "--checkpoint", cli_artifacts["ckpt"], "--tokenizer", cli_artifacts["tok"],
        "--source", cli_artifacts["train_src"], "--target", cli_artifacts["train_tgt"],
        "--index", cli_artifacts["index"], "--query", query, *sets(),
    )
    assert code == 0
    ranked = [line for line in out.splitlines() if line.lstrip().startswith(("1.", "2."))]
    assert len(ranked) == 2
    assert all("score=" in line and "p=" in line for line in ranked)


def test_retrieve_without_index_is_refused(cli_artifacts):
    code, _, err = run_cli(
        "retrieve", "--checkpoint", cli_artifacts["ckpt"], "--tokenizer", cli_artifacts["tok"],
        "--source", cli_artifacts["train_src"], "--target", cli_artifacts["train_tgt"],
        "--query", "x", *sets(),
    )
    assert code == 1
    assert "needs --index" in err


def test_generate_then_evaluate_round_trip(cli_artifacts, tmp_path):
    preds = tmp_path / "preds.txt"
    prov = tmp_path / "prov.jsonl"
    code, out, _ = run_cli(
        "generate", "--checkpoint", cli_artifacts["ckpt"], "--tokenizer", cli_artifacts["tok"],
        "--input", cli_artifacts["inputs"], "--out", preds,
        "--index", cli_artifacts["index"],
        "--source", cli_artifacts["train_src"], "--target", cli_artifacts["train_tgt"],
        "--provenance", prov, *sets(),
    )
    assert code == 0
    assert "wrote 2 predictions" in out
    assert len(preds.read_text().splitlines()) == 2
    records = [json.loads(line) for line in prov.read_text().splitlines()]
    assert [r["query_id"] for r in records] == [0, 1]
    assert all("retrieved_id" in r and 0.0 <= r["probability"] <= 1.0 for r in records)

    report_path = tmp_path / "report.txt"
    rec_path = tmp_path / "records.jsonl"
    code, out, _ = run_cli(
        "evaluate", "--preds", preds, "--source", cli_artifacts["test_src"],
        "--target", cli_artifacts["test_tgt"], "--report", report_path,
        "--records", rec_path, *sets(),
    )
    assert code == 0
    assert out.splitlines()[0].split() == ["samples", "2"]
    assert "exact match" in out and "codebleu" in out
    assert report_path.read_text() == out
    per_sample = [json.loads(line) for line in rec_path.read_text().splitlines()]
    assert len(per_sample) == 2
    assert all(set(r) == {"id", "type", "correct", "bleu"} for r in per_sample)


def test_generate_dense_mode_requires_index_and_codebase(cli_artifacts, tmp_path):
    code, _, err = run_cli(
        "generate", "--checkpoint", cli_artifacts["ckpt"], "--tokenizer", cli_artifacts["tok"],
        "--input", cli_artifacts["inputs"], "--out", tmp_path / "p.txt", *sets(),
    )
    assert code == 1
    assert "needs --index" in err


def test_mismatched_tokenizer_is_refused(cli_artifacts, tmp_path):
    # A vocabulary learned from different text gets a different content hash.
    other_tok = tmp_path / "other.vocab"
    code, _, _ = run_cli(
        "train-tokenizer", "--source", cli_artifacts["valid_src"],
        "--target", cli_artifacts["valid_tgt"], "--out", other_tok,
        *sets(vocab_size=80),
    )
    assert code == 0
    code, _, err = run_cli(
        "generate", "--checkpoint", cli_artifacts["ckpt"], "--tokenizer", other_tok,
        "--input", cli_artifacts["inputs"], "--out", tmp_path / "p.txt",
        "--index", cli_artifacts["index"],
        "--source", cli_artifacts["train_src"], "--target", cli_artifacts["train_tgt"],
        *sets(),
    )
    assert code == 1
    assert "does not match the checkpoint" in err


def test_index_from_another_run_is_refused(cli_artifacts, tmp_path):
    code, _, _ = run_cli(
        "train",
        "--train-source", cli_artifacts["train_src"], "--train-target", cli_artifacts["train_tgt"],
        "--valid-source", cli_artifacts["valid_src"], "--valid-target", cli_artifacts["valid_tgt"],
        "--tokenizer", cli_artifacts["tok"], "--out", tmp_path / "run2",
        *sets(seed=1, max_epochs=1),
    )
    assert code == 0
    code, _, err = run_cli(
        "retrieve", "--checkpoint", tmp_path / "run2" / "best.ckpt",
        "--tokenizer", cli_artifacts["tok"],
        "--source", cli_artifacts["train_src"], "--target", cli_artifacts["train_tgt"],
        "--index", cli_artifacts["index"], "--query", "x", *sets(),
    )
    assert code == 1
    assert "rebuild it" in err


def test_ablate_trains_each_requested_mode(cli_artifacts, tmp_path):
    out_dir = tmp_path / "ablation"
    code, out, _ = run_cli(
        "ablate",
        "--train-source", cli_artifacts["train_src"], "--train-target", cli_artifacts["train_tgt"],
        "--valid-source", cli_artifacts["valid_src"], "--valid-target", cli_artifacts["valid_tgt"],
        "--test-source", cli_artifacts["test_src"], "--test-target", cli_artifacts["test_tgt"],
        "--tokenizer", cli_artifacts["tok"], "--out", out_dir,
        "--modes", "none,jaccard,random", *sets(max_epochs=1),
    )
    assert code == 0
    table = (out_dir / "ablation.txt").read_text()
    for mode in ("none", "jaccard", "random"):
        assert mode in table
        assert (out_dir / mode / "best.ckpt").exists()
        assert (out_dir / mode / "test-predictions.txt").exists()
    assert "accuracy" in out
    code, _, err = run_cli(
        "ablate",
        "--train-source", cli_artifacts["train_src"], "--train-target", cli_artifacts["train_tgt"],
        "--valid-source", cli_artifacts["valid_src"], "--valid-target", cli_artifacts["valid_tgt"],
        "--test-source", cli_artifacts["test_src"], "--test-target", cli_artifacts["test_tgt"],
        "--tokenizer", cli_artifacts["tok"], "--out", out_dir, "--modes", "teleport",
    )
    assert code == 1
    assert "unknown retriever mode" in err


def test_bare_mode_generates_without_a_codebase(cli_artifacts, tmp_path):
    out_dir = tmp_path / "bare"
    code, _, _ = run_cli(
        "train",
        "--train-source", cli_artifacts["train_src"], "--train-target", cli_artifacts["train_tgt"],
        "--valid-source", cli_artifacts["valid_src"], "--valid-target", cli_artifacts["valid_tgt"],
        "--tokenizer", cli_artifacts["tok"], "--out", out_dir,
        *sets(retriever_mode="none", max_epochs=1),
    )
    assert code == 0
    preds = tmp_path / "preds.txt"
    prov = tmp_path / "prov.jsonl"
    code, _, _ = run_cli(
        "generate", "--checkpoint", out_dir / "best.ckpt", "--tokenizer", cli_artifacts["tok"],
        "--input", cli_artifacts["inputs"], "--out", preds, "--provenance", prov, *sets(),
    )
    assert code == 0
    assert len(preds.read_text().splitlines()) == 2
    records = [json.loads(line) for line in prov.read_text().splitlines()]
    assert all("retrieved_id" not in r for r in records)


def test_lexical_mode_generate_needs_the_codebase_flags(cli_artifacts, tmp_path):
    out_dir = tmp_path / "jac"
    code, _, _ = run_cli(
        "train",
        "--train-source", cli_artifacts["train_src"], "--train-target", cli_artifacts["train_tgt"],
        "--valid-source", cli_artifacts["valid_src"], "--valid-target", cli_artifacts["valid_tgt"],
        "--tokenizer", cli_artifacts["tok"], "--out", out_dir,
        *sets(retriever_mode="jaccard", max_epochs=1),
    )
    assert code == 0
    code, _, err = run_cli(
        "generate", "--checkpoint", out_dir / "best.ckpt", "--tokenizer", cli_artifacts["tok"],
        "--input", cli_artifacts["inputs"], "--out", tmp_path / "p.txt", *sets(),
    )
    assert code == 1
    assert "needs the codebase" in err


def test_overlap_compares_prediction_files(cli_artifacts, tmp_path):
    golds = cli_artifacts["test_tgt"].read_text().splitlines()
    perfect = tmp_path / "perfect.txt"
    perfect.write_text("".join(g + "\n" for g in golds), encoding="utf-8")
    junk = tmp_path / "junk.txt"
    junk.write_text("nope ( )\n" * len(golds), encoding="utf-8")
    code, out, _ = run_cli(
        "overlap", "--source", cli_artifacts["test_src"], "--target", cli_artifacts["test_tgt"],
        "--preds", f"exact={perfect}", "--preds", f"noise={junk}",
        "--out", tmp_path / "overlap.txt",
    )
    assert code == 0
    assert "exact" in out and "noise" in out
    assert (tmp_path / "overlap.txt").read_text().rstrip("\n") == out.rstrip("\n")
    exact_row = next(line for line in out.splitlines() if line.startswith("exact"))
    assert exact_row.split()[1] == "2"
    code, _, err = run_cli(
        "overlap", "--source", cli_artifacts["test_src"], "--target", cli_artifacts["test_tgt"],
        "--preds", "bare-path.txt",
    )
    assert code == 1
    assert "NAME=FILE" in err


def test_same_seed_runs_reproduce_predictions(cli_artifacts, tmp_path):
    outputs = []
    for name in ("a", "b"):
        run_dir = tmp_path / name
        code, _, _ = run_cli(
            "train",
            "--train-source", cli_artifacts["train_src"],
            "--train-target", cli_artifacts["train_tgt"],
            "--valid-source", cli_artifacts["valid_src"],
            "--valid-target", cli_artifacts["valid_tgt"],
            "--tokenizer", cli_artifacts["tok"], "--out", run_dir,
            *sets(retriever_mode="none", max_epochs=2, seed=3),
        )
        assert code == 0
        preds = tmp_path / f"{name}.txt"
        code, _, _ = run_cli(
            "generate", "--checkpoint", run_dir / "best.ckpt",
            "--tokenizer", cli_artifacts["tok"],
            "--input", cli_artifacts["inputs"], "--out", preds, *sets(),
        )
        assert code == 0
        outputs.append(preds.read_bytes())
    assert outputs[0] == outputs[1]


def test_console_script_is_installed():
    proc = subprocess.run(
        ["assertgen", "--show-config"], capture_output=True, text=True, timeout=60,
        env={**os.environ, ENV_CONFIG: ""},
    )
    assert proc.returncode == 0
    assert "batch_size=8" in proc.stdout
