import json
import subprocess
import sys

import pytest

from abevo.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, build_parser, main

SUBCOMMANDS = ("simulate", "preprocess", "pretrain", "finetune", "evaluate", "discover", "stats", "gradcheck", "plot")

MODEL = "model.layers = 1\nmodel.heads = 2\nmodel.hidden = 16\nmodel.ffn = 32\nmodel.max_len = 128\nmodel.dtype = float32\n"


def write(path, text):
    path.write_text(text)
    return str(path)


@pytest.fixture(scope="module")
def inputs(tmp_path_factory):
    d = tmp_path_factory.mktemp("inputs")
    spec = write(d / "spec.txt", "n_profiles = 4\nsequences_per_profile = 10\nseed = 3\ndisease_motif = WWCWW\n"
                                 "motif_fraction = 0.3\nclone_counts = true\nlibrary.n_v = 4\nlibrary.v_len_min = 20\n"
                                 "library.v_len_max = 24\n")
    cfg = write(d / "run.txt", MODEL + "mlm.steps = 3\nmlm.batch_size = 8\nmlm.warmup = 1\nmlm.eval_interval = 3\n"
                                       "mlm.eval_records = 8\nevolution.steps = 2\nevolution.batch_size = 8\n"
                                       "evolution.warmup = 1\nevolution.eval_interval = 2\nevolution.eval_records = 8\n"
                                       "finetune.epochs = 1\nfinetune.batch_size = 8\ntask.folds = 2\n")
    assert main(["simulate", "--spec", spec, "--out", str(d / "sim")]) == EXIT_OK
    return {"dir": d, "spec": spec, "config": cfg, "data": str(d / "sim" / "repertoire.csv"),
            "db": str(d / "sim" / "binders.txt")}


def pipeline(inputs, out):
    """Every subcommand once, writing under ``out`` via relative paths; returns the exit codes.

    Relative paths keep the manifests of two runs in different directories identical.
    """
    i = inputs
    import os
    from pathlib import Path
    here = os.getcwd()
    os.chdir(out)
    out = Path(".")
    try:
        return _pipeline(i, out)
    finally:
        os.chdir(here)


def _pipeline(i, out):
    codes = [
        main(["simulate", "--spec", i["spec"], "--out", str(out / "sim")]),
        main(["preprocess", "--input", i["data"], "--chunk-size", "20", "--out", str(out / "pre")]),
        main(["pretrain", "--data", str(out / "pre" / "chunks"), "--config", i["config"], "--out", str(out / "pt")]),
        main(["finetune", "--task", "binding", "--data", i["data"], "--checkpoint", str(out / "pt" / "checkpoint.bin"),
              "--config", i["config"], "--out", str(out / "ft")]),
        main(["evaluate", "--task", "bcell", "--data", i["data"], "--checkpoint", str(out / "pt" / "checkpoint.bin"),
              "--config", i["config"], "--out", str(out / "ev")]),
        main(["discover", "--profiles", i["data"], "--db", i["db"], "--config", i["config"], "--trim", "0.05",
              "--out", str(out / "disc")]),
        main(["stats", "--data", i["data"], "--label", "stage", "--out", str(out / "stats")]),
        main(["gradcheck", "--checks", "20", "--out", str(out / "gc")]),
        main(["plot", "--report", str(out / "disc" / "report.json"), "--log", str(out / "pt" / "log.csv"),
              "--out", str(out / "plots")]),
    ]
    return codes


def tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def two_runs(inputs, tmp_path_factory, monkeypatch_module):
    monkeypatch_module.setenv("SOURCE_DATE_EPOCH", "1700000000")
    a, b = tmp_path_factory.mktemp("run_a"), tmp_path_factory.mktemp("run_b")
    return (a, pipeline(inputs, a)), (b, pipeline(inputs, b))


@pytest.fixture(scope="module")
def monkeypatch_module():
    mp = pytest.MonkeyPatch()
    yield mp
    mp.undo()


def test_every_subcommand_succeeds(two_runs):
    (_, codes), _ = two_runs
    assert codes == [EXIT_OK] * len(SUBCOMMANDS)


def test_outputs_are_byte_identical(two_runs):
    (a, _), (b, _) = two_runs
    ta, tb = tree(a), tree(b)
    assert sorted(ta) == sorted(tb)
    assert any(k.endswith(".svg") for k in ta) and any(k.endswith(".bin") for k in ta)
    for k in ta:
        assert ta[k] == tb[k], k


def test_manifests_list_outputs(two_runs):
    (a, _), _ = two_runs
    for sub in ("sim", "pre", "pt", "ft", "ev", "disc", "stats", "gc", "plots"):
        m = json.loads((a / sub / "manifest.json").read_text())
        assert m["outputs"] and all((a / sub / o).exists() for o in m["outputs"])
        assert m["timestamp"].startswith("2023-11-14")


@pytest.mark.parametrize("sub", SUBCOMMANDS)
def test_help(sub, capsys):
    with pytest.raises(SystemExit) as e:
        build_parser().parse_args([sub, "--help"])
    assert e.value.code == 0
    assert "--seed" in capsys.readouterr().out


def test_usage_errors(tmp_path, inputs):
    assert main([]) == EXIT_USAGE
    assert main(["simulate"]) == EXIT_USAGE
    assert main(["evaluate", "--task", "nope", "--data", "x", "--out", str(tmp_path)]) == EXIT_USAGE
    bad = write(tmp_path / "bad.txt", "model.nonsense = 3\n")
    assert main(["gradcheck", "--config", bad, "--checks", "2"]) == EXIT_USAGE
    scores = write(tmp_path / "s.csv", "id,score\n")
    assert main(["evaluate", "--task", "bcell", "--data", inputs["data"], "--scores", scores,
                 "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_data_errors(tmp_path):
    missing = str(tmp_path / "missing.csv")
    assert main(["preprocess", "--input", missing, "--out", str(tmp_path / "o")]) == EXIT_DATA
    broken = write(tmp_path / "broken.csv", "id,antibody\nx,CARD\n")
    assert main(["stats", "--data", broken, "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_undefined_metric_exit_code(tmp_path, inputs):
    text = open(inputs["data"]).read().splitlines()
    header = text[0].split(",")
    col = [h.strip('"') for h in header].index("label")
    rows = [header] + [r.split(",") for r in text[1:]]
    for r in rows[1:]:
        r[col] = "0"
    data = write(tmp_path / "zero.csv", "\n".join(",".join(r) for r in rows) + "\n")
    ids = [r[0].strip('"') for r in rows[1:]]
    scores = write(tmp_path / "s.csv", "id,score\n" + "".join(f"{i},0.1\n" for i in ids))
    assert main(["evaluate", "--task", "binding", "--data", data, "--scores", scores, "--folds", "2",
                 "--out", str(tmp_path / "o")]) == EXIT_NUMERIC


def test_seed_precedence(tmp_path, inputs, monkeypatch):
    monkeypatch.setenv("SEED", "11")
    assert main(["simulate", "--spec", inputs["spec"], "--out", str(tmp_path / "env")]) == EXIT_OK
    assert json.loads((tmp_path / "env" / "manifest.json").read_text())["seed"] == 11
    assert main(["simulate", "--spec", inputs["spec"], "--seed", "12", "--out", str(tmp_path / "flag")]) == EXIT_OK
    assert json.loads((tmp_path / "flag" / "manifest.json").read_text())["seed"] == 12
    monkeypatch.setenv("SEED", "eleven")
    assert main(["simulate", "--spec", inputs["spec"], "--out", str(tmp_path / "bad")]) == EXIT_USAGE


def test_console_entry_point_runs():
    out = subprocess.run([sys.executable, "-m", "abevo.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("abevo ")
