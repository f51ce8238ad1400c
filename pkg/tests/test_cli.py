import json

import numpy as np
import pytest

from seldlab import cli, synth
from seldlab.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main, parse_grid
from seldlab.model import ModelConfig, param_count
from seldlab.tensor import archive


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def json_head(out: str) -> dict:
    """The JSON object at the start of a command's stdout."""
    obj, _ = json.JSONDecoder().raw_decode(out)
    return obj


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["synth", "--clips", "5", "--seed", "3", "--clip-len", "6",
                 "--out", str(root)]) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    code = main(["train", "--data", str(dataset), "--out", str(out), "--epochs", "1",
                 "--seeds", "[0]", "--batch_size", "2"])
    assert code == EXIT_OK
    return next(out.glob("*/seed0/best.ckpt"))


# -- synth ----------------------------------------------------------------------
def test_synth_layout_and_rerun_identical(dataset, tmp_path, capsys):
    assert len(list((dataset / "audio").glob("*.wav"))) == 5
    assert len(list((dataset / "labels").glob("*.csv"))) == 5
    code, out, _ = run(capsys, "synth", "--clips", 5, "--seed", 3, "--clip-len", 6,
                       "--out", tmp_path)
    assert code == EXIT_OK
    assert json_head(out)["clips"] == 5
    for p in dataset.rglob("*"):
        if p.is_file():
            assert (tmp_path / p.relative_to(dataset)).read_bytes() == p.read_bytes(), p


@pytest.mark.parametrize("argv", [
    ["synth", "--clips", "0", "--out", "x"],
    ["synth", "--clips", "2", "--out", "x"],
    ["synth", "--out", "x"],
    ["nonsense"],
    ["synth", "--clips", "5", "--out", "x", "--bogus", "1"],
])
def test_usage_errors_exit_1(argv, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run(capsys, *argv)[0] == EXIT_USAGE


# -- train / eval -------------------------------------------------------------
def test_train_writes_loadable_checkpoint(trained):
    state = archive.load(trained)
    n = sum(v.size for k, v in state.items()
            if not k.endswith((".rmean", ".rvar")) and not k.startswith("featstat."))
    cfg = ModelConfig.from_dict(json.loads(trained.with_suffix(".json").read_text()))
    assert n == param_count(cfg)
    assert (trained.parent / "last.ckpt").exists()
    record = json.loads((trained.parent / "record.json").read_text())
    assert len(record["train_loss"]) == 1
    assert set(record["scores"]) == {"er20", "f20", "le_cd", "lr_cd"}


def test_train_rejects_unknown_override(dataset, tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data", dataset, "--out", tmp_path, "--nope", "1")
    assert code == EXIT_USAGE
    assert "nope" in err


def test_train_missing_dataset_is_data_error(tmp_path, capsys):
    assert run(capsys, "train", "--data", tmp_path / "missing", "--epochs", "1")[0] == EXIT_DATA


def test_eval_is_repeatable_and_writes_predictions(trained, dataset, tmp_path, capsys):
    code, a, _ = run(capsys, "eval", "--checkpoint", trained, "--data", dataset, "--split", "all",
                     "--pred-out", tmp_path / "pred")
    assert code == EXIT_OK
    assert run(capsys, "eval", "--checkpoint", trained, "--data", dataset, "--split", "all")[1] == a
    assert a.splitlines()[-2] == "ER20,F20,LE_CD,LR_CD"
    assert len(list((tmp_path / "pred").glob("*.csv"))) == 5
    # scoring the written predictions against refs cut to the chunk grid reproduces eval
    (tmp_path / "ref").mkdir()
    for p in (dataset / "labels").glob("*.csv"):
        keep = [ln for ln in p.read_text().splitlines(True) if int(ln.split(",")[0]) < 50]
        (tmp_path / "ref" / p.name).write_text("".join(keep))
    code, out, _ = run(capsys, "score", "--ref", tmp_path / "ref", "--pred", tmp_path / "pred",
                       "--frames", 50)
    assert code == EXIT_OK
    # CSV angles carry two decimals, so localization error agrees to that precision
    assert json_head(out)["scores"] == pytest.approx(json_head(a)["scores"], abs=0.01)


def test_eval_corrupt_checkpoint_is_data_error(trained, dataset, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(trained.read_bytes()[:100])
    bad.with_suffix(".json").write_text(trained.with_suffix(".json").read_text())
    assert run(capsys, "eval", "--checkpoint", bad, "--data", dataset)[0] == EXIT_DATA


# -- score --------------------------------------------------------------------
def write_labels(dir_, labels: dict):
    dir_.mkdir(parents=True, exist_ok=True)
    for cid, lab in labels.items():
        (dir_ / f"{cid}.csv").write_text(synth.format_labels_csv(lab))


def test_score_self_and_empty(dataset, tmp_path, capsys):
    code, out, _ = run(capsys, "score", "--ref", dataset / "labels", "--pred", dataset / "labels")
    assert code == EXIT_OK
    got = json_head(out)
    assert got["frames"] == 60
    assert got["scores"] == {"er20": 0.0, "f20": 100.0, "le_cd": 0.0, "lr_cd": 100.0}
    (tmp_path / "empty").mkdir()
    s = json_head(run(capsys, "score", "--ref", dataset / "labels", "--pred", tmp_path / "empty")[1])
    assert (s["scores"]["er20"], s["scores"]["f20"], s["scores"]["lr_cd"]) == (1.0, 0.0, 0.0)


def test_score_thirty_degree_case(tmp_path, capsys):
    ref = synth.labels_from_events([synth.EventSpec(3, 0, 10, 0.0, 0.0)], 10)
    pred = synth.labels_from_events([synth.EventSpec(3, 0, 10, 30.0, 0.0)], 10)
    write_labels(tmp_path / "ref", {"a": ref})
    write_labels(tmp_path / "pred", {"a": pred})
    s = json_head(run(capsys, "score", "--ref", tmp_path / "ref", "--pred", tmp_path / "pred")[1])
    assert s["frames"] == 10
    assert s["scores"]["f20"] == 0.0
    assert s["scores"]["le_cd"] == pytest.approx(30.0, abs=1e-6)
    assert s["scores"]["lr_cd"] == 100.0


def test_score_malformed_csv_reports_line(tmp_path, capsys):
    write_labels(tmp_path / "ref", {"a": synth.labels_from_events([], 10)})
    (tmp_path / "pred").mkdir()
    (tmp_path / "pred" / "a.csv").write_text("0,1,0.00,0.00\n1,1,abc,0\n")
    code, _, err = run(capsys, "score", "--ref", tmp_path / "ref", "--pred", tmp_path / "pred")
    assert code == EXIT_DATA
    assert "a.csv:2:" in err


def test_score_id_mismatch_is_data_error(tmp_path, capsys):
    lab = synth.labels_from_events([], 10)
    write_labels(tmp_path / "ref", {"a": lab, "b": lab})
    write_labels(tmp_path / "pred", {"a": lab, "c": lab})
    assert run(capsys, "score", "--ref", tmp_path / "ref", "--pred", tmp_path / "pred")[0] == EXIT_DATA


# -- ablate -------------------------------------------------------------------
def test_parse_grid():
    text = "N,M,P,LN,attn_dims\nbaseline,-,-,-,\n2,8,Yes,Yes,\n3,8,Yes,Yes,128-256-128\n"
    cfgs = parse_grid(text)
    assert cfgs[0] == ModelConfig.baseline()
    assert cfgs[1] == ModelConfig.mhsa(2, 8, True, True)
    assert cfgs[2].attn_dims == (128, 256, 128)
    for bad in ("A,B\n1,2\n", "N,M,P,LN\n2,8,maybe,Yes\n", "N,M,P,LN\n", "N,M,P,LN\nx,8,No,No\n"):
        with pytest.raises(cli.UsageError):
            parse_grid(bad)


def test_ablate_writes_one_row_per_config(dataset, tmp_path, capsys):
    grid = tmp_path / "grid.csv"
    grid.write_text("N,M,P,LN\nbaseline,-,-,-\n1,4,No,Yes\n")
    results = tmp_path / "results.csv"
    code, out, _ = run(capsys, "ablate", "--grid", grid, "--data", dataset, "--out", tmp_path / "r",
                       "--results", results, "--epochs", "1", "--seeds", "[0]",
                       "--batch_size", "2")
    assert code == EXIT_OK
    lines = results.read_text().splitlines()
    assert out == results.read_text()
    assert lines[0].split(",") == cli.ABLATE_COLUMNS
    assert len(lines) == 3
    base, mhsa = (line.split(",") for line in lines[1:])
    assert base[:5] == ["baseline", "-", "-", "-", str(param_count(ModelConfig.baseline()))]
    assert mhsa[:5] == ["1", "4", "No", "Yes", str(param_count(ModelConfig.mhsa(1, 4, False, True)))]
    for cell in base[5:] + mhsa[5:]:
        assert cell.endswith(("±0.00", "±0.0"))  # one seed has no spread


# -- bench --------------------------------------------------------------------
def test_measure_throughput_self_comparison():
    net = cli.SeldNet(ModelConfig.baseline(), seed=0)
    twin = cli.SeldNet(ModelConfig.baseline(), seed=0)
    tput = cli.measure_throughput({"a": net, "b": twin}, batches=6, batch_size=2, warmup=1)
    assert 0.6 < tput["a"] / tput["b"] < 1.6


def test_bench_report_shape(capsys):
    code, out, _ = run(capsys, "bench", "--batches", 1, "--batch-size", 1, "--warmup", 0,
                       "--mode", "single")
    assert code == EXIT_OK
    rep = json_head(out)
    entry = rep["modes"]["single"]
    assert entry["ratio"] == pytest.approx(entry["mhsa_chunks_per_s"] / entry["gru_chunks_per_s"])
    assert entry["mhsa_temporal_scaling"]["t_prime"] == [50, 100]
    assert run(capsys, "bench", "--batches", 0)[0] == EXIT_USAGE
