import csv
import json

import pytest

from slicenet.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, main
from slicenet.config import DEFAULTS, RunConfig, parse_text
from slicenet.data import Manifest
from slicenet.errors import ConfigurationError
from slicenet.models import build_model, load_checkpoint, param_count

TINY = ["--set", "model.d=4", "--set", "model.encoder_widths=2,3", "--set", "model.head_hidden=8",
        "--set", "model.rnn_hidden=6", "--epochs", "2", "--lr", "1e-3"]


def last_line(capsys):
    return capsys.readouterr().out.strip().splitlines()[-1]


def parse_final(line):
    return dict(kv.split("=") for kv in line.split())


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["synth", "--n", "30", "--dims", "8,10,8", "--seed", "1", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(data_dir), "--out", str(out), *TINY]) == 0
    return out


# -- config ----------------------------------------------------------------------------------

def test_config_text_parsing():
    text = "# a comment\nmodel.d = 16  # trailing\n\ntrain.lr=3e-4\n"
    assert parse_text(text) == {"model.d": "16", "train.lr": "3e-4"}
    with pytest.raises(ConfigurationError):
        parse_text("model.d 16")


def test_config_layering(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text("model.family = slice_max\ntrain.lr = 5e-4\n")
    cfg = RunConfig.load(f, {"train.lr": "1e-3"})
    assert cfg["model.family"] == "slice_max"
    assert cfg.train_config().learning_rate == 1e-3
    assert cfg["model.d"] == DEFAULTS["model.d"]


def test_config_round_trip(tmp_path):
    cfg = RunConfig.load(overrides={"model.family": "slice_rnn", "train.grad_clip": "none"})
    cfg.write(tmp_path)
    back = RunConfig.load(tmp_path / "config.txt")
    assert back == cfg
    assert back.train_config().grad_clip is None


def test_config_defaults_follow_family():
    cfg = RunConfig.load(overrides={"model.family": "slice_rnn"})
    assert cfg.train_config().grad_clip == 1.0
    tc = RunConfig().train_config()
    assert (tc.epochs, tc.learning_rate, tc.weight_decay, tc.batch_size) == (100, 1e-4, 1e-4, 8)


def test_config_rejects_unknown_and_malformed():
    with pytest.raises(ConfigurationError):
        RunConfig.load(overrides={"model.depth": "3"})
    with pytest.raises(ConfigurationError):
        RunConfig.load(overrides={"model.d": "wide"}).model_spec()


# -- synth ---------------------------------------------------------------------------------------

def test_synth_split_arithmetic(tmp_path):
    assert main(["synth", "--n", "1000", "--dims", "4,5,4", "--seed", "7", "--out", str(tmp_path)]) == 0
    m = Manifest.read(tmp_path / "manifest.csv")
    assert m.split_sizes() == {"train": 700, "val": 90, "test": 210}
    assert len(list(tmp_path.glob("*.rvol"))) == 1000
    assert (tmp_path / "config.txt").exists()
    assert json.loads((tmp_path / "report.json").read_text())["schema"] == 1


def test_synth_rerun_is_bytewise_identical(tmp_path):
    args = ["synth", "--n", "6", "--dims", "6,7,6", "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_infeasible_split(tmp_path):
    assert main(["synth", "--n", "2", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_synth_bad_dims(tmp_path):
    assert main(["synth", "--n", "5", "--dims", "8,8", "--out", str(tmp_path)]) == EXIT_CONFIG


# -- train -------------------------------------------------------------------------------------

def test_train_outputs(trained, capsys):
    for name in ("config.txt", "report.json", "curve.csv", "model.ckpt"):
        assert (trained / name).exists()
    report = json.loads((trained / "report.json").read_text())
    model = load_checkpoint(trained / "model.ckpt")
    assert report["param_count"] == param_count(model)
    assert report["schema"] == 1


def test_train_final_line(data_dir, tmp_path, capsys):
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path), *TINY]) == 0
    final = parse_final(last_line(capsys))
    assert set(final) == {"test_mae", "params", "best_epoch"}
    report = json.loads((tmp_path / "report.json").read_text())
    assert int(final["params"]) == report["param_count"]
    assert int(final["best_epoch"]) == report["best_epoch"]
    assert float(final["test_mae"]) == pytest.approx(report["test_mae"], abs=1e-6)


def test_attention_adds_2144_parameters(data_dir, tmp_path, capsys):
    params = {}
    for fam in ("slice_mean", "slice_attention"):
        args = ["train", "--data", str(data_dir), "--out", str(tmp_path / fam), "--model", fam,
                "--set", "model.encoder_widths=2,3", "--epochs", "1"]
        assert main(args) == 0
        params[fam] = int(parse_final(last_line(capsys))["params"])
    assert params["slice_attention"] - params["slice_mean"] == 2144


def test_train_from_config_file(data_dir, tmp_path, capsys):
    cfg = tmp_path / "exp.txt"
    cfg.write_text(f"data.dir = {data_dir}\nout.dir = {tmp_path / 'out'}\nmodel.family = slice_max\n"
                   "model.d = 4\nmodel.encoder_widths = 2\ntrain.epochs = 1\n")
    assert main(["train", "--config", str(cfg)]) == 0
    resolved = RunConfig.load(tmp_path / "out" / "config.txt")
    assert resolved["model.family"] == "slice_max" and resolved["train.epochs"] == "1"


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_rnn_names_remedy(data_dir, tmp_path, capsys):
    code = main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--model", "slice_rnn",
                 "--axis", "coronal", "--set", "model.encoder_widths=2", "--set", "model.d=4",
                 "--set", "train.grad_clip=none", "--lr", "1e38", "--epochs", "3"])
    assert code == EXIT_NUMERICAL
    err = capsys.readouterr().err
    assert "lr=1e-05" in err and "step" in err


def test_train_missing_data(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_train_unknown_key(data_dir, tmp_path):
    assert main(["train", "--data", str(data_dir), "--set", "train.momentum=0.9"]) == EXIT_CONFIG


def test_train_unknown_family(data_dir, tmp_path):
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--model", "slice_median"]) \
        == EXIT_CONFIG


def test_train_is_reproducible(data_dir, tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["train", "--data", str(data_dir), "--out", str(tmp_path / name), *TINY]) == 0
    a = json.loads((tmp_path / "a" / "report.json").read_text())
    b = json.loads((tmp_path / "b" / "report.json").read_text())
    for r in (a, b):
        r.pop("environment")
        for e in r["epochs"]:
            e.pop("seconds")
    assert a == b


# -- eval -------------------------------------------------------------------------------------

def eval_json(capsys, *args):
    assert main(["eval", *args]) == 0
    return json.loads(last_line(capsys))


def test_eval_none_matches_report(trained, capsys):
    out = eval_json(capsys, "--checkpoint", str(trained / "model.ckpt"))
    report = json.loads((trained / "report.json").read_text())
    assert out["results"][0]["mae"] == pytest.approx(report["test_mae"], abs=1e-6)


def test_eval_kth_one_equals_none(trained, capsys):
    out = eval_json(capsys, "--checkpoint", str(trained / "model.ckpt"), "--drop", "none", "--drop", "kth:1")
    assert out["results"][0]["mae"] == out["results"][1]["mae"]


def test_eval_kth_grid_has_five_columns(trained, capsys, tmp_path):
    drops = [a for k in (1, 2, 4, 5, 10) for a in ("--drop", f"kth:{k}")]
    out = eval_json(capsys, "--checkpoint", str(trained / "model.ckpt"), *drops, "--out", str(tmp_path))
    assert [r["drop"] for r in out["results"]] == ["kth:1", "kth:2", "kth:4", "kth:5", "kth:10"]
    assert (tmp_path / "config.txt").exists() and (tmp_path / "metrics.json").exists()


def test_eval_random_drop_seeds(trained, capsys, data_dir):
    ck = str(trained / "model.ckpt")
    out = eval_json(capsys, "--checkpoint", ck, "--data", str(data_dir), "--drop", "rand:0.5")
    assert len(out["results"][0]["runs"]) == 10
    out = eval_json(capsys, "--checkpoint", ck, "--drop", "rand:0.5", "--seeds", "2,5,9")
    assert len(out["results"][0]["runs"]) == 3
    assert out["results"][0]["std"] >= 0


def test_eval_cnn3d_refuses_drops_without_imputation(data_dir, tmp_path, capsys):
    run = tmp_path / "cnn"
    assert main(["train", "--data", str(data_dir), "--out", str(run), "--model", "cnn3d",
                 "--set", "model.encoder_widths=2", "--epochs", "1"]) == 0
    ck = str(run / "model.ckpt")
    assert main(["eval", "--checkpoint", ck, "--drop", "kth:2"]) == EXIT_CONFIG
    assert "imput" in capsys.readouterr().err
    assert main(["eval", "--checkpoint", ck, "--drop", "kth:2", "--impute"]) == 0


def test_eval_other_axis(trained, capsys):
    out = eval_json(capsys, "--checkpoint", str(trained / "model.ckpt"), "--axis", "axial")
    assert out["axis"] == "axial"


def test_eval_bad_drop(trained):
    assert main(["eval", "--checkpoint", str(trained / "model.ckpt"), "--drop", "every:3"]) == EXIT_CONFIG


def test_eval_missing_checkpoint(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "x.ckpt"), "--data", str(tmp_path)]) == EXIT_DATA


# -- ablate and report ---------------------------------------------------------------------------

ABLATE = ["--set", "model.d=4", "--set", "model.encoder_widths=2", "--set", "model.head_hidden=4",
          "--set", "model.rnn_hidden=4", "--epochs", "1", "--lr", "1e-3"]


def read_table(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_ablate_lists_missing_runs(data_dir, tmp_path, capsys):
    code = main(["ablate", "--suite", "missing_kth", "--data", str(data_dir), "--runs", str(tmp_path),
                 "--set", "ablate.models=slice_mean,slice_rnn"])
    assert code == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "slice_mean_sagittal" in err and "slice_rnn_sagittal" in err


def test_ablate_missing_kth_table(data_dir, tmp_path):
    args = ["ablate", "--suite", "missing_kth", "--data", str(data_dir), "--runs", str(tmp_path),
            "--set", "ablate.models=slice_mean,slice_rnn,cnn3d", "--train", *ABLATE]
    assert main(args) == 0
    rows = read_table(tmp_path / "tables" / "missing_kth.csv")
    assert rows[0] == ["method", "k=1", "k=2", "k=4", "k=5", "k=10"]
    assert [r[0] for r in rows[1:]] == ["slice_mean", "slice_rnn", "slice_rnn*", "cnn3d*"]
    assert (tmp_path / "tables" / "config.txt").exists()
    assert json.loads((tmp_path / "tables" / "missing_kth.json").read_text())["schema"] == 1
    # a second invocation reuses the trained runs instead of retraining
    before = (tmp_path / "slice_mean_sagittal" / "model.ckpt").stat().st_mtime_ns
    assert main(args[:-len(ABLATE) - 1] + ABLATE) == 0
    assert (tmp_path / "slice_mean_sagittal" / "model.ckpt").stat().st_mtime_ns == before


def test_ablate_missing_rand_columns(data_dir, tmp_path):
    assert main(["ablate", "--suite", "missing_rand", "--data", str(data_dir), "--runs", str(tmp_path),
                 "--set", "ablate.models=slice_max", "--train", *ABLATE]) == 0
    rows = read_table(tmp_path / "tables" / "missing_rand.csv")
    assert rows[0] == ["method", "keep=1", "keep=0.5", "keep=0.25", "keep=0.2", "keep=0.1"]


def test_ablate_less_data_and_axes(data_dir, tmp_path, capsys):
    common = ["--data", str(data_dir), "--runs", str(tmp_path), "--set", "ablate.models=slice_mean",
              "--train", *ABLATE]
    assert main(["ablate", "--suite", "less_data", *common]) == 0
    rows = read_table(tmp_path / "tables" / "less_data.csv")
    n_train = Manifest.read(data_dir / "manifest.csv").split_sizes()["train"]
    assert rows[0] == ["method"] + [f"n={round(f * n_train)}" for f in (0.125, 0.25, 0.5)]
    report = json.loads((tmp_path / f"slice_mean_sagittal_n{round(0.125 * n_train)}" / "report.json").read_text())
    assert report["steps"] == report["config"]["fixed_updates"]

    assert main(["ablate", "--suite", "axes", *common]) == 0
    rows = read_table(tmp_path / "tables" / "axes.csv")
    assert rows[0] == ["method", "sagittal", "coronal", "axial"]

    assert main(["report", str(tmp_path)]) == 0
    summary = read_table(tmp_path / "summary.csv")
    assert summary[0][:3] == ["run", "family", "axis"]
    assert len(summary) == 1 + 3 + 3


def test_report_without_runs(tmp_path):
    assert main(["report", str(tmp_path)]) == EXIT_DATA
