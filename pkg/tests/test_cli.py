import csv
import json
import math

import pytest

from svda_lab import cli
from svda_lab.datagen import DatasetSpec, Scene, generate_split, load_manifest, save_pair, write_manifest
from svda_lab.harness import DepthDataset, evaluate
from svda_lab.model import DepthViT, ModelConfig, load_checkpoint, save_checkpoint

SMALL_MODEL = dict(image_h=16, image_w=16, patch_size=4, d_model=8, num_layers=2, num_heads=2, d_k=4, mlp_hidden=16)
SMALL_DATA = dict(count=8, val_count=4, height=16, width=16)
SMALL_TRAIN = dict(epochs=3, batch_size=4, diagnostic_batch_size=2, robustness_draws=2)


def write_config(path, **sections):
    cfg = {"model": SMALL_MODEL, "data": SMALL_DATA, "train": SMALL_TRAIN}
    cfg.update(sections)
    path.write_text(json.dumps(cfg))
    return str(path)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestConfig:
    def test_defaults(self):
        cfg = cli.parse_config({})
        assert cfg.model == ModelConfig() and cfg.data.count == 256 and cfg.train.epochs == 30

    @pytest.mark.parametrize(
        "raw",
        [{"bogus": 1}, {"model": {"layers": 2}}, {"train": {"lr": 1}}, {"data": {"count": 0}}, {"model": {"d_k": 3}}],
    )
    def test_rejects(self, raw):
        with pytest.raises(cli.ConfigError):
            cli.parse_config(raw)

    def test_dump_round_trip(self):
        cfg = cli.parse_config({"model": {"mechanism": "baseline"}})
        assert cli.parse_config(json.loads(cli.dump_config(cfg))) == cfg


def test_float_format_round_trips():
    for v in (0.1, 1 / 3, 1e-300, 123456.789, -2.5):
        assert float(cli.fmt(v)) == v
    assert cli.fmt(0.1) == "0.10000000000000001"
    assert cli.fmt(3) == "3"


class TestGen:
    def test_files(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", data={**SMALL_DATA, "count": 4, "val_count": 0})
        assert cli.main(["gen", "--config", cfg, "--out", str(tmp_path / "d")]) == 0
        assert len(list((tmp_path / "d" / "scenes").iterdir())) == 8
        lines = (tmp_path / "d" / "manifest.tsv").read_text().splitlines()
        assert len(lines) == 4 and all(len(l.split("\t")) == 2 for l in lines)
        assert not (tmp_path / "d" / "val_manifest.tsv").exists()

    def test_idempotent(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        cli.main(["gen", "--config", cfg, "--out", str(tmp_path / "a")])
        cli.main(["gen", "--config", cfg, "--out", str(tmp_path / "b")])
        for f in sorted((tmp_path / "a" / "scenes").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / "scenes" / f.name).read_bytes()
        assert len(load_manifest(tmp_path / "a" / "val_manifest.tsv")) == 4

    def test_zero_count(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", data={**SMALL_DATA, "count": 0})
        assert cli.main(["gen", "--config", cfg, "--out", str(tmp_path / "d")]) != 0
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1 and err[0].startswith("svda-lab: error[config]:")


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    cfg = write_config(root / "c.json")
    assert cli.main(["train", "--config", cfg, "--out", str(root / "run1")]) == 0
    assert cli.main(["train", "--config", cfg, "--out", str(root / "run2")]) == 0
    assert cli.main(["gen", "--config", cfg, "--out", str(root / "data")]) == 0
    return root


class TestTrain:
    def test_indicator_rows(self, trained):
        rows = read_rows(trained / "run1" / "indicators.csv")
        assert ",".join(rows[0]) == "epoch,layer,head,indicator,value"
        assert len(rows) - 1 == 3 * 2 * 2 * 6

    def test_epochs_csv(self, trained):
        text = (trained / "run1" / "epochs.csv").read_text()
        assert "\r" not in text
        rows = read_rows(trained / "run1" / "epochs.csv")
        assert rows[0] == ["epoch", "train_loss", "val_loss", "abs_rel", "sq_rel", "rmse", "rmse_log", "srmse_log", "delta1"]
        assert [r[0] for r in rows[1:]] == ["1", "2", "3"]

    def test_byte_identical_reruns(self, trained):
        for name in ("epochs.csv", "indicators.csv", "checkpoint.svda"):
            assert (trained / "run1" / name).read_bytes() == (trained / "run2" / name).read_bytes()

    def test_checkpoint_is_best_epoch(self, trained):
        rows = read_rows(trained / "run1" / "epochs.csv")[1:]
        best = min(rows, key=lambda r: float(r[3]))
        model = load_checkpoint(trained / "run1" / "checkpoint.svda")
        va = DepthDataset.from_spec(DatasetSpec(**SMALL_DATA), "val")
        assert evaluate(model, va).abs_rel == float(best[3])

    def test_baseline_omits_sigma_rows(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", model={**SMALL_MODEL, "mechanism": "baseline"}, train={**SMALL_TRAIN, "epochs": 1})
        cli.main(["train", "--config", cfg, "--out", str(tmp_path / "r")])
        names = {r[3] for r in read_rows(tmp_path / "r" / "indicators.csv")[1:]}
        assert names == {"alignment", "selectivity", "robustness"}


class TestEval:
    def test_matches_harness(self, trained, capsys):
        ckpt = trained / "run1" / "checkpoint.svda"
        manifest = trained / "data" / "val_manifest.tsv"
        assert cli.main(["eval", "--checkpoint", str(ckpt), "--manifest", str(manifest), "--out", str(trained / "ev")]) == 0
        rows = read_rows(trained / "ev" / "metrics.csv")
        assert rows[0] == ["mechanism", "checkpoint", "abs_rel", "sq_rel", "rmse", "rmse_log", "srmse_log", "delta1"]
        expected = evaluate(load_checkpoint(ckpt), DepthDataset.from_scenes(load_manifest(manifest)))
        assert [float(v) for v in rows[1][2:]] == list(expected.as_tuple())
        assert "abs_rel" in capsys.readouterr().out

    def test_oracle_checkpoint(self, tmp_path):
        """Ground truth set to the checkpoint's own predictions gives a zero-error row."""
        model = DepthViT(ModelConfig(**SMALL_MODEL), seed=1)
        save_checkpoint(tmp_path / "m.svda", model)
        scenes = generate_split(DatasetSpec(**SMALL_DATA))[:3]
        pairs = []
        for i, s in enumerate(scenes):
            pred = model.predict(s.image[None])[0]
            save_pair(tmp_path / f"{i}i", tmp_path / f"{i}d", Scene(s.image, pred))
            pairs.append((f"{i}i", f"{i}d"))
        write_manifest(tmp_path / "m.tsv", pairs)
        cli.main(["eval", "--checkpoint", str(tmp_path / "m.svda"), "--manifest", str(tmp_path / "m.tsv"), "--out", str(tmp_path)])
        row = [float(v) for v in read_rows(tmp_path / "metrics.csv")[1][2:]]
        assert row == [0.0, 0.0, 0.0, 0.0, 0.0, 1.0]

    def test_missing_args(self, capsys):
        assert cli.main(["eval"]) != 0
        assert capsys.readouterr().err.startswith("svda-lab: error[config]:")

    def test_bad_checkpoint(self, tmp_path, capsys):
        (tmp_path / "x").write_bytes(b"junk")
        (tmp_path / "m.tsv").write_text("")
        assert cli.main(["eval", "--checkpoint", str(tmp_path / "x"), "--manifest", str(tmp_path / "m.tsv"), "--out", str(tmp_path)]) != 0
        assert capsys.readouterr().err.startswith("svda-lab: error[checkpoint]:")


class TestDiagnose:
    def test_layerwise(self, trained, capsys):
        out = trained / "diag"
        code = cli.main([
            "diagnose", "--checkpoint", str(trained / "run1" / "checkpoint.svda"),
            "--manifest", str(trained / "data" / "val_manifest.tsv"),
            "--eps", "0.5", "--noise-std", "0.02", "--draws", "3", "--out", str(out),
        ])
        assert code == 0
        rows = read_rows(out / "layerwise.csv")
        assert rows[0] == ["layer", "head", "indicator", "min", "q25", "median", "q75", "max"]
        assert len(rows) - 1 == 2 * 2 * 6
        for r in rows[1:]:
            q = [float(v) for v in r[3:]]
            assert q == sorted(q)
            if r[2] == "entropy":
                assert 0 <= q[2] <= math.log(4)
        assert "extra 16 (" in capsys.readouterr().out
        align = read_rows(out / "alignment.csv")
        assert align[0] == ["layer", "head", "p05", "p50", "p95"] and len(align) == 5

    def test_single_layer(self, tmp_path, trained):
        model = DepthViT(ModelConfig(**{**SMALL_MODEL, "num_layers": 1}), seed=2)
        save_checkpoint(tmp_path / "m.svda", model)
        cli.main(["diagnose", "--checkpoint", str(tmp_path / "m.svda"),
                  "--manifest", str(trained / "data" / "val_manifest.tsv"), "--out", str(tmp_path)])
        assert {r[0] for r in read_rows(tmp_path / "layerwise.csv")[1:]} == {"0"}


def test_compare(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", train={**SMALL_TRAIN, "epochs": 2})
    assert cli.main(["compare", "--config", cfg, "--out", str(tmp_path / "cmp")]) == 0
    rows = read_rows(tmp_path / "cmp" / "trends.csv")
    assert rows[0] == ["mechanism", "indicator", "first10_mean", "last10_mean", "delta"]
    mechs = [r[0] for r in rows[1:]]
    assert mechs.count("svda") == 6 and mechs.count("baseline") == 3
    for r in rows[1:]:
        assert abs(float(r[4]) - (float(r[3]) - float(r[2]))) <= 1e-12
    paired = read_rows(tmp_path / "cmp" / "compare_epochs.csv")
    assert len(paired) - 1 == 2 * 2
    for mech in ("svda", "baseline"):
        assert (tmp_path / "cmp" / mech / "checkpoint.svda").exists()
    assert "extra 16" in capsys.readouterr().out
