import json

import numpy as np

from raresed.cli import main
from raresed.data import SynthConfig, load_dataset, save_dataset, synth_dataset
from raresed.detector import EventModel
from raresed.metrics import EventAnnotation, write_annotations
from raresed.recurrent import EncoderConfig
from raresed.train import TrainConfig, save_model


TINY = {
    "data": {
        "train_count": 10, "dev_count": 8, "frames": 30, "dim": 5,
        "positive_fraction": 0.5, "ebr_db": [12.0], "duration_frames": [5, 10],
        "background_seed": 0, "seed": 3,
    },
    "train": {
        "alpha": 1.0, "batch_size": 5, "stepsize": 0.002, "epochs": 1,
        "seed": 3, "thres0": 0.5, "thres1": 0.5, "margin": 10,
        "encoder": {"kind": "multiresolution", "layers": 1, "hidden": 4,
                    "multires_bidirectional": False},
    },
    "eval": {"collar_s": 0.5, "frame_shift_s": 0.023},
}


def write_config(tmp_path, cfg, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def synth_tiny(tmp_path):
    config = write_config(tmp_path, TINY)
    out = tmp_path / "data"
    assert main(["synth", "--config", config, "--out", str(out)]) == 0
    return config, out


def read_table(path):
    lines = path.read_text().splitlines()
    head = lines[0].split("\t")
    return [dict(zip(head, line.split("\t"))) for line in lines[1:] if line]


class TestSynth:
    def test_writes_datasets_and_manifest(self, tmp_path):
        _, out = synth_tiny(tmp_path)
        assert len(load_dataset(out / "train.sed")) == 10
        assert len(load_dataset(out / "dev.sed")) == 8
        assert (out / "train_ref.tsv").exists()
        assert (out / "dev_ref.tsv").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "synth"
        assert manifest["seed"] == 3

    def test_reruns_bit_identical(self, tmp_path):
        config = write_config(tmp_path, TINY)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["synth", "--config", config, "--out", str(out1)]) == 0
        assert main(["synth", "--config", config, "--out", str(out2)]) == 0
        for name in ("train.sed", "dev.sed", "train_ref.tsv", "dev_ref.tsv"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_missing_field_names_it(self, tmp_path, capsys):
        cfg = json.loads(json.dumps(TINY))
        del cfg["data"]["frames"]
        config = write_config(tmp_path, cfg)
        assert main(["synth", "--config", config, "--out", str(tmp_path / "o")]) == 2
        assert "data.frames" in capsys.readouterr().err

    def test_bad_json_is_input_error(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{nope")
        assert main(["synth", "--config", str(path),
                     "--out", str(tmp_path / "o")]) == 2

    def test_seed_flag_overrides(self, tmp_path):
        config = write_config(tmp_path, TINY)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["synth", "--config", config, "--out", str(out1),
                     "--seed", "99"]) == 0
        assert main(["synth", "--config", config, "--out", str(out2)]) == 0
        assert (out1 / "train.sed").read_bytes() != (out2 / "train.sed").read_bytes()
        manifest = json.loads((out1 / "manifest.json").read_text())
        assert manifest["seed"] == 99

    def test_manifest_config_reproduces_outputs(self, tmp_path):
        config, out = synth_tiny(tmp_path)
        manifest = json.loads((out / "manifest.json").read_text())
        replay_cfg = write_config(tmp_path, manifest["config"], "replay.json")
        replay_out = tmp_path / "replay"
        assert main(["synth", "--config", replay_cfg, "--out", str(replay_out)]) == 0
        assert (out / "train.sed").read_bytes() == (replay_out / "train.sed").read_bytes()


class TestTrainCommand:
    def test_writes_artifacts(self, tmp_path):
        config, data = synth_tiny(tmp_path)
        out = tmp_path / "run"
        code = main(["train", "--config", config,
                     "--train-data", str(data / "train.sed"),
                     "--dev-data", str(data / "dev.sed"), "--out", str(out)])
        assert code == 0
        assert (out / "model.sem").exists()
        assert (out / "manifest.json").exists()
        rows = read_table(out / "report.tsv")
        assert len(rows) == 1  # one epoch requested, one row written

    def test_rerun_identical_report(self, tmp_path):
        config, data = synth_tiny(tmp_path)
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            assert main(["train", "--config", config,
                         "--train-data", str(data / "train.sed"),
                         "--dev-data", str(data / "dev.sed"),
                         "--out", str(out)]) == 0
            outs.append(out)
        assert (outs[0] / "report.tsv").read_bytes() == (outs[1] / "report.tsv").read_bytes()
        assert (outs[0] / "model.sem").read_bytes() == (outs[1] / "model.sem").read_bytes()

    def test_dim_mismatch_between_splits_exits_3(self, tmp_path):
        config, data = synth_tiny(tmp_path)
        other = synth_dataset(SynthConfig(count=4, positive_fraction=0.5,
                                          frames=30, dim=7, ebr_db=(12.0,),
                                          duration_frames=(5, 10), seed=1))
        save_dataset(tmp_path / "odd.sed", other)
        code = main(["train", "--config", config,
                     "--train-data", str(data / "train.sed"),
                     "--dev-data", str(tmp_path / "odd.sed"),
                     "--out", str(tmp_path / "run")])
        assert code == 3

    def test_missing_dataset_exits_2(self, tmp_path):
        config = write_config(tmp_path, TINY)
        code = main(["train", "--config", config,
                     "--train-data", str(tmp_path / "absent.sed"),
                     "--dev-data", str(tmp_path / "absent.sed"),
                     "--out", str(tmp_path / "run")])
        assert code == 2


class TestInferCommand:
    def model_path(self, tmp_path, zero_w=False):
        encoder = EncoderConfig(kind="multiresolution", layers=1, hidden=4,
                                input_dim=5)
        model = EventModel.initialize(encoder, seed=3)
        if zero_w:
            model.w = np.zeros(4)
        config = TrainConfig(encoder=encoder, seed=3)
        path = tmp_path / "model.sem"
        save_model(path, model, config)
        return path

    def test_zero_classifier_detects_nothing(self, tmp_path):
        _, data = synth_tiny(tmp_path)
        model = self.model_path(tmp_path, zero_w=True)
        out = tmp_path / "inf"
        assert main(["infer", "--model", str(model),
                     "--data", str(data / "dev.sed"), "--out", str(out)]) == 0
        rows = read_table(out / "detections.tsv")
        assert len(rows) == 8
        assert all(r["label"] == "0" for r in rows)

    def test_empty_dataset_gives_header_only(self, tmp_path):
        model = self.model_path(tmp_path)
        save_dataset(tmp_path / "empty.sed", [])
        out = tmp_path / "inf"
        assert main(["infer", "--model", str(model),
                     "--data", str(tmp_path / "empty.sed"),
                     "--out", str(out)]) == 0
        assert (out / "detections.tsv").read_text() == "id\tlabel\tonset_s\toffset_s\n"

    def test_deterministic_output(self, tmp_path):
        _, data = synth_tiny(tmp_path)
        model = self.model_path(tmp_path)
        blobs = []
        for name in ("i1", "i2"):
            out = tmp_path / name
            assert main(["infer", "--model", str(model),
                         "--data", str(data / "dev.sed"), "--out", str(out)]) == 0
            blobs.append((out / "detections.tsv").read_bytes())
        assert blobs[0] == blobs[1]

    def test_missing_model_exits_2(self, tmp_path):
        _, data = synth_tiny(tmp_path)
        assert main(["infer", "--model", str(tmp_path / "absent.sem"),
                     "--data", str(data / "dev.sed"),
                     "--out", str(tmp_path / "o")]) == 2

    def test_dim_mismatch_exits_3(self, tmp_path):
        model = self.model_path(tmp_path)
        other = synth_dataset(SynthConfig(count=3, positive_fraction=0.0,
                                          frames=20, dim=9, ebr_db=(0.0,),
                                          duration_frames=(2, 5), seed=1))
        save_dataset(tmp_path / "wide.sed", other)
        assert main(["infer", "--model", str(model),
                     "--data", str(tmp_path / "wide.sed"),
                     "--out", str(tmp_path / "o")]) == 3


class TestEvalCommand:
    def test_perfect_match(self, tmp_path):
        records = {"u0": EventAnnotation(1.0, 2.0), "u1": None}
        write_annotations(tmp_path / "ref.tsv", records)
        write_annotations(tmp_path / "det.tsv", records)
        out = tmp_path / "ev"
        assert main(["eval", "--ref", str(tmp_path / "ref.tsv"),
                     "--det", str(tmp_path / "det.tsv"), "--out", str(out)]) == 0
        table = {r["metric"]: r["value"] for r in read_table(out / "eval.tsv")}
        assert float(table["er"]) == 0.0
        assert float(table["f1"]) == 100.0

    def test_hand_count_fixture(self, tmp_path):
        refs = {"u0": EventAnnotation(1.0, 2.0), "u1": EventAnnotation(4.0, 5.0),
                "u2": None}
        dets = {"u0": EventAnnotation(1.2, 2.0), "u1": None,
                "u2": EventAnnotation(9.0, 9.5)}
        write_annotations(tmp_path / "ref.tsv", refs)
        write_annotations(tmp_path / "det.tsv", dets)
        out = tmp_path / "ev"
        assert main(["eval", "--ref", str(tmp_path / "ref.tsv"),
                     "--det", str(tmp_path / "det.tsv"), "--out", str(out)]) == 0
        table = {r["metric"]: r["value"] for r in read_table(out / "eval.tsv")}
        assert float(table["er"]) == 1.0
        assert float(table["f1"]) == 50.0

    def test_collar_flag_flips_marginal_match(self, tmp_path):
        write_annotations(tmp_path / "ref.tsv", {"u0": EventAnnotation(3.0, 4.0)})
        write_annotations(tmp_path / "det.tsv", {"u0": EventAnnotation(3.3, 4.0)})
        results = {}
        for collar in ("0.5", "0.1"):
            out = tmp_path / f"ev{collar}"
            assert main(["eval", "--ref", str(tmp_path / "ref.tsv"),
                         "--det", str(tmp_path / "det.tsv"),
                         "--out", str(out), "--collar", collar]) == 0
            table = {r["metric"]: r["value"] for r in read_table(out / "eval.tsv")}
            results[collar] = table
        assert float(results["0.5"]["er"]) == 0.0
        assert int(results["0.1"]["tp"]) == 0
        assert float(results["0.1"]["er"]) == 2.0

    def test_id_mismatch_exits_3(self, tmp_path, capsys):
        write_annotations(tmp_path / "ref.tsv", {"u0": None, "zebra": None})
        write_annotations(tmp_path / "det.tsv", {"u0": None})
        assert main(["eval", "--ref", str(tmp_path / "ref.tsv"),
                     "--det", str(tmp_path / "det.tsv"),
                     "--out", str(tmp_path / "ev")]) == 3
        assert "zebra" in capsys.readouterr().err


class TestSweepCommand:
    def test_single_alpha_grid(self, tmp_path):
        config, data = synth_tiny(tmp_path)
        out = tmp_path / "sw"
        assert main(["sweep", "--config", config,
                     "--train-data", str(data / "train.sed"),
                     "--dev-data", str(data / "dev.sed"),
                     "--out", str(out), "--alpha-grid", "1.0"]) == 0
        rows = read_table(out / "sweep.tsv")
        assert len(rows) == 1 and float(rows[0]["alpha"]) == 1.0

    def test_default_grid_five_rows_ascending(self, tmp_path):
        config, data = synth_tiny(tmp_path)
        out = tmp_path / "sw"
        assert main(["sweep", "--config", config,
                     "--train-data", str(data / "train.sed"),
                     "--dev-data", str(data / "dev.sed"),
                     "--out", str(out)]) == 0
        alphas = [float(r["alpha"]) for r in read_table(out / "sweep.tsv")]
        assert alphas == [0.1, 0.5, 1.0, 5.0, 10.0]

    def test_deterministic(self, tmp_path):
        config, data = synth_tiny(tmp_path)
        blobs = []
        for name in ("s1", "s2"):
            out = tmp_path / name
            assert main(["sweep", "--config", config,
                         "--train-data", str(data / "train.sed"),
                         "--dev-data", str(data / "dev.sed"),
                         "--out", str(out), "--alpha-grid", "0.5,1.0"]) == 0
            blobs.append((out / "sweep.tsv").read_bytes())
        assert blobs[0] == blobs[1]

    def test_bad_grid_exits_2(self, tmp_path):
        config, data = synth_tiny(tmp_path)
        assert main(["sweep", "--config", config,
                     "--train-data", str(data / "train.sed"),
                     "--dev-data", str(data / "dev.sed"),
                     "--out", str(tmp_path / "sw"),
                     "--alpha-grid", "a,b"]) == 2


class TestPresets:
    def test_unknown_preset_exits_2(self, tmp_path, capsys):
        config = write_config(tmp_path, {"preset": "galactic"})
        assert main(["synth", "--config", config,
                     "--out", str(tmp_path / "o")]) == 2
        assert "galactic" in capsys.readouterr().err

    def test_preset_overrides_merge(self, tmp_path):
        cfg = {"preset": "desk", "data": {"train_count": 4, "dev_count": 2,
                                          "frames": 30, "duration_frames": [5, 10]}}
        config = write_config(tmp_path, cfg)
        out = tmp_path / "o"
        assert main(["synth", "--config", config, "--out", str(out)]) == 0
        data = load_dataset(out / "train.sed")
        assert len(data) == 4
        assert data[0].n_frames == 30
        assert data[0].dim == 16  # from the preset

    def test_usage_error_exit_code(self):
        assert main(["synth"]) == 2  # missing --out
