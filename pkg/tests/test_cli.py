import csv
import json
import os

import numpy as np
import pytest

from kinodiff.cli import main
from kinodiff.config import ConfigError, RunConfig

AIS_FIXTURE = """MMSI,BaseDateTime,LAT,LON,SOG,COG
101,2023-05-01T00:00:00,0.000,0.000,4.0,90
101,2023-05-01T00:01:00,0.000,0.002,4.0,90
101,2023-05-01T00:02:00,0.000,0.004,4.0,90
202,2023-05-01T00:00:00,0.100,0.000,6.0,90
202,2023-05-01T00:01:00,0.100,0.003,6.0,90
303,2023-05-01T00:00:00,0.200,0.000,2.0,90
303,2023-05-01T00:01:30,0.200,0.001,2.0,90
"""

TINY_CONFIG = """[schedule]
T = 20
beta1 = 0.005
betaT = 0.5

[sampler]
eta = 0.0
stride = 1
t_star = 4

[loss]
gamma2 = 0.05
gamma3 = 1e-5

[model]
width = 8
heads = 2
sampling_blocks = 2
resnet_blocks = 2
kernel_size = 3
max_context = 1

[data]
input_len = 24
neighbors = 1
radius_m = 4000.0

[train]
steps = 40
batch_size = 6
lr = 3e-3
checkpoint_every = 20

[run]
seed = 11
score_draws = 2
"""


def read(path):
    with open(path, encoding="utf-8") as fh:
        return fh.read()


@pytest.fixture()
def tiny_cfg_file(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY_CONFIG)
    return str(p)


class TestRunConfig:
    def test_round_trip_stable(self):
        cfg = RunConfig.from_text(TINY_CONFIG)
        text = cfg.to_text()
        again = RunConfig.from_text(text)
        assert again.to_text() == text
        assert again.values == cfg.values

    def test_defaults_fill_missing(self):
        cfg = RunConfig.from_text("[run]\nseed = 5\n")
        assert cfg.get("run", "seed") == 5
        assert cfg.get("schedule", "T") == 1000
        assert cfg.get("model", "width") == 32

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig.from_text("[schedule]\nbogus = 1\n")
        with pytest.raises(ConfigError):
            RunConfig.from_text("[nosuch]\nx = 1\n")


class TestIngest:
    def test_three_vessels(self, tmp_path):
        src = tmp_path / "ais.csv"
        src.write_text(AIS_FIXTURE)
        out = tmp_path / "out"
        assert main(["ingest", "--format", "ais-csv", "--in", str(src),
                     "--out", str(out)]) == 0
        stats = json.loads(read(out / "ingest_stats.json"))
        assert stats["trajectories"] == 3
        canon = read(out / "canonical.csv")
        ids = {row.split(",")[0] for row in canon.splitlines()[1:]}
        assert ids == {"101", "202", "303"}

    def test_empty_file_exits_2(self, tmp_path):
        src = tmp_path / "empty.csv"
        src.write_text("")
        assert main(["ingest", "--format", "ais-csv", "--in", str(src),
                     "--out", str(tmp_path / "o")]) == 2

    def test_missing_file_exits_2(self, tmp_path):
        assert main(["ingest", "--format", "ais-csv", "--in",
                     str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o")]) == 2

    def test_idempotent(self, tmp_path):
        src = tmp_path / "ais.csv"
        src.write_text(AIS_FIXTURE)
        out = tmp_path / "out"
        main(["ingest", "--format", "ais-csv", "--in", str(src), "--out", str(out)])
        first = read(out / "canonical.csv")
        main(["ingest", "--format", "ais-csv", "--in", str(src), "--out", str(out)])
        assert read(out / "canonical.csv") == first


class TestSynth:
    def test_counts_and_determinism(self, tmp_path, tiny_cfg_file):
        out_a = tmp_path / "a"
        args = ["synth", "--config", tiny_cfg_file, "--n-normals", "40",
                "--rate", "0.05", "--seed", "7"]
        assert main(args + ["--out", str(out_a)]) == 0
        labels = list(csv.DictReader(open(out_a / "labels.csv")))
        assert len(labels) == 40
        assert sum(1 for r in labels if r["label"] == "anomalous") == 2
        out_b = tmp_path / "b"
        assert main(args + ["--out", str(out_b)]) == 0
        assert read(out_a / "trajectories.csv") == read(out_b / "trajectories.csv")
        assert read(out_a / "labels.csv") == read(out_b / "labels.csv")

    def test_manifest_records_seed_and_ranges(self, tmp_path, tiny_cfg_file):
        out = tmp_path / "m"
        main(["synth", "--config", tiny_cfg_file, "--n-normals", "20",
              "--rate", "0.1", "--seed", "3", "--out", str(out)])
        manifest = json.loads(read(out / "manifest.json"))
        assert manifest["seed"] == 3
        assert manifest["rate"] == 0.1
        assert set(manifest["severity_ranges"]) == {"speed", "bearing", "drift", "replay"}

    def test_bad_rate_exits_2(self, tmp_path, tiny_cfg_file):
        assert main(["synth", "--config", tiny_cfg_file, "--rate", "1.5",
                     "--out", str(tmp_path / "x")]) == 2


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> train once for the detect/eval/report tests."""
    root = tmp_path_factory.mktemp("run")
    cfgp = root / "tiny.ini"
    cfgp.write_text(TINY_CONFIG)
    data = root / "data"
    main(["synth", "--config", str(cfgp), "--n-normals", "30", "--rate", "0.1",
          "--out", str(data)])
    model = root / "model"
    rc = main(["train", "--config", str(cfgp), "--data",
               str(data / "trajectories.csv"), "--out", str(model)])
    assert rc == 0
    return {"root": root, "cfg": str(cfgp), "data": data, "model": model}


class TestTrainCmd:
    def test_outputs_exist(self, pipeline):
        model = pipeline["model"]
        assert os.path.isfile(model / "checkpoint.ckpt")
        trace = list(csv.DictReader(open(model / "loss_trace.csv")))
        assert len(trace) == 40
        assert [r["step"] for r in trace][:3] == ["1", "2", "3"]

    def test_no_kbm_zeroes_phy_column(self, pipeline, tmp_path):
        out = tmp_path / "nk"
        rc = main(["train", "--config", pipeline["cfg"], "--data",
                   str(pipeline["data"] / "trajectories.csv"), "--out", str(out),
                   "--no-kbm", "--steps", "10"])
        assert rc == 0
        trace = list(csv.DictReader(open(out / "loss_trace.csv")))
        assert all(float(r["phy"]) == 0.0 for r in trace)

    def test_resume_continues_step_numbering(self, pipeline, tmp_path):
        out = tmp_path / "resume"
        rc = main(["train", "--config", pipeline["cfg"], "--data",
                   str(pipeline["data"] / "trajectories.csv"), "--out", str(out),
                   "--init-from", str(pipeline["model"] / "checkpoint.ckpt"),
                   "--steps", "5"])
        assert rc == 0
        trace = list(csv.DictReader(open(out / "loss_trace.csv")))
        assert trace[0]["step"] == "41"
        assert trace[-1]["step"] == "45"

    def test_missing_data_exits_2(self, pipeline, tmp_path):
        assert main(["train", "--config", pipeline["cfg"], "--data",
                     str(tmp_path / "none.csv"), "--out", str(tmp_path / "o")]) == 2


class TestDetectCmd:
    def test_lambda_zero_flags_everything(self, pipeline, tmp_path):
        out = tmp_path / "d0"
        rc = main(["detect", "--config", pipeline["cfg"],
                   "--checkpoint", str(pipeline["model"] / "checkpoint.ckpt"),
                   "--data", str(pipeline["data"] / "trajectories.csv"),
                   "--lambda", "0.0", "--out", str(out)])
        assert rc == 0
        rows = list(csv.DictReader(open(out / "report.csv")))
        assert len(rows) == 30
        assert all(r["flag"] == "anomalous" for r in rows)

    def test_percentile_mode_flags_about_five_percent(self, pipeline, tmp_path):
        out = tmp_path / "dp"
        rc = main(["detect", "--config", pipeline["cfg"],
                   "--checkpoint", str(pipeline["model"] / "checkpoint.ckpt"),
                   "--data", str(pipeline["data"] / "trajectories.csv"),
                   "--lambda-percentile", "95", "--out", str(out)])
        assert rc == 0
        rows = list(csv.DictReader(open(out / "report.csv")))
        flagged = sum(1 for r in rows if r["flag"] == "anomalous")
        assert abs(flagged - 1.5) <= 1.5  # ~5% of 30, +/- 1 trajectory

    def test_deterministic_reports(self, pipeline, tmp_path):
        args = ["detect", "--config", pipeline["cfg"],
                "--checkpoint", str(pipeline["model"] / "checkpoint.ckpt"),
                "--data", str(pipeline["data"] / "trajectories.csv"),
                "--labels", str(pipeline["data"] / "labels.csv"),
                "--lambda-percentile", "90"]
        out_a, out_b = tmp_path / "da", tmp_path / "db"
        assert main(args + ["--out", str(out_a)]) == 0
        assert main(args + ["--out", str(out_b)]) == 0
        assert read(out_a / "report.csv") == read(out_b / "report.csv")
        assert read(out_a / "summary.txt") == read(out_b / "summary.txt")

    def test_requires_exactly_one_lambda_mode(self, pipeline, tmp_path):
        base = ["detect", "--config", pipeline["cfg"],
                "--checkpoint", str(pipeline["model"] / "checkpoint.ckpt"),
                "--data", str(pipeline["data"] / "trajectories.csv"),
                "--out", str(tmp_path / "x")]
        assert main(base) == 2
        assert main(base + ["--lambda", "0.1", "--lambda-percentile", "90"]) == 2

    def test_bad_checkpoint_exits_2(self, pipeline, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"JUNKJUNKJUNK")
        assert main(["detect", "--config", pipeline["cfg"], "--checkpoint",
                     str(bad), "--data", str(pipeline["data"] / "trajectories.csv"),
                     "--lambda", "0", "--out", str(tmp_path / "x")]) == 2


class TestEvalCmd:
    def _write_report(self, path, rows):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "E_delta", "flag", "label", "kind"])
            w.writerows(rows)

    def _write_labels(self, path, rows):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "label", "kind", "severity", "window_start",
                        "window_end", "seed"])
            w.writerows(rows)

    def test_perfect_flags_give_f1_one(self, tmp_path):
        rep = tmp_path / "report.csv"
        lab = tmp_path / "labels.csv"
        self._write_report(rep, [
            ["a", "0.9", "anomalous", "", ""],
            ["b", "0.1", "normal", "", ""],
            ["c", "0.2", "normal", "", ""],
        ])
        self._write_labels(lab, [
            ["a", "anomalous", "drift", "1.0", "5", "15", "0"],
            ["b", "normal", "", "", "", "", ""],
            ["c", "normal", "", "", "", "", ""],
        ])
        out = tmp_path / "ev"
        assert main(["eval", "--report", str(rep), "--labels", str(lab),
                     "--out", str(out)]) == 0
        metrics = json.loads(read(out / "metrics.txt"))
        assert metrics["metrics"]["f1"] == 1.0
        assert metrics["auc"] == 1.0

    def test_metrics_delegate_to_scoring(self, tmp_path):
        from kinodiff.scoring import confusion_metrics
        rep = tmp_path / "report.csv"
        lab = tmp_path / "labels.csv"
        self._write_report(rep, [
            ["a", "0.9", "anomalous", "", ""],
            ["b", "0.8", "anomalous", "", ""],
            ["c", "0.2", "normal", "", ""],
            ["d", "0.1", "normal", "", ""],
        ])
        self._write_labels(lab, [
            ["a", "anomalous", "drift", "1.0", "5", "15", "0"],
            ["b", "normal", "", "", "", "", ""],
            ["c", "anomalous", "speed", "0.5", "5", "15", "0"],
            ["d", "normal", "", "", "", "", ""],
        ])
        out = tmp_path / "ev"
        assert main(["eval", "--report", str(rep), "--labels", str(lab),
                     "--out", str(out)]) == 0
        got = json.loads(read(out / "metrics.txt"))["metrics"]
        want = confusion_metrics([True, True, False, False],
                                 [True, False, True, False]).as_dict()
        assert got == want

    def test_id_mismatch_exits_2(self, tmp_path):
        rep = tmp_path / "report.csv"
        lab = tmp_path / "labels.csv"
        self._write_report(rep, [["a", "0.9", "anomalous", "", ""]])
        self._write_labels(lab, [["zzz", "normal", "", "", "", "", ""]])
        assert main(["eval", "--report", str(rep), "--labels", str(lab),
                     "--out", str(tmp_path / "ev")]) == 2


class TestReportCmd:
    def test_bearing_histogram_tails_by_class(self, pipeline, tmp_path):
        run = tmp_path / "run"
        os.makedirs(run)
        # assemble a run dir: synth a bearing-only dataset + detect report
        cfgp = pipeline["cfg"]
        main(["synth", "--config", cfgp, "--n-normals", "30", "--rate", "0.1",
              "--kind-mix", "bearing=1.0", "--seed", "5", "--out", str(run)])
        rc = main(["detect", "--config", cfgp,
                   "--checkpoint", str(pipeline["model"] / "checkpoint.ckpt"),
                   "--data", str(run / "trajectories.csv"),
                   "--labels", str(run / "labels.csv"),
                   "--lambda-percentile", "90", "--out", str(run)])
        assert rc == 0
        assert main(["report", "--run-dir", str(run)]) == 0
        normal = list(csv.DictReader(open(run / "bearing_hist_normal.csv")))
        anom = list(csv.DictReader(open(run / "bearing_hist_anomalous.csv")))

        def tail_mass(rows):
            total = sum(int(r["count"]) for r in rows)
            tail = sum(int(r["count"]) for r in rows
                       if float(r["bearing_change_deg"]) >= 90.0)
            return tail / max(total, 1)

        assert tail_mass(anom) > tail_mass(normal)
        assert os.path.isfile(run / "score_hist.csv")
        summary = json.loads(read(run / "report_summary.txt"))
        assert "geo_errors" in summary
