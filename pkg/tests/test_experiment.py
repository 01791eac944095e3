import csv
import json
from pathlib import Path

import numpy as np
import pytest

from occufill.experiment import evaluate_predictions, run_experiment, strength_sweep
from occufill.pipeline import PipelineConfig, PipelineState
from occufill.refine import RefineConfig
from occufill.reporting import CSV_COLUMNS, aggregate_rows, write_report
from occufill import forge, imaging


@pytest.fixture(scope="module")
def state(untrained_ckpts):
    cfg = PipelineConfig(
        diffusion_ckpt=str(untrained_ckpts / "diffusion"),
        masknet_ckpt=str(untrained_ckpts / "masknet"),
        inpaint_ckpt=str(untrained_ckpts / "inpaint"),
        detector_ckpt=str(untrained_ckpts / "detector"),
        sampler_steps=4,
        refine=RefineConfig(s=0.5, n_steps=5, allow_untrained=True),
    )
    return PipelineState(cfg)


class TestRunExperiment:
    @pytest.fixture(scope="class")
    def report(self, state, tiny_dataset, tmp_path_factory):
        data_dir, manifest = tiny_dataset
        out = tmp_path_factory.mktemp("report")
        doc = run_experiment(data_dir, state, ["pose", "none"], [0, 1], out)
        return doc, out, manifest

    def test_row_count(self, report):
        doc, out, manifest = report
        n_test = sum(1 for e in manifest["samples"] if e["split"] == "test")
        # kinds x seeds x samples x {refined, coarse}
        assert doc["row_count"] == n_test * 2 * 2 * 2

    def test_csv_structure(self, report):
        _, out, _ = report
        with open(out / "metrics.csv") as f:
            rows = list(csv.reader(f))
        assert rows[0] == CSV_COLUMNS
        assert len(rows) > 1

    def test_aggregates_are_means(self, report):
        doc, out, _ = report
        with open(out / "metrics.csv") as f:
            reader = csv.DictReader(f)
            rows = list(reader)
        group = [r for r in rows if r["prompt_kind"] == "pose" and r["variant"] == "refined"]
        mean_psnr = np.mean([float(r["psnr_whole"]) for r in group])
        agg = doc["aggregates"]["pose/refined"]
        assert agg["psnr_whole"] == pytest.approx(mean_psnr, rel=1e-9)
        assert agg["count"] == len(group)

    def test_figures_rendered(self, report):
        _, out, _ = report
        figures = list((out / "figures").glob("*.png"))
        assert (out / "figures" / "psnr_whole.png") in figures
        assert (out / "figures" / "stages.png") in figures

    def test_deterministic_consolidated_report(self, state, tiny_dataset, tmp_path):
        data_dir, _ = tiny_dataset
        doc1 = run_experiment(data_dir, state, ["none"], [3], tmp_path / "a")
        doc2 = run_experiment(data_dir, state, ["none"], [3], tmp_path / "b")
        csv_a = (tmp_path / "a" / "metrics.csv").read_bytes()
        csv_b = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert csv_a == csv_b
        assert (tmp_path / "a" / "report.json").read_bytes() == \
               (tmp_path / "b" / "report.json").read_bytes()


class TestStrengthSweep:
    def test_sweep_rows_and_figure(self, state, tiny_dataset, tmp_path):
        data_dir, manifest = tiny_dataset
        doc = strength_sweep(data_dir, state, [0.1, 0.9], [0], tmp_path / "sweep")
        n_test = sum(1 for e in manifest["samples"] if e["split"] == "test")
        assert doc["row_count"] == n_test * 2
        assert set(doc["metadata"]["masked_psnr_by_s"]) == {"0.1", "0.9"}
        assert (tmp_path / "sweep" / "figures" / "s_sweep.png").exists()


class TestEvaluatePredictions:
    def test_scores_predictions(self, tiny_dataset, tmp_path):
        data_dir, manifest = tiny_dataset
        pred = tmp_path / "pred"
        for entry in forge.iter_split(data_dir, "test"):
            sample = forge.load_sample(data_dir, entry)
            out = pred / f"{entry['path']}.png"
            out.parent.mkdir(parents=True, exist_ok=True)
            imaging.save_image(out, sample.complete)  # perfect predictions
        doc = evaluate_predictions(data_dir, pred, tmp_path / "rep")
        agg = doc["aggregates"]["external/prediction"]
        assert agg["psnr_whole"] == pytest.approx(99.0)
        assert agg["mse_whole"] == pytest.approx(0.0, abs=1e-12)

    def test_missing_predictions_rejected(self, tiny_dataset, tmp_path):
        data_dir, _ = tiny_dataset
        with pytest.raises(FileNotFoundError):
            evaluate_predictions(data_dir, tmp_path / "nothing", tmp_path / "rep2")


def test_write_report_formats_floats(tmp_path):
    rows = [{c: None for c in CSV_COLUMNS}]
    rows[0].update({"sample": "a", "seed": 1, "prompt_kind": "pose",
                    "variant": "refined", "psnr_whole": 1 / 3})
    doc = write_report(tmp_path, rows, aggregate_rows(rows), {"mode": "t"})
    text = (tmp_path / "metrics.csv").read_text()
    assert "0.3333333333" in text
    assert doc["row_count"] == 1
