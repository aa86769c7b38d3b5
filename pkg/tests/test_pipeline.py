import json

import numpy as np
import pytest

from ebdiff import pipeline
from ebdiff.config import ExperimentConfig
from ebdiff.datasets import read_points
from ebdiff.evaluation import energy_distance
from ebdiff.pipeline import StageError, load_run_model, read_timing, run_pipeline

TINY = {
    "dataset": {"name": "gauss8", "n_train": 600, "n_eval": 300, "seed": 1},
    "model": {"hidden_dims": [16, 16], "time_embed_dim": 8},
    "eb": {"pseudo_epoch_iters": 20, "max_intervals": 10, "queue_len": 3, "epsilon": 0.3},
    "taeb": {"boundaries": [300], "rates": [0.25, 0.5], "budgets": [60, 80]},
    "training": {"batch_size": 32, "iterations": 100},
    "sampling": {"ddim_steps": 10, "n_samples": 200, "n_projections": 16},
    "global_seed": 3,
}


def tiny(**over):
    doc = json.loads(json.dumps(TINY))
    for section, values in over.items():
        if isinstance(values, dict):
            doc[section].update(values)
        else:
            doc[section] = values
    return ExperimentConfig.model_validate(doc)


def manifest(run_dir):
    return json.loads((run_dir / "manifest.json").read_text())


def digests(run_dir):
    return {a["path"]: a["sha256"] for a in manifest(run_dir)["artifacts"] if not a["timing"]}


@pytest.mark.parametrize("mode", pipeline.MODES)
def test_modes_write_complete_manifest(mode, tmp_path):
    out = run_pipeline(tiny(), mode, tmp_path / mode)
    m = manifest(out)
    assert m["mode"] == mode and m["config_hash"] == tiny().config_hash()
    assert all(s["status"] == "ok" for s in m["stages"])
    on_disk = sorted(p.relative_to(out).as_posix() for p in out.rglob("*")
                     if p.is_file() and p.name != "manifest.json")
    assert [a["path"] for a in m["artifacts"]] == on_disk
    for rel in ("config.json", "samples/generated.csv", "samples/reference.csv",
                "reports/metrics.json", "reports/cost.json", *pipeline.TIMING_FILES):
        assert rel in on_disk
    metrics = json.loads((out / "reports/metrics.json").read_text())
    assert np.isfinite(metrics["energy_distance"]) and metrics["n_generated"] == 200


def test_taeb_layout(tmp_path):
    out = run_pipeline(tiny(), "taeb", tmp_path / "r")
    m = manifest(out)
    assert len(m["tickets"]) == 2
    for i in range(2):
        for rel in (f"masks/region_{i}/ticket.ebmask", f"checkpoints/region_{i}.ebdf",
                    f"heatmaps/region_{i}/hamming.csv", f"heatmaps/region_{i}/hamming.pgm",
                    f"heatmaps/region_{i}/hamming.meta"):
            assert (out / rel).is_file()
    cost = json.loads((out / "reports/cost.json").read_text())
    assert cost["avg_pruning_rate"] == pytest.approx(0.3 * 0.25 + 0.7 * 0.5)
    assert [r["train"] for r in cost["regions"]] == [[0, 320], [300, 1000]]
    plan, nets, _ = load_run_model(out)
    assert [n.hidden_dims for n in nets] == [[12, 12], [8, 8]]


def test_rerun_is_bitwise_identical(tmp_path):
    a = run_pipeline(tiny(), "taeb", tmp_path / "a")
    b = run_pipeline(tiny(), "taeb", tmp_path / "b")
    assert digests(a) == digests(b)
    assert manifest(a)["tickets"] == manifest(b)["tickets"]


def test_different_seed_differs(tmp_path):
    a = run_pipeline(tiny(), "eb", tmp_path / "a")
    b = run_pipeline(tiny(global_seed=4), "eb", tmp_path / "b")
    assert digests(a)["samples/generated.csv"] != digests(b)["samples/generated.csv"]


def test_single_region_taeb_equals_eb(tmp_path):
    cfg = tiny(taeb={"boundaries": [], "rates": [0.5], "budgets": None})
    a = run_pipeline(cfg, "eb", tmp_path / "eb")
    b = run_pipeline(cfg, "taeb", tmp_path / "taeb")
    assert digests(a) == digests(b)


def test_stage_failure_is_recorded(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise RuntimeError("injected")

    monkeypatch.setattr(pipeline, "train_regions_parallel", boom)
    with pytest.raises(StageError, match="ticket_training"):
        run_pipeline(tiny(), "eb", tmp_path / "r")
    m = manifest(tmp_path / "r")
    assert [s["status"] for s in m["stages"]] == ["ok", "ok", "failed"]
    assert "injected" in m["stages"][-1]["error"]
    assert any(a["path"] == "masks/region_0/ticket.ebmask" for a in m["artifacts"])


def test_unknown_mode(tmp_path):
    with pytest.raises(ValueError):
        run_pipeline(tiny(), "sparse", tmp_path)


def test_metrics_match_saved_csvs(tmp_path):
    out = run_pipeline(tiny(), "dense", tmp_path / "d")
    metrics = json.loads((out / "reports/metrics.json").read_text())
    again = energy_distance(read_points(out / "samples/generated.csv"),
                            read_points(out / "samples/reference.csv"))
    assert metrics["energy_distance"] == again


def test_dense_speedup_against_itself(tmp_path):
    out = run_pipeline(tiny(), "dense", tmp_path / "d")
    speed = json.loads((out / "reports/speedup.json").read_text())
    assert speed["speedup"] == 1.0 and not speed["includes_search_overhead"]
    assert read_timing(out).search_wall_time == 0.0


@pytest.mark.slow
def test_dense_then_eb_speedup(tmp_path):
    cfg = ExperimentConfig.model_validate({
        "dataset": {"n_train": 2000, "n_eval": 500},
        "eb": {"pseudo_epoch_iters": 50, "max_intervals": 40},
        "training": {"iterations": 3000},
        "sampling": {"ddim_steps": 20, "n_samples": 500},
    })
    dense = run_pipeline(cfg, "dense", tmp_path / "dense")
    eb = run_pipeline(cfg, "eb", tmp_path / "eb", baseline=dense)
    speed = json.loads((eb / "reports/speedup.json").read_text())
    assert speed["includes_search_overhead"]
    assert speed["speedup"] > 1.0
