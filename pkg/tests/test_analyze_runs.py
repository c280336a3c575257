"""The run-log and benchmark analysis script."""

import json

import pytest

import analyze_runs


def write_log(path, steps):
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "metadata": {
            "total_steps": len(steps),
            "epochs": len({s["epoch"] for s in steps}),
            "start_time": "2026-01-01T00:00:00",
            "end_time": "2026-01-01T00:01:00",
        },
        "data": steps,
    }
    path.write_text(json.dumps(payload))
    return path


def test_epoch_losses_are_token_weighted(tmp_path):
    path = write_log(
        tmp_path / "a" / "run_log.json",
        [
            {"epoch": 0, "step": 0, "loss": 2.0, "tokens": 10},
            {"epoch": 0, "step": 1, "loss": 1.0, "tokens": 30},
            {"epoch": 1, "step": 2, "loss": 0.5, "tokens": 40},
        ],
    )
    assert analyze_runs.epoch_losses(analyze_runs.load_log_file(str(path))) == pytest.approx([1.25, 0.5])


def test_trained_run_summary(trained_run, capsys):
    config, result = trained_run
    stats = analyze_runs.analyze_run_log(str(result.checkpoint.parent / "run_log.json"))
    assert stats["final_epoch_loss"] == pytest.approx(result.final_loss)
    assert 1 <= stats["best_epoch"] <= len(result.epoch_losses)
    assert "Total steps: 6" in capsys.readouterr().out


def test_all_runs_and_plot(tmp_path):
    for name in ("a", "b"):
        write_log(tmp_path / name / "run_log.json", [{"epoch": 0, "step": 0, "loss": 1.0, "tokens": 4}])
    assert len(analyze_runs.find_run_logs(str(tmp_path))) == 2
    analyze_runs.analyze_all_runs(str(tmp_path), plot=str(tmp_path / "loss.png"))
    assert (tmp_path / "loss.png").stat().st_size > 0


def test_bench_slopes(tmp_path):
    rows = []
    for length in (256, 512, 1024):
        rows.append({"kind": "scan", "length": length, "seconds": 1e-6 * length, "flops": length, "peak_memory_bytes": 0})
        rows.append({"kind": "attention", "length": length, "seconds": 1e-9 * length**2, "flops": length**2, "peak_memory_bytes": 0})
    path = tmp_path / "bench.json"
    path.write_text(json.dumps({"metadata": {"kinds": ["scan", "attention"]}, "data": rows}))
    slopes = analyze_runs.analyze_bench(str(path))
    assert slopes["scan"] == pytest.approx(1.0)
    assert slopes["attention"] == pytest.approx(2.0)
