import json
import math

import numpy as np
import pytest

from pneumoseg.bench import (
    COMPARE_COLUMNS, ModelSpec, append_bench_json, benchmark, compare_models, format_table,
    machine_descriptor, run_inference,
)
from pneumoseg.inference import build_model
from pneumoseg.preprocess import prepare_volume

TINY = {"convlstm": dict(dense_layers=2, dense_growth=4, lstm_hidden=4, head_channels=4),
        "unet2d": dict(base=4, depth=1), "unet3d": dict(base=4, depth=1)}


@pytest.mark.parametrize("kind", ["convlstm", "unet2d", "unet3d"])
def test_run_inference_shapes(kind):
    model = build_model(kind, TINY[kind])
    slices = np.random.default_rng(0).random((5, 16, 16), dtype=np.float32)
    out = run_inference(model, kind, slices, batch_size=2, chunk_depth=4)
    assert tuple(out.shape) == (5, 16, 16)


def test_benchmark_in_process_report():
    rep = benchmark(ModelSpec("unet2d", TINY["unet2d"]), n_slices=4, repetitions=3, image_size=32,
                    isolate=False)
    assert rep.error is None and len(rep.times_s) == 3
    assert rep.median_s > 0 and rep.mad_s >= 0 and rep.n_params > 0
    assert rep.peak_memory_mb >= 0


def test_benchmark_isolated_process():
    rep = benchmark(ModelSpec("convlstm", TINY["convlstm"]), n_slices=2, repetitions=1, image_size=32)
    assert rep.error is None and rep.median_s > 0 and rep.peak_memory_mb > 0


def test_benchmark_reports_failures_without_raising():
    rep = benchmark(ModelSpec("unet2d", TINY["unet2d"]), n_slices=2, repetitions=1, image_size=31,
                    isolate=True)
    assert rep.error is not None and math.isnan(rep.median_s)
    with pytest.raises(ValueError):
        benchmark(ModelSpec("unet2d"), n_slices=0)


def test_more_slices_do_not_run_faster():
    spec = ModelSpec("unet2d", TINY["unet2d"])
    small = benchmark(spec, n_slices=4, repetitions=3, image_size=64, isolate=False)
    large = benchmark(spec, n_slices=8, repetitions=3, image_size=64, isolate=False)
    assert large.median_s >= small.median_s


def test_repeated_runs_are_stable():
    spec = ModelSpec("unet2d", TINY["unet2d"])
    rep = benchmark(spec, n_slices=8, repetitions=7, image_size=64, isolate=False)
    assert rep.mad_s / rep.median_s < 0.2


def test_bench_json_append(tmp_path):
    rep = benchmark(ModelSpec("unet2d", TINY["unet2d"]), n_slices=2, repetitions=1, image_size=32,
                    isolate=False)
    append_bench_json([rep], tmp_path / "bench.json")
    doc = append_bench_json([rep], tmp_path / "bench.json")
    assert len(doc["results"]) == 2
    on_disk = json.loads((tmp_path / "bench.json").read_text())
    assert on_disk["machine"]["cpu_count"] == machine_descriptor()["cpu_count"]
    assert {"model", "n_slices", "times_s", "peak_memory_mb"} <= set(on_disk["results"][0])


def test_compare_models_schema(phantom):
    prep = prepare_volume(phantom.volume, phantom.mask.labels, size=32)
    models = {k: (build_model(k, TINY[k]), ModelSpec(k, TINY[k])) for k in ("unet2d", "unet3d", "convlstm")}
    rows = compare_models(models, [(prep, prep.labels)], n_slices=2, repetitions=1, image_size=32,
                          isolate=False)
    assert len(rows) == 3 and all(tuple(r) == COMPARE_COLUMNS for r in rows)
    for r in rows:
        assert all(0 <= r[c] <= 1 for c in COMPARE_COLUMNS[1:4])
    assert len(format_table(rows).splitlines()) == 4
    with pytest.raises(ValueError, match="missing model"):
        compare_models({"x": (None, ModelSpec("unet2d"))}, [])
