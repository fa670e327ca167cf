"""Inference time / peak-memory harness and the three-model comparison table.

Timings exclude preprocessing: inputs are already-normalized slices. Each
benchmark runs in a fresh spawned process by default, so the resident-set
baseline is not polluted by earlier models; peak memory is the highest
sampled RSS above the pre-inference baseline. Benchmarks assume the
machine is otherwise idle.
"""

from __future__ import annotations

import json
import multiprocessing as mp
import os
import platform
import statistics
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import psutil
import torch

from .evaluate import dice
from .inference import build_model, load_model, predict_prepared, window_batch
from .volume_io import CLASS_CODES, CLASS_NAMES

MB = 1024.0 * 1024.0


@dataclass
class BenchReport:
    model: str
    n_slices: int
    image_size: int
    repetitions: int
    times_s: list[float]
    median_s: float
    mad_s: float
    peak_memory_mb: float
    n_params: int
    device: str = "cpu"
    threads: int = 1
    error: str | None = None
    dice: dict[str, float] | None = None
    notes: str = "preprocessing excluded; one warm-up run; exclusive machine assumed"


@dataclass
class ModelSpec:
    kind: str
    config: dict | None = None
    seed: int = 0
    weights: str | None = None


class _RssSampler(threading.Thread):
    def __init__(self, interval: float = 0.002):
        super().__init__(daemon=True)
        self.proc = psutil.Process()
        self.interval = interval
        self.peak = self.proc.memory_info().rss
        self._stop_evt = threading.Event()

    def run(self):
        while not self._stop_evt.is_set():
            self.peak = max(self.peak, self.proc.memory_info().rss)
            self._stop_evt.wait(self.interval)

    def stop(self) -> int:
        self._stop_evt.set()
        self.join()
        self.peak = max(self.peak, self.proc.memory_info().rss)
        return self.peak


def _make_model(spec: ModelSpec):
    if spec.weights:
        return load_model(spec.weights)[0]
    return build_model(spec.kind, spec.config, spec.seed)


@torch.no_grad()
def run_inference(model, kind: str, slices: np.ndarray, batch_size: int = 1, chunk_depth: int = 16):
    """Segment every slice of a normalized (D, H, W) stack with ``model``."""
    model.eval()
    n = slices.shape[0]
    if kind == "convlstm":
        out = []
        for s in range(0, n, batch_size):
            out.append(model.logits(window_batch(slices, range(s, min(n, s + batch_size)))).argmax(1))
        return torch.cat(out)
    x = torch.from_numpy(slices)
    if kind == "unet2d":
        return torch.cat([model(x[s:s + batch_size, None]).argmax(1) for s in range(0, n, batch_size)])
    if kind == "unet3d":
        return torch.cat([model(x[None, None, s:s + chunk_depth])[0].argmax(0)
                          for s in range(0, n, chunk_depth)])
    raise ValueError(f"unknown model kind {kind!r}")


def _bench_in_process(spec: ModelSpec, n_slices: int, repetitions: int, image_size: int,
                      batch_size: int, threads: int) -> BenchReport:
    torch.set_num_threads(threads)
    model = _make_model(spec)
    slices = np.random.default_rng(0).random((n_slices, image_size, image_size), dtype=np.float32)
    n_params = sum(p.numel() for p in model.parameters())
    sampler = _RssSampler()
    baseline = sampler.peak
    times, error = [], None
    sampler.start()
    try:
        run_inference(model, spec.kind, slices, batch_size)
        for _ in range(repetitions):
            t0 = time.perf_counter()
            run_inference(model, spec.kind, slices, batch_size)
            times.append(time.perf_counter() - t0)
    except (MemoryError, RuntimeError) as exc:
        error = f"{type(exc).__name__}: {exc}"
    peak = sampler.stop()
    med = statistics.median(times) if times else float("nan")
    mad = statistics.median(abs(t - med) for t in times) if times else float("nan")
    return BenchReport(spec.kind, n_slices, image_size, repetitions, times, med, mad,
                       (peak - baseline) / MB, n_params, threads=threads, error=error)


def _child(queue, args):
    try:
        queue.put(("ok", asdict(_bench_in_process(*args))))
    except BaseException as exc:  # reported to the parent, never fatal to the harness
        queue.put(("error", f"{type(exc).__name__}: {exc}"))


def benchmark(spec: ModelSpec, n_slices: int = 16, repetitions: int = 3, image_size: int = 256,
              batch_size: int = 1, threads: int = 1, isolate: bool = True) -> BenchReport:
    """Median wall time after one warm-up and peak RSS growth during inference."""
    if n_slices < 1 or repetitions < 1:
        raise ValueError("n_slices and repetitions must be >= 1")
    args = (spec, n_slices, repetitions, image_size, batch_size, threads)
    if not isolate:
        return _bench_in_process(*args)
    ctx = mp.get_context("spawn")
    queue = ctx.Queue()
    proc = ctx.Process(target=_child, args=(queue, args))
    proc.start()
    try:
        status, payload = queue.get()
    except Exception as exc:  # child died without reporting (e.g. killed by the OOM killer)
        status, payload = "error", f"benchmark process failed: {exc}"
    proc.join()
    if status == "ok":
        return BenchReport(**payload)
    return BenchReport(spec.kind, n_slices, image_size, repetitions, [], float("nan"), float("nan"),
                       float("nan"), 0, threads=threads, error=payload)


def machine_descriptor() -> dict:
    return {
        "platform": platform.platform(),
        "processor": platform.processor() or platform.machine(),
        "cpu_count": os.cpu_count(),
        "memory_gb": round(psutil.virtual_memory().total / 1024 ** 3, 2),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "accelerator": "none (portable CPU path)",
    }


def append_bench_json(reports, path) -> dict:
    """Append results to ``bench.json`` (created with a machine descriptor if absent)."""
    path = Path(path)
    doc = json.loads(path.read_text()) if path.exists() else {"machine": machine_descriptor(), "results": []}
    doc["results"].extend(asdict(r) if not isinstance(r, dict) else r for r in reports)
    path.write_text(json.dumps(doc, indent=2), encoding="utf-8")
    return doc


COMPARE_COLUMNS = ("model", "dice_background", "dice_ggo", "dice_high_opacity", "cpu_time_s", "memory_mb")


def compare_models(models: dict, test_cases, n_slices: int = 16, repetitions: int = 3,
                   image_size: int = 256, isolate: bool = True) -> list[dict]:
    """One row per model: per-class Dice averaged over the test cases plus compute columns.

    ``models`` maps a display name to ``(model, ModelSpec)``; ``test_cases`` is a list of
    ``(prepared_volume, gt_labels_in_256_space)`` pairs shared by every model.
    """
    if not models:
        raise ValueError("no models to compare")
    rows = []
    for name, (model, spec) in models.items():
        if model is None:
            raise ValueError(f"missing model {name!r}")
        scores = {CLASS_NAMES[c]: [] for c in CLASS_CODES}
        for prep, gt in test_cases:
            pred = predict_prepared(model, prep)
            for c in CLASS_CODES:
                scores[CLASS_NAMES[c]].append(dice(pred, gt, c))
        rep = benchmark(spec, n_slices, repetitions, image_size, isolate=isolate)
        rows.append({
            "model": name,
            **{f"dice_{k}": float(np.mean(v)) for k, v in scores.items()},
            "cpu_time_s": rep.median_s,
            "memory_mb": rep.peak_memory_mb,
        })
    return rows


def format_table(rows) -> str:
    lines = ["\t".join(COMPARE_COLUMNS)]
    for r in rows:
        lines.append("\t".join(r["model"] if c == "model" else f"{r[c]:.5g}" for c in COMPARE_COLUMNS))
    return "\n".join(lines)
