"""Training loop, fold protocol and cross-validation."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .inference import build_model, predict_prepared, save_model
from .losses import get_loss
from .optim import PlateauState, plateau_update, sgd_step
from .preprocess import AugmentParams, PreparedVolume, SliceWindow, augment, prepare_volume, window_indices
from .quantify import map_prediction_to_source
from .volume_io import Dataset, LabelMask, load_mask, load_volume, save_mask

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-6
    batch_size: int = 32
    plateau_factor: float = 0.1
    plateau_patience: int = 10
    stop_lr: float = 1e-7
    loss_kind: str = "rmi"
    seed: int = 0
    max_epochs: int = 500
    # desk-scale knobs: random training crops of the 256x256 windows, capped epoch length
    patch_size: int | None = 64
    windows_per_epoch: int | None = None
    val_windows: int | None = None
    augment: bool = True
    image_size: int = 256
    model_kind: str = "convlstm"
    time_limit_s: float | None = None

    def __post_init__(self):
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if not self.stop_lr < self.lr0:
            raise ValueError("stop_lr must be below lr0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        get_loss(self.loss_kind)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


@dataclass
class TrainHistory:
    records: list[tuple[int, float, float, float]] = field(default_factory=list)
    reductions: list[int] = field(default_factory=list)
    best_epoch: int | None = None
    stopped_by: str = ""

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for epoch, tr, va, lr in self.records:
                w.writerow([epoch, repr(tr), repr(va), repr(lr)])

    @classmethod
    def from_csv(cls, path) -> "TrainHistory":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        hist = cls([(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]), float(r["lr"]))
                    for r in rows])
        lrs = [r[3] for r in hist.records]
        hist.reductions = [hist.records[i][0] for i in range(1, len(lrs)) if lrs[i] < lrs[i - 1]]
        return hist


def make_folds(patient_ids, k: int = 5, val_size: int = 32, seed: int = 0) -> list[FoldSplit]:
    """Shuffle once, cut k near-equal test folds; per fold the first ``val_size``
    remaining ids (in shuffled order) validate and the rest train."""
    ids = list(patient_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("patient ids must be unique")
    if len(ids) < k + val_size:
        raise ValueError(f"cohort of {len(ids)} too small for {k} folds with {val_size} validation cases")
    order = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    base, extra = divmod(len(order), k)
    bounds, start = [], 0
    for f in range(k):
        size = base + (1 if f < extra else 0)
        bounds.append((start, start + size))
        start += size
    folds = []
    for f, (a, b) in enumerate(bounds):
        rest = order[:a] + order[b:]
        folds.append(FoldSplit(f, tuple(rest[val_size:]), tuple(rest[:val_size]), tuple(order[a:b])))
    return folds


class CohortCache:
    """Loads and prepares cohort volumes on demand; every read is logged by patient id."""

    def __init__(self, dataset: Dataset, size: int = 256):
        self.dataset = dataset
        self.size = size
        self._prepared: dict[str, PreparedVolume] = {}
        self._volumes = {}
        self._masks = {}
        self.access_log: list[str] = []

    def _load(self, pid: str):
        if pid not in self._prepared:
            _, vol_path, mask_path = self.dataset.record(pid)
            vol = load_volume(vol_path)
            mask = load_mask(mask_path, vol.shape)
            self._volumes[pid] = vol
            self._masks[pid] = mask
            self._prepared[pid] = prepare_volume(vol, mask.labels, size=self.size)

    def prepared(self, pid: str) -> PreparedVolume:
        self.access_log.append(pid)
        self._load(pid)
        return self._prepared[pid]

    def volume(self, pid: str):
        self.access_log.append(pid)
        self._load(pid)
        return self._volumes[pid]

    def mask(self, pid: str) -> LabelMask:
        self.access_log.append(pid)
        self._load(pid)
        return self._masks[pid]

    def accessed(self, since: int = 0) -> set[str]:
        return set(self.access_log[since:])


def _crop(arr, r, c, p):
    return arr[..., r:r + p, c:c + p]


def _training_sample(prep: PreparedVolume, target: int, rng, cfg: TrainConfig):
    n = prep.slices.shape[0]
    pixels = prep.slices[window_indices(n, target)]
    label = prep.labels[target]
    if cfg.augment:
        window = SliceWindow(pixels, target, prep.crop_box, prep.scale)
        window, label = augment(window, label, AugmentParams.sample(rng))
        pixels = window.pixels
    p = cfg.patch_size
    if p and p < pixels.shape[-1]:
        r, c = rng.integers(0, pixels.shape[-2] - p + 1), rng.integers(0, pixels.shape[-1] - p + 1)
        pixels, label = _crop(pixels, r, c, p), _crop(label, r, c, p)
    return pixels, label


def _validation_set(cache: CohortCache, val_ids, cfg: TrainConfig):
    rng = np.random.default_rng([cfg.seed, 7919])
    items = [(pid, t) for pid in val_ids for t in range(cache.prepared(pid).slices.shape[0])]
    if cfg.val_windows and len(items) > cfg.val_windows:
        keep = np.sort(rng.choice(len(items), cfg.val_windows, replace=False))
        items = [items[i] for i in keep]
    xs, ys = [], []
    for pid, t in items:
        prep = cache.prepared(pid)
        pixels = prep.slices[window_indices(prep.slices.shape[0], t)]
        label = prep.labels[t]
        p = cfg.patch_size
        if p and p < pixels.shape[-1]:
            r, c = rng.integers(0, pixels.shape[-2] - p + 1), rng.integers(0, pixels.shape[-1] - p + 1)
            pixels, label = _crop(pixels, r, c, p), _crop(label, r, c, p)
        xs.append(pixels)
        ys.append(label)
    return np.stack(xs), np.stack(ys)


@torch.no_grad()
def evaluate_loss(model, xs, ys, loss_fn, batch_size: int) -> float:
    model.eval()
    dtype = next(model.parameters()).dtype
    total, count = 0.0, 0
    for s in range(0, len(xs), batch_size):
        x = torch.from_numpy(xs[s:s + batch_size]).to(dtype)
        y = torch.from_numpy(ys[s:s + batch_size]).long()
        total += float(loss_fn(model.logits(x), y)) * len(x)
        count += len(x)
    return total / count


def train_fold(split: FoldSplit, cache: CohortCache, net_cfg: dict | None = None,
               train_cfg: TrainConfig | None = None, progress=None):
    """Train one model on ``split.train_ids`` and return ``(best_model, history)``.

    The returned model carries the weights of the lowest-validation-loss epoch.
    """
    cfg = train_cfg or TrainConfig()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = build_model(cfg.model_kind, net_cfg, seed=cfg.seed)
    loss_fn = get_loss(cfg.loss_kind)
    params = [p for p in model.parameters()]
    velocity = None
    sched = PlateauState(lr=cfg.lr0, factor=cfg.plateau_factor, patience=cfg.plateau_patience,
                         stop_lr=cfg.stop_lr)
    history = TrainHistory()
    items = [(pid, t) for pid in split.train_ids for t in range(cache.prepared(pid).slices.shape[0])]
    val_x, val_y = _validation_set(cache, split.val_ids, cfg)
    best_val, best_state = math.inf, copy.deepcopy(model.state_dict())
    started = time.monotonic()

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(items))
        if cfg.windows_per_epoch:
            order = order[:cfg.windows_per_epoch]
        model.train()
        running, seen = 0.0, 0
        for b, s in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [items[i] for i in order[s:s + cfg.batch_size]]
            samples = [_training_sample(cache.prepared(pid), t, rng, cfg) for pid, t in batch]
            x = torch.from_numpy(np.stack([p for p, _ in samples]))
            y = torch.from_numpy(np.stack([l for _, l in samples]).astype(np.int64))
            try:
                loss = loss_fn(model.logits(x), y)
                if not torch.isfinite(loss):
                    raise FloatingPointError(f"non-finite loss {loss.item()}")
                model.zero_grad(set_to_none=True)
                loss.backward()
                velocity = sgd_step(params, [p.grad for p in params], velocity, sched.lr,
                                    cfg.momentum, cfg.weight_decay)
            except (FloatingPointError, RuntimeError) as exc:
                raise TrainingError(f"fold {split.fold_index} epoch {epoch} batch {b}: {exc}") from exc
            running += loss.item() * len(batch)
            seen += len(batch)
        train_loss = running / max(seen, 1)
        val_loss = evaluate_loss(model, val_x, val_y, loss_fn, cfg.batch_size)
        lr_used = sched.lr
        history.records.append((epoch, train_loss, val_loss, lr_used))
        if val_loss < best_val:
            best_val, best_state = val_loss, copy.deepcopy(model.state_dict())
            history.best_epoch = epoch
        lr, stop = plateau_update(sched, val_loss)
        if progress:
            progress(epoch, train_loss, val_loss, lr_used)
        log.info("fold %d epoch %d train %.5f val %.5f lr %.1e", split.fold_index, epoch,
                 train_loss, val_loss, lr_used)
        if stop:
            history.stopped_by = "lr"
            break
        if cfg.time_limit_s and time.monotonic() - started > cfg.time_limit_s:
            history.stopped_by = "time"
            break
    else:
        history.stopped_by = "max_epochs"
    history.reductions = list(sched.reductions)
    model.load_state_dict(best_state)
    model.eval()
    return model, history


def predict_patient(model, cache: CohortCache, pid: str, batch_size: int = 1) -> LabelMask:
    prep = cache.prepared(pid)
    pred = predict_prepared(model, prep, batch_size)
    return map_prediction_to_source(pred, prep.crop_box, prep.source_shape)


def cross_validate(dataset: Dataset, out_dir, net_cfg: dict | None = None,
                   train_cfg: TrainConfig | None = None, k: int = 5, val_size: int = 32,
                   fold_seed: int | None = None, progress=None):
    """k-fold protocol: each patient is predicted once, by the model whose test fold holds it.

    Writes ``fold{k}.weights``, ``fold{k}_history.csv``, ``folds.json`` and
    ``predictions/<id>.mask`` under ``out_dir``. Returns ``(predictions, histories, audit)``
    where ``audit`` maps fold index to the ids read while training that fold.
    """
    cfg = train_cfg or TrainConfig()
    out = Path(out_dir)
    (out / "predictions").mkdir(parents=True, exist_ok=True)
    folds = make_folds(dataset.patient_ids, k, val_size, cfg.seed if fold_seed is None else fold_seed)
    (out / "folds.json").write_text(json.dumps(
        [{"fold": f.fold_index, "train": list(f.train_ids), "val": list(f.val_ids),
          "test": list(f.test_ids)} for f in folds], indent=1), encoding="utf-8")
    cache = CohortCache(dataset, cfg.image_size)
    predictions, histories, audit = {}, [], {}
    for split in folds:
        mark = len(cache.access_log)
        model, hist = train_fold(split, cache, net_cfg, cfg,
                                 progress=(lambda *a, f=split.fold_index: progress(f, *a)) if progress else None)
        audit[split.fold_index] = cache.accessed(mark)
        leaked = audit[split.fold_index] & set(split.test_ids)
        if leaked:
            raise TrainingError(f"fold {split.fold_index} read test patients while training: {sorted(leaked)}")
        save_model(model, out / f"fold{split.fold_index}.weights",
                   {"fold": split.fold_index, "image_size": cfg.image_size})
        hist.to_csv(out / f"fold{split.fold_index}_history.csv")
        histories.append(hist)
        for pid in split.test_ids:
            if pid in predictions:
                raise TrainingError(f"patient {pid} predicted twice")
            predictions[pid] = predict_patient(model, cache, pid)
            save_mask(predictions[pid], out / "predictions" / f"{pid}.mask", patient_id=pid)
    return predictions, histories, audit
