"""Training loop, validation, resume and cross-validation ensembles."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from ..autodiff import NonFiniteError, Tensor
from ..inference import EnsembleSpec, SlidingWindowPlan, sliding_window_infer
from ..losses import soft_dice_from_logits
from ..metrics import dice_score
from ..model import ModelConfig, SwinUNETR
from ..volume_io import (
    MASK_CHANNELS,
    AugmentationConfig,
    DatasetManifest,
    augment,
    case_rng,
    normalize_nonzero,
    random_crop,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .optim import AdamW, NonFiniteGradientError
from .schedule import lr_at, warmup_steps

log = logging.getLogger(__name__)

_TUPLE_FIELDS = ("betas", "crop_size", "flip_prob", "intensity_shift", "intensity_scale", "val_roi")


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN or Inf loss."""


@dataclass
class TrainConfig:
    lr_max: float = 8e-4
    total_epochs: int = 800
    warmup_fraction: float = 0.05
    batch_size: int = 1
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-5
    seed: int = 0
    crop_size: tuple = (128, 128, 128)
    flip_prob: tuple = (0.5, 0.5, 0.5)
    intensity_shift: tuple = (-0.1, 0.1)
    intensity_scale: tuple = (0.9, 1.1)
    val_roi: tuple = (128, 128, 128)
    val_overlap: float = 0.7
    val_every: int = 1

    def __post_init__(self):
        for name in _TUPLE_FIELDS:
            setattr(self, name, tuple(getattr(self, name)))
        if self.lr_max <= 0:
            raise ValueError(f"lr_max must be positive, got {self.lr_max}")
        if self.total_epochs < 1:
            raise ValueError(f"total_epochs must be positive, got {self.total_epochs}")
        if self.batch_size != 1:
            raise ValueError("only batch size 1 is supported")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError(f"warmup_fraction must lie in [0, 1), got {self.warmup_fraction}")
        if self.val_every < 1:
            raise ValueError("val_every must be positive")
        self.augmentation()  # validates crop and intensity ranges
        SlidingWindowPlan(self.val_roi, self.val_overlap)

    def augmentation(self) -> AugmentationConfig:
        return AugmentationConfig(self.crop_size, self.flip_prob, self.intensity_shift,
                                  self.intensity_scale, self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in _TUPLE_FIELDS:
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ValueError(f"unknown train config keys: {unknown}")
        return cls(**d)

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        """Desk-scale recipe paired with ``ModelConfig.tiny()``."""
        base = dict(total_epochs=20, crop_size=(32, 32, 32), val_roi=(32, 32, 32), val_overlap=0.5)
        base.update(overrides)
        return cls(**base)


@dataclass
class TrainResult:
    steps: int
    epochs: int
    best_val_dice: float
    best_epoch: int
    train_ids: list
    val_ids: list
    last_path: Path
    best_path: Path
    history: list = field(default_factory=list)


def _prepare(case):
    return normalize_nonzero(case.image), case.mask


def validate(model: SwinUNETR, manifest: DatasetManifest, ids, plan: SlidingWindowPlan) -> dict:
    """Mean per-region Dice of thresholded sliding-window predictions over ``ids``."""
    scores = {n: [] for n in MASK_CHANNELS}
    for cid in ids:
        image, mask = _prepare(manifest.load_case(cid))
        probs = sliding_window_infer(image, model, plan)
        gt = mask.as_channels().astype(bool)
        for i, name in enumerate(MASK_CHANNELS):
            scores[name].append(dice_score(probs[i] > 0.5, gt[i]))
    return {n: float(np.mean(v)) for n, v in scores.items()}


def _split(manifest: DatasetManifest, fold: Optional[int]) -> tuple:
    if fold is None:
        ids = list(manifest.ids)
        return ids, ids
    return manifest.fold_cases(fold)


def train(manifest: DatasetManifest, fold: Optional[int], config: TrainConfig, out_dir,
          model_config: Optional[ModelConfig] = None, resume=None,
          stop_after_epochs: Optional[int] = None) -> TrainResult:
    """Optimize one model on a fold and keep ``best.sckpt`` and ``last.sckpt`` in ``out_dir``.

    ``fold=None`` trains on every case and validates on the same cases.
    Each epoch visits the training cases once in a seeded order, one random
    crop per case; all randomness is keyed by (seed, epoch, case) so resuming
    from ``last.sckpt`` reproduces an uninterrupted run bit-exactly.
    ``stop_after_epochs`` ends the run early without changing the schedule.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_ids, val_ids = _split(manifest, fold)
    total = config.total_epochs * len(train_ids)
    warmup_steps(total, config.warmup_fraction)
    plan = SlidingWindowPlan(config.val_roi, config.val_overlap)
    aug = config.augmentation()
    log_path, last_path, best_path = out / "metrics.jsonl", out / "last.sckpt", out / "best.sckpt"

    start_epoch, step, best, best_epoch, history = 0, 0, -1.0, -1, []
    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.train_config != config.to_dict():
            raise ValueError(f"{resume}: checkpoint was written with a different train config")
        model = ck.model
        optimizer = AdamW(model.parameters(), config.betas, config.eps, config.weight_decay)
        optimizer.load_state(ck.optimizer_state)
        step = ck.step
        start_epoch = int(ck.state["next_epoch"])
        best, best_epoch = float(ck.state["best_val_dice"]), int(ck.state["best_epoch"])
        if log_path.exists():
            history = [json.loads(line) for line in log_path.read_text().splitlines() if line.strip()]
            history = [h for h in history if h["epoch"] < start_epoch]
    else:
        model = SwinUNETR(model_config or ModelConfig.tiny())
        optimizer = AdamW(model.parameters(), config.betas, config.eps, config.weight_decay)
    _write_log(log_path, history)

    end_epoch = config.total_epochs if stop_after_epochs is None else min(stop_after_epochs, config.total_epochs)
    for epoch in range(start_epoch, end_epoch):
        order = [train_ids[i] for i in np.random.default_rng([config.seed, epoch]).permutation(len(train_ids))]
        losses, lr = [], 0.0
        for cid in order:
            rng = case_rng(config.seed, cid, epoch)
            image, mask = _prepare(manifest.load_case(cid))
            image, mask = augment(*random_crop(image, mask, aug.crop_size, rng), aug, rng)
            target = mask.as_channels()[None].astype(model.config.np_dtype)
            x = Tensor(image.data[None].astype(model.config.np_dtype))
            model.zero_grad()
            try:
                loss = soft_dice_from_logits(model(x), target)
                value = loss.item()
                if not np.isfinite(value):
                    raise NonFiniteLossError(f"loss is {value}")
                loss.backward()
            except NonFiniteError as exc:
                raise NonFiniteLossError(f"non-finite value on case {cid} at step {step}: {exc}") from exc
            except NonFiniteLossError as exc:
                raise NonFiniteLossError(f"non-finite loss on case {cid} at step {step}: {exc}") from exc
            lr = lr_at(step, total, config.lr_max, config.warmup_fraction)
            try:
                optimizer.step(lr)
            except NonFiniteGradientError as exc:
                raise NonFiniteGradientError(f"{exc} (case {cid}, step {step})") from exc
            losses.append(value)
            step += 1
            del loss, x
        record = {"epoch": epoch, "step": step, "mean_train_loss": float(np.mean(losses)), "lr": lr,
                  "val_dice": None, "val_mean_dice": None}
        if (epoch + 1) % config.val_every == 0 or epoch + 1 == config.total_epochs:
            dice = validate(model, manifest, val_ids, plan)
            mean = float(np.mean([dice[n] for n in MASK_CHANNELS]))
            record["val_dice"], record["val_mean_dice"] = dice, mean
            if mean > best:
                best, best_epoch = mean, epoch
                save_checkpoint(best_path, model, optimizer, step, config,
                                _state(epoch + 1, best, best_epoch, fold))
        history.append(record)
        _write_log(log_path, history)
        save_checkpoint(last_path, model, optimizer, step, config, _state(epoch + 1, best, best_epoch, fold))
        log.info("epoch %d step %d loss %.4f val %s", epoch, step, record["mean_train_loss"], record["val_dice"])
    return TrainResult(step, len(history), best, best_epoch, train_ids, val_ids, last_path, best_path, history)


def _state(next_epoch, best, best_epoch, fold) -> dict:
    # data order and augmentation draws are keyed by (seed, epoch, case), so the
    # next epoch index is the whole random-stream state
    return {"next_epoch": next_epoch, "best_val_dice": best, "best_epoch": best_epoch, "fold": fold,
            "rng": "numpy SeedSequence keyed by (seed, epoch, case)"}


def _write_log(path: Path, history: list) -> None:
    path.write_text("".join(json.dumps(h, sort_keys=True) + "\n" for h in history))


def run_cross_validation(manifest: DatasetManifest, config: TrainConfig, out_dir, runs: int = 2,
                         model_config: Optional[ModelConfig] = None) -> EnsembleSpec:
    """Train every fold for ``runs`` seeds and collect the best checkpoints.

    Run ``r`` uses seed ``config.seed + r`` for both initialization and data
    order; member provenance is written to ``ensemble.json``.
    """
    if not manifest.folds:
        raise ValueError("manifest has no fold assignments")
    out = Path(out_dir)
    folds = sorted(set(manifest.folds.values()))
    base_model = model_config or ModelConfig.tiny()
    members = []
    for r in range(runs):
        seed = config.seed + r
        run_cfg = TrainConfig.from_dict({**config.to_dict(), "seed": seed})
        mcfg = ModelConfig.from_dict({**base_model.to_dict(), "seed": seed})
        for f in folds:
            try:
                res = train(manifest, f, run_cfg, out / f"run{r}" / f"fold{f}", model_config=mcfg)
            except Exception as exc:
                raise type(exc)(f"ensemble member fold {f}, seed {seed} failed: {exc}") from exc
            members.append({"path": str(res.best_path), "fold": f, "seed": seed,
                            "best_val_dice": res.best_val_dice, "best_epoch": res.best_epoch})
    spec = EnsembleSpec([m["path"] for m in members])
    (out / "ensemble.json").write_text(json.dumps({"paths": spec.paths, "members": members}, indent=2) + "\n")
    return spec
