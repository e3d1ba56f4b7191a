"""Training loops for the three pipeline stages.

Stage 1 (localizer) trains with the plain Dice loss and switches to the
sqrt-transformed variant for the last `l2_finetune_epochs` epochs to push
sensitivity up. Stages 2-3 train per-organ nets and the dual-decoder target
net with truth-centroid VOIs. Everything is reproducible from (config,
seed, dataset): weight init, shuffling, augmentation, and DropBlock draws
all derive from the master seed.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import losses, nets
from .disttf import distance_target, normalize_distance
from .phantom import PhantomCase
from .preprocess import AheParams, AugmentParams, ahe, augment, balance_slices, centroid
from .rng import Rng
from .volcore import LOCALIZER_CHANNELS, Spacing, StructureId, Voi, Volume, clamp_voi, crop

_UNIT_SPACING = Spacing(1.0, 1.0, 1.0)  # augmentation is index-space, spacing-agnostic


@dataclass
class TrainConfig:
    epochs: int = 80  # 50 is the localizer default (see localizer_default)
    l2_finetune_epochs: int = 10
    batch_size: int = 2
    localizer_batch_size: int = 16
    learning_rate: float = 1e-3
    lr_decay_points: tuple[float, float] = (0.6, 0.85)
    lr_decay_factor: float = 0.5
    master_seed: int = 0
    augment: AugmentParams = field(default_factory=AugmentParams)
    ahe: AheParams = field(default_factory=AheParams)
    keep_prob_unlabeled: float = 0.3
    dropblock: nets.DropBlockConfig = field(default_factory=nets.DropBlockConfig)
    train_time_dropblock: bool = True
    checkpoint_epochs: tuple[int, ...] = ()  # extra snapshots, e.g. for degradation studies

    @classmethod
    def localizer_default(cls, **overrides) -> "TrainConfig":
        return replace(cls(epochs=50), **overrides)

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "l2_finetune_epochs": self.l2_finetune_epochs,
            "batch_size": self.batch_size,
            "localizer_batch_size": self.localizer_batch_size,
            "learning_rate": self.learning_rate,
            "lr_decay_points": list(self.lr_decay_points),
            "lr_decay_factor": self.lr_decay_factor,
            "master_seed": self.master_seed,
            "keep_prob_unlabeled": self.keep_prob_unlabeled,
        }


@dataclass
class TrainReport:
    tag: str
    epoch_loss: list[float]
    epoch_val_dsc: list[float]
    epoch_loss_fn: list[str]
    best_epoch: int
    best_val_dsc: float
    checkpoint: str
    wall_clock_s: float
    extra: dict = field(default_factory=dict)

    def save(self, out_dir: str | Path):
        out_dir = Path(out_dir)
        doc = {
            "tag": self.tag,
            "best_epoch": self.best_epoch,
            "best_val_dsc": self.best_val_dsc,
            "checkpoint": self.checkpoint,
            "wall_clock_s": self.wall_clock_s,
            "extra": self.extra,
        }
        (out_dir / f"{self.tag}_report.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
        with open(out_dir / f"{self.tag}_epochs.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "val_dsc", "loss_fn"])
            for i, (l, d, f) in enumerate(zip(self.epoch_loss, self.epoch_val_dsc, self.epoch_loss_fn), 1):
                w.writerow([i, f"{l:.6f}", f"{d:.6f}", f])


VARIANTS = {
    "AG-MTN": (True, True),
    "MTN": (False, True),
    "AG-UNet": (True, False),
    "UNet": (False, False),
}


# --- dataset preparation -----------------------------------------------------


def voi_around(center: tuple[float, ...], size: tuple[int, int, int], shape: tuple[int, int, int]) -> Voi:
    origin = tuple(int(round(c - s / 2.0)) for c, s in zip(center, size))
    return clamp_voi(Voi(origin, tuple(size)), shape)


def downsample_slice(img: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean in-plane downsampling; grid dims must divide by factor."""
    nx, ny = img.shape
    return img.reshape(nx // factor, factor, ny // factor, factor).mean(axis=(1, 3))


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    nx, ny = mask.shape
    return mask.reshape(nx // factor, factor, ny // factor, factor).any(axis=(1, 3))


def localizer_labels(case: PhantomCase) -> list[np.ndarray]:
    """Five channels; both femoral heads merge into one."""
    out = []
    for ch in LOCALIZER_CHANNELS:
        if ch == "femoral_heads":
            m = case.truth.mask(StructureId.FemoralHeadL) | case.truth.mask(StructureId.FemoralHeadR)
        else:
            m = case.truth.mask(ch)
        out.append(m)
    return out


def build_localizer_slices(cases: list[PhantomCase], downsample: int = 2) -> list[tuple]:
    """(image, 5-channel label, has_label) per axial slice, normalized to [0,1]."""
    slices = []
    for case in cases:
        data = case.ct.data.astype(np.float64)
        lo, hi = data.min(), data.max()
        norm = (data - lo) / (hi - lo) if hi > lo else np.zeros_like(data)
        labels = localizer_labels(case)
        for k in range(case.ct.shape[2]):
            img = downsample_slice(norm[:, :, k], downsample).astype(np.float32)
            lab = np.stack([downsample_mask(m[:, :, k], downsample) for m in labels]).astype(np.float32)
            slices.append((img, lab, bool(lab.any())))
    return slices


@dataclass
class OrganSample:
    case_id: str
    image: np.ndarray  # equalized VOI intensities in [0,1]
    mask: np.ndarray


def build_organ_vois(
    cases: list[PhantomCase],
    structure: StructureId,
    voi_size: tuple[int, int, int],
    ahe_params: AheParams | None = None,
) -> list[OrganSample]:
    """Truth-centroid VOIs with per-VOI adaptive equalization."""
    samples = []
    for case in cases:
        mask = case.truth.mask(structure)
        voi = voi_around(centroid(mask), voi_size, case.ct.shape)
        img = ahe(crop(case.ct, voi), ahe_params)
        m = crop(Volume(mask.astype(np.float32), case.ct.spacing), voi).data > 0.5
        samples.append(OrganSample(case.case_id, img.data, m))
    return samples


@dataclass
class CtvSample:
    case_id: str
    image: np.ndarray
    bladder: np.ndarray
    rectum: np.ndarray
    mask: np.ndarray


def build_ctv_vois(
    cases: list[PhantomCase],
    voi_size: tuple[int, int, int],
    ahe_params: AheParams | None = None,
    organ_masks: dict[str, dict[StructureId, np.ndarray]] | None = None,
) -> list[CtvSample]:
    """Target VOIs plus neighboring-organ masks for the guided channels.
    `organ_masks` (case_id -> masks) substitutes predicted organs for truth;
    truth is the training default, predictions are the inference reality."""
    samples = []
    for case in cases:
        tmask = case.truth.mask(StructureId.CTV)
        voi = voi_around(centroid(tmask), voi_size, case.ct.shape)
        img = ahe(crop(case.ct, voi), ahe_params)
        source = organ_masks[case.case_id] if organ_masks else case.truth.masks
        bl = crop(Volume(source[StructureId.Bladder].astype(np.float32), case.ct.spacing), voi).data > 0.5
        re = crop(Volume(source[StructureId.Rectum].astype(np.float32), case.ct.spacing), voi).data > 0.5
        m = crop(Volume(tmask.astype(np.float32), case.ct.spacing), voi).data > 0.5
        samples.append(CtvSample(case.case_id, img.data, bl, re, m))
    return samples


def ctv_input_channels(image: np.ndarray, bladder: np.ndarray, rectum: np.ndarray, anatomy_guided: bool) -> np.ndarray:
    """Guided input: VOI intensities plus organ masks filled with those same
    intensities (zero elsewhere)."""
    if not anatomy_guided:
        return image[None]
    return np.stack([image, image * bladder, image * rectum]).astype(np.float32)


# --- shared loop machinery -----------------------------------------------------


def _milestones(epochs: int, points: tuple[float, float]) -> list[int]:
    ms = sorted({max(1, int(epochs * p)) for p in points})
    return [m for m in ms if m < epochs]


def _recall(pred: np.ndarray, truth: np.ndarray) -> float:
    truth = truth > 0.5
    if not truth.any():
        return 1.0
    return float(((pred > 0.5) & truth).sum() / truth.sum())


def _dice_bin(pred: np.ndarray, truth: np.ndarray) -> float:
    p = pred > 0.5
    t = truth > 0.5
    s = p.sum() + t.sum()
    if s == 0:
        return 1.0
    return float(2.0 * (p & t).sum() / s)


class _Loop:
    """Owns the optimizer/scheduler/seeding boilerplate shared by all stages."""

    def __init__(self, model, cfg: TrainConfig, tag: str, out_dir: Path):
        self.model = model
        self.cfg = cfg
        self.tag = tag
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        self.sched = torch.optim.lr_scheduler.MultiStepLR(
            self.opt, milestones=_milestones(cfg.epochs, cfg.lr_decay_points), gamma=cfg.lr_decay_factor
        )
        self.rng = Rng(cfg.master_seed).derive("train", tag)
        self.best = (-1.0, None, 0)  # (val_dsc, state_dict, epoch)
        self.epoch_loss: list[float] = []
        self.epoch_val: list[float] = []
        self.epoch_fn: list[str] = []
        self.t0 = time.time()
        self.step_counter = 0

    def train_batches(self, batches, loss_fn):
        self.model.train()
        total, nb = 0.0, 0
        for inputs, targets in batches:
            if self.cfg.train_time_dropblock:
                nets.set_stochastic(self.model, True, self.rng.derive("drop", self.step_counter).key % (2**31))
            else:
                nets.set_stochastic(self.model, False)
            self.step_counter += 1
            self.opt.zero_grad()
            loss = loss_fn(self.model(inputs), targets)
            loss.backward()
            self.opt.step()
            total += float(loss.detach())
            nb += 1
        return total / max(nb, 1)

    def end_epoch(self, epoch, mean_loss, val_dsc, fn_name):
        self.sched.step()
        self.epoch_loss.append(mean_loss)
        self.epoch_val.append(val_dsc)
        self.epoch_fn.append(fn_name)
        if val_dsc > self.best[0]:
            self.best = (val_dsc, {k: v.clone() for k, v in self.model.state_dict().items()}, epoch)
        if epoch in self.cfg.checkpoint_epochs:
            nets.save_checkpoint(
                self.model, self.out_dir / f"{self.tag}_epoch{epoch:03d}.pt",
                epoch=epoch, train_seed=self.cfg.master_seed, snapshot=True,
            )

    def finish(self, extra: dict | None = None) -> tuple[Path, TrainReport]:
        val_dsc, state, epoch = self.best
        if state is not None:
            self.model.load_state_dict(state)
        path = self.out_dir / f"{self.tag}.pt"
        nets.save_checkpoint(
            self.model, path, epoch=epoch, train_seed=self.cfg.master_seed,
            val_dsc=val_dsc, train_config=self.cfg.to_dict(),
        )
        report = TrainReport(
            tag=self.tag,
            epoch_loss=self.epoch_loss,
            epoch_val_dsc=self.epoch_val,
            epoch_loss_fn=self.epoch_fn,
            best_epoch=epoch,
            best_val_dsc=val_dsc,
            checkpoint=str(path),
            wall_clock_s=time.time() - self.t0,
            extra=extra or {},
        )
        report.save(self.out_dir)
        return path, report


def _seed_torch(cfg: TrainConfig, tag: str):
    torch.manual_seed(Rng(cfg.master_seed).derive("init", tag).key % (2**63 - 1))


def _batched(items: list, size: int):
    for i in range(0, len(items), size):
        yield items[i : i + size]


# --- stage 1: localizer ----------------------------------------------------------


def _localizer_channel_loss(pred: torch.Tensor, target: torch.Tensor, fn: str) -> torch.Tensor:
    total = None
    for c in range(pred.shape[1]):
        if fn == "L1":
            term = losses.dice_loss_t(pred[:, c], target[:, c])
        else:
            term = losses.sqrt_dice_loss_t(pred[:, c], target[:, c])
        total = term if total is None else total + term
    return total


def _localizer_val(model, val_slices) -> tuple[float, float]:
    """(mean per-channel dice, mean per-channel recall) over stacked slices."""
    model.eval()
    nets.set_stochastic(model, False)
    preds, labs = [], []
    with torch.no_grad():
        for chunk in _batched(val_slices, 32):
            x = torch.from_numpy(np.stack([s[0] for s in chunk])).unsqueeze(1)
            preds.append(model(x).numpy())
            labs.append(np.stack([s[1] for s in chunk]))
    pred = np.concatenate(preds)
    lab = np.concatenate(labs)
    dices = [_dice_bin(pred[:, c], lab[:, c]) for c in range(pred.shape[1])]
    recalls = [_recall(pred[:, c], lab[:, c]) for c in range(pred.shape[1]) if lab[:, c].any()]
    return float(np.mean(dices)), float(np.mean(recalls))


def train_localizer(dataset: dict, cfg: TrainConfig, out_dir: str | Path) -> tuple[Path, TrainReport]:
    """dataset: {"train": [(img, label5, has_label)], "val": [...]}."""
    if not dataset.get("train"):
        raise ValueError("empty training dataset")
    if cfg.l2_finetune_epochs > cfg.epochs:
        raise ValueError("l2_finetune_epochs exceeds total epochs")
    _seed_torch(cfg, "localizer")
    model = nets.build_localizer(cfg.dropblock)
    loop = _Loop(model, cfg, "localizer", Path(out_dir))
    l1_sensitivity = None

    for epoch in range(1, cfg.epochs + 1):
        fn = "L1" if epoch <= cfg.epochs - cfg.l2_finetune_epochs else "L2"
        erng = loop.rng.derive("epoch", epoch)
        kept = []
        for img, lab, has_label in balance_slices(dataset["train"], cfg.keep_prob_unlabeled, erng.derive("balance")):
            if has_label:
                vol, masks = augment(
                    Volume(img[:, :, None], _UNIT_SPACING), [m[:, :, None] for m in lab],
                    cfg.augment, erng.derive("aug", len(kept)),
                )
                img = vol.data[:, :, 0]
                lab = np.stack([m[:, :, 0] for m in masks]).astype(np.float32)
            kept.append((img.astype(np.float32), lab))
        order = erng.derive("shuffle").shuffled(list(range(len(kept))))
        batches = []
        for chunk in _batched(order, cfg.localizer_batch_size):
            x = torch.from_numpy(np.stack([kept[i][0] for i in chunk])).unsqueeze(1)
            y = torch.from_numpy(np.stack([kept[i][1] for i in chunk]))
            batches.append((x, y))
        mean_loss = loop.train_batches(batches, lambda p, t, fn=fn: _localizer_channel_loss(p, t, fn))
        val_dsc, val_recall = _localizer_val(model, dataset["val"])
        loop.end_epoch(epoch, mean_loss, val_dsc, fn)
        if epoch == cfg.epochs - cfg.l2_finetune_epochs:
            l1_sensitivity = val_recall
            nets.save_checkpoint(
                model, loop.out_dir / "localizer_l1_phase.pt",
                epoch=epoch, train_seed=cfg.master_seed, phase="L1",
            )

    _, final_recall = _localizer_val(model, dataset["val"])
    return loop.finish({"sensitivity_l1_phase": l1_sensitivity, "sensitivity_final": final_recall})


# --- stage 2: per-organ nets ----------------------------------------------------


def _augment_sample(image: np.ndarray, masks: list[np.ndarray], cfg: TrainConfig, rng: Rng):
    vol, out = augment(Volume(image, _UNIT_SPACING), masks, cfg.augment, rng)
    return vol.data, out


def train_organ(
    structure: StructureId, dataset: dict, cfg: TrainConfig, out_dir: str | Path
) -> tuple[Path, TrainReport]:
    """dataset: {"train": [OrganSample], "val": [OrganSample]}."""
    if not dataset.get("train"):
        raise ValueError("empty training dataset")
    tag = structure.value
    _seed_torch(cfg, tag)
    model = nets.build_organ_net(structure, cfg.dropblock)
    loop = _Loop(model, cfg, tag, Path(out_dir))

    val_x = torch.from_numpy(np.stack([s.image for s in dataset["val"]])).unsqueeze(1)
    val_y = np.stack([s.mask for s in dataset["val"]])

    for epoch in range(1, cfg.epochs + 1):
        erng = loop.rng.derive("epoch", epoch)
        samples = []
        for i, s in enumerate(erng.derive("shuffle").shuffled(dataset["train"])):
            img, (mask,) = _augment_sample(s.image, [s.mask], cfg, erng.derive("aug", i))
            samples.append((img, mask))
        batches = []
        for chunk in _batched(samples, cfg.batch_size):
            x = torch.from_numpy(np.stack([c[0] for c in chunk])).unsqueeze(1)
            y = torch.from_numpy(np.stack([c[1] for c in chunk]).astype(np.float32)).unsqueeze(1)
            batches.append((x, y))
        mean_loss = loop.train_batches(batches, lambda p, t: losses.dice_loss_t(p, t))

        model.eval()
        nets.set_stochastic(model, False)
        with torch.no_grad():
            pv = model(val_x).numpy()[:, 0]
        val_dsc = float(np.mean([_dice_bin(pv[i], val_y[i]) for i in range(len(val_y))]))
        loop.end_epoch(epoch, mean_loss, val_dsc, "L1")

    return loop.finish()


# --- stage 3: target net ---------------------------------------------------------


def train_ctv(dataset: dict, variant: str, cfg: TrainConfig, out_dir: str | Path) -> tuple[Path, TrainReport]:
    """dataset: {"train": [CtvSample], "val": [CtvSample]}; variant is one of
    AG-MTN | MTN | AG-UNet | UNet."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if not dataset.get("train"):
        raise ValueError("empty training dataset")
    anatomy_guided, multi_task = VARIANTS[variant]
    tag = f"ctv_{variant.lower().replace('-', '_')}"
    _seed_torch(cfg, tag)
    model = nets.build_agmtn(anatomy_guided, multi_task, cfg.dropblock)
    loop = _Loop(model, cfg, tag, Path(out_dir))

    spacing = dataset.get("spacing") or Spacing()
    diag = spacing.diag_mm(dataset["train"][0].image.shape)
    val_x = torch.from_numpy(
        np.stack([ctv_input_channels(s.image, s.bladder, s.rectum, anatomy_guided) for s in dataset["val"]])
    )
    val_y = np.stack([s.mask for s in dataset["val"]])

    def loss_fn(outputs: nets.AgmtnOutputs, targets):
        y, w, d = targets
        return losses.composite_ctv_loss_t(
            outputs.main_seg, outputs.aux_seg_1, outputs.aux_seg_2,
            outputs.dist if multi_task else None, y, d if multi_task else None, w,
        )

    for epoch in range(1, cfg.epochs + 1):
        erng = loop.rng.derive("epoch", epoch)
        prepared = []
        for i, s in enumerate(erng.derive("shuffle").shuffled(dataset["train"])):
            img, (mask, bl, re) = _augment_sample(s.image, [s.mask, s.bladder, s.rectum], cfg, erng.derive("aug", i))
            x = ctv_input_channels(img, bl, re, anatomy_guided)
            w = losses.boundary_weight_map(mask).astype(np.float32)
            if multi_task and mask.any():
                dist = normalize_distance(distance_target(mask, spacing), diag).astype(np.float32)
            else:
                dist = np.zeros_like(img, dtype=np.float32)
            prepared.append((x, mask.astype(np.float32), w, dist))
        batches = []
        for chunk in _batched(prepared, cfg.batch_size):
            x = torch.from_numpy(np.stack([c[0] for c in chunk]))
            y = torch.from_numpy(np.stack([c[1] for c in chunk])).unsqueeze(1)
            w = torch.from_numpy(np.stack([c[2] for c in chunk])).unsqueeze(1)
            d = torch.from_numpy(np.stack([c[3] for c in chunk])).unsqueeze(1)
            batches.append((x, (y, w, d)))
        mean_loss = loop.train_batches(batches, loss_fn)

        model.eval()
        nets.set_stochastic(model, False)
        with torch.no_grad():
            outs = []
            for chunk in _batched(list(range(len(val_y))), cfg.batch_size):
                outs.append(model(val_x[chunk]).main_seg.numpy()[:, 0])
        pv = np.concatenate(outs)
        val_dsc = float(np.mean([_dice_bin(pv[i], val_y[i]) for i in range(len(val_y))]))
        loop.end_epoch(epoch, mean_loss, val_dsc, "composite")

    return loop.finish({"variant": variant})


