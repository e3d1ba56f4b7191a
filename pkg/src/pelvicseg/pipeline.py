"""End-to-end orchestration: localize, segment organs, segment the target
with anatomy guidance, estimate uncertainty, evaluate, and render overlays.

Stages are isolated: stage 2 consumes only centroids from stage 1, stage 3
consumes the target VOI plus the stage-2 bladder/rectum masks.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import metrics, nets, trainer, uncertainty
from .phantom import PhantomCase
from .preprocess import AheParams, EmptyMaskError, ahe, centroid
from .rng import Rng
from .volcore import (
    LOCALIZER_CHANNELS,
    OARS,
    Spacing,
    StructureId,
    StructureSet,
    Voi,
    Volume,
    clamp_voi,
    crop,
    paste,
    read_mivol,
    split_bilateral,
    write_mivol,
)

log = logging.getLogger("pelvicseg")

DEFAULT_VOI_SIZES: dict[StructureId, tuple[int, int, int]] = {
    StructureId.Bladder: (64, 64, 64),
    StructureId.Rectum: (48, 48, 48),
    StructureId.FemoralHeadL: (48, 48, 48),
    StructureId.FemoralHeadR: (48, 48, 48),
    StructureId.PenileBulb: (32, 32, 32),
    StructureId.CTV: (64, 64, 48),
}


@dataclass
class PipelineConfig:
    voi_sizes: dict = field(default_factory=lambda: dict(DEFAULT_VOI_SIZES))
    localizer_downsample: int = 2
    mcdo_t: int = 50
    mcdo_oars: bool = False
    mcdo_seed: int = 0
    threshold: float = 0.5
    ahe: AheParams = field(default_factory=AheParams)


@dataclass
class CaseResult:
    case_id: str
    pred: StructureSet
    summaries: dict[StructureId, uncertainty.UncertaintySummary]
    quality: dict[StructureId, float | None]
    vois: dict[StructureId, Voi]
    warnings: list[str]
    timings: dict[str, float]


# --- dataset persistence ------------------------------------------------------


def save_case(case: PhantomCase, directory: str | Path):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_mivol(case.ct, directory / "ct.mivol")
    case.truth.save(directory / "truth")
    (directory / "meta.json").write_text(json.dumps(case.meta, indent=1, sort_keys=True))


def load_case(directory: str | Path) -> PhantomCase:
    directory = Path(directory)
    ct = read_mivol(directory / "ct.mivol")
    truth = StructureSet.load(directory / "truth")
    meta = json.loads((directory / "meta.json").read_text())
    return PhantomCase(directory.name, ct, truth, meta)


def save_dataset(splits: dict[str, list[PhantomCase]], out_dir: str | Path, base_seed: int):
    out_dir = Path(out_dir)
    (out_dir / "cases").mkdir(parents=True, exist_ok=True)
    index = {"base_seed": base_seed, "splits": {}}
    for name, cases in splits.items():
        index["splits"][name] = []
        for case in cases:
            save_case(case, out_dir / "cases" / case.case_id)
            index["splits"][name].append(case.case_id)
    (out_dir / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))


def load_dataset(data_dir: str | Path) -> dict[str, list[PhantomCase]]:
    data_dir = Path(data_dir)
    index = json.loads((data_dir / "index.json").read_text())
    return {
        name: [load_case(data_dir / "cases" / cid) for cid in ids]
        for name, ids in index["splits"].items()
    }


# --- stage 1: localization -----------------------------------------------------


def localize(ct: Volume, localizer, cfg: PipelineConfig) -> tuple[dict, list[str]]:
    """Coarse masks -> full-resolution centroids per structure. Empty coarse
    masks fall back to the grid center with a recorded warning."""
    f = cfg.localizer_downsample
    data = ct.data.astype(np.float64)
    lo, hi = data.min(), data.max()
    norm = (data - lo) / (hi - lo) if hi > lo else np.zeros_like(data)
    slices = np.stack(
        [trainer.downsample_slice(norm[:, :, k], f) for k in range(ct.shape[2])]
    ).astype(np.float32)
    nets.set_stochastic(localizer, False)
    localizer.eval()
    with torch.no_grad():
        probs = []
        for i in range(0, len(slices), 32):
            x = torch.from_numpy(slices[i : i + 32]).unsqueeze(1)
            probs.append(localizer(x).numpy())
    prob = np.concatenate(probs)  # (nz, 5, nxd, nyd)
    coarse = {ch: np.moveaxis(prob[:, c] >= cfg.threshold, 0, -1) for c, ch in enumerate(LOCALIZER_CHANNELS)}

    warnings = []
    centroids: dict[StructureId, tuple[float, float, float]] = {}

    def to_full(c):
        return (c[0] * f + (f - 1) / 2.0, c[1] * f + (f - 1) / 2.0, c[2])

    def center_fallback(sid):
        warnings.append(f"empty coarse mask for {sid.value}; using grid center")
        return tuple((n - 1) / 2.0 for n in ct.shape)

    for ch, mask in coarse.items():
        if ch == "femoral_heads":
            mask, dropped = _keep_largest_components(mask, 2)
            if dropped:
                warnings.append(f"femoral coarse mask had {dropped} extra components; kept the two largest")
            left, right = split_bilateral(mask)
            for sid, m in ((StructureId.FemoralHeadL, left), (StructureId.FemoralHeadR, right)):
                try:
                    centroids[sid] = to_full(centroid(m))
                except EmptyMaskError:
                    centroids[sid] = center_fallback(sid)
        else:
            try:
                centroids[ch] = to_full(centroid(mask))
            except EmptyMaskError:
                centroids[ch] = center_fallback(ch)
    return centroids, warnings


def _keep_largest_components(mask: np.ndarray, k: int) -> tuple[np.ndarray, int]:
    """Coarse predictions can be speckled; only the k largest components are
    trusted for centroid extraction."""
    from scipy import ndimage

    labels, n = ndimage.label(mask, structure=ndimage.generate_binary_structure(3, 1))
    if n <= k:
        return mask, 0
    sizes = np.bincount(labels.ravel())[1:]
    keep = np.argsort(sizes)[::-1][:k] + 1
    return np.isin(labels, keep), n - k


# --- full inference --------------------------------------------------------------


def _paste_voi_grid(full_shape, spacing, voi: Voi, values: np.ndarray) -> np.ndarray:
    """Place VOI-grid values back on the full grid (zeros elsewhere); padded
    VOI tails beyond the grid are dropped."""
    eff = clamp_voi(voi, full_shape)
    base = Volume(np.zeros(full_shape, dtype=np.float32), spacing)
    src = Volume(np.ascontiguousarray(values[: eff.size[0], : eff.size[1], : eff.size[2]], dtype=np.float32), spacing)
    return paste(base, src, eff.origin).data


def infer(ct: Volume, checkpoints: dict, cfg: PipelineConfig | None = None, case_id: str = "case") -> CaseResult:
    """checkpoints: mapping of 'localizer', every organ value, and 'ctv' to
    checkpoint paths (or preloaded models)."""
    cfg = cfg or PipelineConfig()
    timings: dict[str, float] = {}

    def load(key):
        entry = checkpoints[key]
        if isinstance(entry, (str, Path)):
            model, _ = nets.load_checkpoint(entry)
            return model
        return entry

    t0 = time.time()
    centroids, warnings = localize(ct, load("localizer"), cfg)
    timings["localize"] = time.time() - t0
    log.info("stage=localize case=%s elapsed=%.2fs warnings=%d", case_id, timings["localize"], len(warnings))

    pred = StructureSet(ct.shape, ct.spacing)
    summaries: dict[StructureId, uncertainty.UncertaintySummary] = {}
    quality: dict[StructureId, float | None] = {}
    vois: dict[StructureId, Voi] = {}

    t0 = time.time()
    for sid in OARS:
        voi = trainer.voi_around(centroids[sid], cfg.voi_sizes[sid], ct.shape)
        vois[sid] = voi
        inp = ahe(crop(ct, voi), cfg.ahe).data
        model = load(sid.value)
        prob = nets.forward(model, inp)
        pred.set_mask(sid, _paste_voi_grid(ct.shape, ct.spacing, voi, prob) >= cfg.threshold)
        if cfg.mcdo_oars and cfg.mcdo_t >= 2:
            stack = uncertainty.mcdo_sample(model, inp, cfg.mcdo_t, Rng(cfg.mcdo_seed).derive(case_id, sid.value).key)
            summ = uncertainty.summarize(stack)
            summaries[sid] = _summary_to_full(summ, ct, voi)
            quality[sid] = uncertainty.contour_quality(stack)
    timings["organs"] = time.time() - t0
    log.info("stage=organs case=%s elapsed=%.2fs", case_id, timings["organs"])

    t0 = time.time()
    sid = StructureId.CTV
    voi = trainer.voi_around(centroids[sid], cfg.voi_sizes[sid], ct.shape)
    vois[sid] = voi
    img = ahe(crop(ct, voi), cfg.ahe).data
    bl = crop(Volume(pred.mask(StructureId.Bladder).astype(np.float32), ct.spacing), voi).data > 0.5
    re = crop(Volume(pred.mask(StructureId.Rectum).astype(np.float32), ct.spacing), voi).data > 0.5
    model = load("ctv")
    inp = trainer.ctv_input_channels(img, bl, re, getattr(model, "anatomy_guided", True))
    out = nets.forward(model, inp)
    main = out.main_seg if isinstance(out, nets.AgmtnOutputs) else out
    pred.set_mask(sid, _paste_voi_grid(ct.shape, ct.spacing, voi, main) >= cfg.threshold)
    if cfg.mcdo_t >= 2:
        stack = uncertainty.mcdo_sample(model, inp, cfg.mcdo_t, Rng(cfg.mcdo_seed).derive(case_id, "ctv").key)
        summ = uncertainty.summarize(stack)
        summaries[sid] = _summary_to_full(summ, ct, voi)
        quality[sid] = uncertainty.contour_quality(stack)
    timings["ctv"] = time.time() - t0
    log.info("stage=ctv case=%s elapsed=%.2fs", case_id, timings["ctv"])

    return CaseResult(case_id, pred, summaries, quality, vois, warnings, timings)


def _summary_to_full(s: uncertainty.UncertaintySummary, ct: Volume, voi: Voi) -> uncertainty.UncertaintySummary:
    def back(values):
        return _paste_voi_grid(ct.shape, ct.spacing, voi, values)

    return uncertainty.UncertaintySummary(
        mean=back(s.mean),
        var=back(s.var),
        lower=back(s.lower),
        upper=back(s.upper),
        mean_contour=back(s.mean_contour.astype(np.float32)) >= 0.5,
        band=back(s.band.astype(np.float32)) >= 0.5,
    )


def save_result(result: CaseResult, out_dir: str | Path):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result.pred.save(out_dir / "pred")
    unc_dir = out_dir / "uncertainty"
    unc_dir.mkdir(exist_ok=True)
    for sid, s in result.summaries.items():
        sp = result.pred.spacing
        write_mivol(Volume(s.mean.astype(np.float32), sp), unc_dir / f"{sid.value}_mean.mivol")
        write_mivol(Volume(s.var.astype(np.float32), sp), unc_dir / f"{sid.value}_var.mivol")
        write_mivol(Volume(s.band.astype(np.float32), sp), unc_dir / f"{sid.value}_band.mivol")
    doc = {
        "case_id": result.case_id,
        "quality": {sid.value: q for sid, q in result.quality.items()},
        "vois": {sid.value: {"origin": list(v.origin), "size": list(v.size)} for sid, v in result.vois.items()},
        "warnings": result.warnings,
        "timings": result.timings,
    }
    (out_dir / "result.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_result(out_dir: str | Path) -> CaseResult:
    out_dir = Path(out_dir)
    pred = StructureSet.load(out_dir / "pred")
    doc = json.loads((out_dir / "result.json").read_text())
    summaries = {}
    unc_dir = out_dir / "uncertainty"
    for sid in StructureId:
        mean_path = unc_dir / f"{sid.value}_mean.mivol"
        if mean_path.exists():
            mean = read_mivol(mean_path).data
            var = read_mivol(unc_dir / f"{sid.value}_var.mivol").data
            band = read_mivol(unc_dir / f"{sid.value}_band.mivol").data >= 0.5
            sd = np.sqrt(var)
            summaries[sid] = uncertainty.UncertaintySummary(
                mean=mean,
                var=var,
                lower=np.clip(mean - uncertainty.Z95 * sd, 0, 1),
                upper=np.clip(mean + uncertainty.Z95 * sd, 0, 1),
                mean_contour=mean >= 0.5,
                band=band,
            )
    quality = {StructureId(k): v for k, v in doc["quality"].items()}
    vois = {StructureId(k): Voi(tuple(v["origin"]), tuple(v["size"])) for k, v in doc["vois"].items()}
    return CaseResult(doc["case_id"], pred, summaries, quality, vois, doc["warnings"], doc["timings"])


# --- ablation harness -------------------------------------------------------------


def run_ablation(
    dataset: dict[str, list[PhantomCase]],
    train_cfg: trainer.TrainConfig,
    seeds: list[int],
    out_dir: str | Path,
    voi_size: tuple[int, int, int] = (64, 64, 48),
) -> dict:
    """Train all four target-net variants per seed on identical splits and
    compare mean test DSC with paired two-sided t-tests."""
    if len(seeds) < 3:
        raise ValueError("ablation needs at least three seeds")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spacing = dataset["train"][0].ct.spacing
    samples = {
        split: trainer.build_ctv_vois(dataset[split], voi_size, train_cfg.ahe)
        for split in ("train", "val", "test")
    }
    per_case: dict[str, list[float]] = {v: [] for v in trainer.VARIANTS}
    rows: list[metrics.EvalRow] = []
    for seed in seeds:
        cfg = replace(train_cfg, master_seed=seed)
        for variant in trainer.VARIANTS:
            ds = {"train": samples["train"], "val": samples["val"], "spacing": spacing}
            ckpt, report = trainer.train_ctv(ds, variant, cfg, out_dir / f"seed{seed}")
            model, _ = nets.load_checkpoint(ckpt)
            for s in samples["test"]:
                inp = trainer.ctv_input_channels(s.image, s.bladder, s.rectum, model.anatomy_guided)
                out = nets.forward(model, inp)
                d = metrics.dsc(out.main_seg >= 0.5, s.mask)
                per_case[variant].append(d)
                rows.append(metrics.EvalRow(f"{s.case_id}_seed{seed}", "ctv", variant, d, None, None))
            log.info("stage=ablate variant=%s seed=%d mean_dsc=%.4f", variant, seed,
                     np.mean(per_case[variant][-len(samples['test']):]))
    report = {
        "seeds": list(seeds),
        "mean_dsc": {v: float(np.mean(d)) for v, d in per_case.items()},
        "sd_dsc": {v: float(np.std(d)) for v, d in per_case.items()},
        "t_tests": {},
    }
    names = list(trainer.VARIANTS)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            t, p = metrics.paired_t_test(per_case[a], per_case[b])
            report["t_tests"][f"{a} vs {b}"] = {"t": t, "p": p}
    metrics.write_eval_csv(rows, out_dir / "ablation_cases.csv")
    (out_dir / "ablation_report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    with open(out_dir / "ablation_table.txt", "w") as fh:
        fh.write(f"{'variant':<10} {'mean DSC':>9} {'sd':>7}\n")
        for v in names:
            fh.write(f"{v:<10} {report['mean_dsc'][v]:>9.4f} {report['sd_dsc'][v]:>7.4f}\n")
    return report


# --- overlays ----------------------------------------------------------------------


def _contour_pixels(mask2d: np.ndarray) -> np.ndarray:
    out = np.zeros_like(mask2d, dtype=bool)
    if mask2d.any():
        idx = metrics.surface_voxels(mask2d)
        out[idx[:, 0], idx[:, 1]] = True
    return out


def emit_overlays(
    ct: Volume,
    result: CaseResult,
    truth: StructureSet | None,
    out_dir: str | Path,
) -> list[Path]:
    """Axial PNGs at three representative target-bearing levels: truth
    contour red, predicted mean contour blue, confidence band translucent
    yellow."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = result.summaries.get(StructureId.CTV)
    if summary is None:
        raise ValueError("overlays need an uncertainty summary for the target")
    zs = np.where(summary.mean_contour.any(axis=(0, 1)))[0]
    if len(zs) == 0:
        return []
    picks = {"inferior": zs[0], "middle": zs[len(zs) // 2], "superior": zs[-1]}
    lo, hi = float(ct.data.min()), float(ct.data.max())
    paths = []
    seen = set()
    for name, z in picks.items():
        if int(z) in seen:
            continue
        seen.add(int(z))
        gray = (ct.data[:, :, z] - lo) / (hi - lo) if hi > lo else np.zeros(ct.shape[:2])
        rgb = np.stack([gray] * 3, axis=-1)
        band = summary.band[:, :, z]
        rgb[band] = 0.5 * rgb[band] + 0.5 * np.array([1.0, 1.0, 0.0])
        if truth is not None and StructureId.CTV in truth.masks:
            rgb[_contour_pixels(truth.mask(StructureId.CTV)[:, :, z])] = [1.0, 0.0, 0.0]
        rgb[_contour_pixels(summary.mean_contour[:, :, z])] = [0.0, 0.0, 1.0]
        img = Image.fromarray((np.clip(rgb, 0, 1) * 255).astype(np.uint8).swapaxes(0, 1))
        path = out_dir / f"{result.case_id}_slice{z:03d}_{name}.png"
        img.save(path)
        paths.append(path)
    return paths


# --- evaluation glue ------------------------------------------------------------


def evaluate_result(result: CaseResult, truth: StructureSet, variant: str = "") -> list[metrics.EvalRow]:
    return metrics.evaluate_case(result.pred, truth, result.quality, result.case_id, variant)
