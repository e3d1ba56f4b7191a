"""Command-line entry points: phantom generation, stage training, inference,
evaluation, ablation, and overlay rendering.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import metrics, pipeline, trainer
from .phantom import PhantomError, PhantomSpec, generate_dataset
from .preprocess import AheParams, AugmentParams
from .volcore import StructureId, StructureSet, VolumeError, read_mivol

log = logging.getLogger("pelvicseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _train_config(doc: dict, seed: int | None, localizer: bool = False) -> trainer.TrainConfig:
    cfg = trainer.TrainConfig.localizer_default() if localizer else trainer.TrainConfig()
    known = {f.name for f in fields(trainer.TrainConfig)}
    for key, val in doc.items():
        if key in ("augment", "ahe", "dropblock", "voi_sizes"):
            continue
        if key in known:
            if key in ("lr_decay_points", "checkpoint_epochs"):
                val = tuple(val)
            setattr(cfg, key, val)
    if "augment" in doc:
        cfg.augment = AugmentParams(**doc["augment"])
    if "ahe" in doc:
        cfg.ahe = AheParams(**{**doc["ahe"], "tile_grid": tuple(doc["ahe"].get("tile_grid", (8, 8)))})
    if seed is not None:
        cfg.master_seed = seed
    return cfg


def _pipeline_config(doc: dict) -> pipeline.PipelineConfig:
    cfg = pipeline.PipelineConfig()
    if "voi_sizes" in doc:
        for name, size in doc["voi_sizes"].items():
            cfg.voi_sizes[StructureId(name)] = tuple(size)
    for key in ("localizer_downsample", "mcdo_t", "mcdo_oars", "mcdo_seed", "threshold"):
        if key in doc:
            setattr(cfg, key, doc[key])
    return cfg


def _checkpoint_map(ck_dir: Path) -> dict:
    out = {}
    for key in ["localizer"] + [s.value for s in StructureId if s is not StructureId.CTV]:
        path = ck_dir / f"{key}.pt"
        if not path.exists():
            raise VolumeError(f"missing checkpoint {path}")
        out[key] = path
    exact = ck_dir / "ctv.pt"
    if exact.exists():
        out["ctv"] = exact
    else:
        candidates = sorted(ck_dir.glob("ctv_*.pt"))
        candidates = [c for c in candidates if "epoch" not in c.stem and "phase" not in c.stem]
        if not candidates:
            raise VolumeError(f"no target-net checkpoint under {ck_dir}")
        if len(candidates) > 1:
            raise VolumeError(f"ambiguous target-net checkpoints: {[c.name for c in candidates]}")
        out["ctv"] = candidates[0]
    return out


def _structure_set(path: Path) -> StructureSet:
    if (path / "manifest.json").exists():
        return StructureSet.load(path)
    if (path / "pred" / "manifest.json").exists():
        return StructureSet.load(path / "pred")
    if (path / "truth" / "manifest.json").exists():
        return StructureSet.load(path / "truth")
    raise VolumeError(f"no structure-set manifest under {path}")


def _cmd_phantom(args) -> int:
    seed = args.seed if args.seed is not None else 0
    spec = PhantomSpec(seed=0, noise_sigma=args.noise_sigma, style_jitter=args.style_jitter)
    train, val, test = generate_dataset(seed, args.n_train, args.n_val, args.n_test, spec)
    pipeline.save_dataset({"train": train, "val": val, "test": test}, args.out, seed)
    log.info("stage=phantom cases=%d out=%s", len(train) + len(val) + len(test), args.out)
    return 0


def _cmd_train(args) -> int:
    doc = _load_config(args.config)
    data = pipeline.load_dataset(args.data)
    pcfg = _pipeline_config(doc)
    out = Path(args.out)
    if args.stage == "localizer":
        cfg = _train_config(doc, args.seed, localizer=True)
        ds = {
            "train": trainer.build_localizer_slices(data["train"], pcfg.localizer_downsample),
            "val": trainer.build_localizer_slices(data["val"], pcfg.localizer_downsample),
        }
        _, report = trainer.train_localizer(ds, cfg, out)
    elif args.stage == "organ":
        cfg = _train_config(doc, args.seed)
        sid = StructureId(args.structure)
        size = pcfg.voi_sizes[sid]
        ds = {
            "train": trainer.build_organ_vois(data["train"], sid, size, cfg.ahe),
            "val": trainer.build_organ_vois(data["val"], sid, size, cfg.ahe),
        }
        _, report = trainer.train_organ(sid, ds, cfg, out)
    else:  # ctv
        cfg = _train_config(doc, args.seed)
        size = pcfg.voi_sizes[StructureId.CTV]
        ds = {
            "train": trainer.build_ctv_vois(data["train"], size, cfg.ahe),
            "val": trainer.build_ctv_vois(data["val"], size, cfg.ahe),
            "spacing": data["train"][0].ct.spacing,
        }
        _, report = trainer.train_ctv(ds, args.variant, cfg, out)
    log.info("stage=train tag=%s best_val_dsc=%.4f", report.tag, report.best_val_dsc)
    return 0


def _cmd_infer(args) -> int:
    doc = _load_config(args.config)
    cfg = _pipeline_config(doc)
    if args.mcdo is not None:
        cfg.mcdo_t = args.mcdo
    if args.mcdo_oars:
        cfg.mcdo_oars = True
    if args.seed is not None:
        cfg.mcdo_seed = args.seed
    ct = read_mivol(args.ct)
    result = pipeline.infer(ct, _checkpoint_map(Path(args.checkpoints)), cfg, case_id=Path(args.ct).parent.name or "case")
    pipeline.save_result(result, args.out)
    return 0


def _cmd_eval(args) -> int:
    pred = _structure_set(Path(args.pred))
    truth = _structure_set(Path(args.truth))
    quality = None
    result_doc = Path(args.pred) / "result.json"
    if result_doc.exists():
        doc = json.loads(result_doc.read_text())
        quality = {StructureId(k): v for k, v in doc.get("quality", {}).items() if v is not None}
    rows = metrics.evaluate_case(pred, truth, quality, case_id=Path(args.pred).name)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_eval_csv(rows, out / "eval.csv")
    (out / "summary.json").write_text(json.dumps(metrics.summarize_rows(rows), indent=1, sort_keys=True))
    log.info("stage=eval rows=%d out=%s", len(rows), out)
    return 0


def _cmd_ablate(args) -> int:
    doc = _load_config(args.config)
    data = pipeline.load_dataset(args.data)
    cfg = _train_config(doc, args.seed)
    pcfg = _pipeline_config(doc)
    seeds = [int(s) for s in args.seeds.split(",")]
    report = pipeline.run_ablation(data, cfg, seeds, args.out, pcfg.voi_sizes[StructureId.CTV])
    log.info("stage=ablate mean_dsc=%s", report["mean_dsc"])
    return 0


def _cmd_overlay(args) -> int:
    ct = read_mivol(args.ct)
    result = pipeline.load_result(Path(args.result))
    truth = _structure_set(Path(args.truth)) if args.truth else None
    paths = pipeline.emit_overlays(ct, result, truth, args.out)
    log.info("stage=overlay images=%d out=%s", len(paths), args.out)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="pelvicseg", description=__doc__)
    parser.add_argument("--seed", type=int, default=None, help="global seed override")
    parser.add_argument("--quiet", action="store_true", help="suppress progress logging")
    # the global flags are also accepted after the subcommand
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="synthetic dataset generation")
    ph_sub = ph.add_subparsers(dest="phantom_cmd", required=True)
    gen = ph_sub.add_parser("gen", parents=[common])
    gen.add_argument("--n-train", type=int, default=40)
    gen.add_argument("--n-val", type=int, default=10)
    gen.add_argument("--n-test", type=int, default=10)
    gen.add_argument("--noise-sigma", type=float, default=20.0)
    gen.add_argument("--style-jitter", type=float, default=0.0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=_cmd_phantom)

    tr = sub.add_parser("train", help="train one pipeline stage")
    tr_sub = tr.add_subparsers(dest="stage", required=True)
    for stage in ("localizer", "organ", "ctv"):
        p = tr_sub.add_parser(stage, parents=[common])
        if stage == "organ":
            p.add_argument("structure", choices=[s.value for s in StructureId if s is not StructureId.CTV])
        if stage == "ctv":
            p.add_argument("--variant", default="AG-MTN", choices=list(trainer.VARIANTS))
        p.add_argument("--config", default=None)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.set_defaults(func=_cmd_train, stage=stage)

    inf = sub.add_parser("infer", parents=[common], help="end-to-end inference on one CT volume")
    inf.add_argument("--ct", required=True)
    inf.add_argument("--checkpoints", required=True)
    inf.add_argument("--config", default=None)
    inf.add_argument("--out", required=True)
    inf.add_argument("--mcdo", type=int, default=None, metavar="T")
    inf.add_argument("--mcdo-oars", action="store_true")
    inf.set_defaults(func=_cmd_infer)

    ev = sub.add_parser("eval", parents=[common], help="score predictions against truth")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--truth", required=True)
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=_cmd_eval)

    ab = sub.add_parser("ablate", parents=[common], help="four-variant target-net comparison")
    ab.add_argument("--data", required=True)
    ab.add_argument("--config", default=None)
    ab.add_argument("--seeds", default="0,1,2", help="comma-separated training seeds")
    ab.add_argument("--out", required=True)
    ab.set_defaults(func=_cmd_ablate)

    ov = sub.add_parser("overlay", parents=[common], help="axial PNG overlays with confidence band")
    ov.add_argument("--ct", required=True)
    ov.add_argument("--result", required=True)
    ov.add_argument("--truth", default=None)
    ov.add_argument("--out", required=True)
    ov.set_defaults(func=_cmd_overlay)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(asctime)s %(name)s %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (VolumeError, PhantomError, FileNotFoundError, json.JSONDecodeError, metrics.MetricError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
