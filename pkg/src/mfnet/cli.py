"""Command-line entry point: ``mfnet <subcommand> [options]``.

The pipeline is staged through files (dataset -> classifier -> CAMs -> labels
-> saliency network -> predictions -> report), so every intermediate artifact
can be inspected. Exit codes: 0 success, 1 domain error, 2 configuration or
usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import ndgrad as nd
from .cam import DEFAULT_SCALES, multi_inference_cam
from .core import (CapacityError, ConfigError, NumericError, SceneParams, ShapeError, dump_json,
                   gen_synthetic_dataset, load_mask_png, load_png, read_dataset, read_wsf,
                   save_png, write_dataset, write_wsf)
from .gradcheck import run_grad_checks
from .labels import RefineConfig, synthesize_labels
from .metrics import METRIC_NAMES, evaluate
from .refine import CrfParams, PamrParams, SlicParams, pamr_affinity
from .trainer import (ABLATION_CASES, LabelSet, TrainConfig, TrainingError, predict, prepare,
                      run_ablation, sweep_delta, train_classifier, train_mfnet)

log = logging.getLogger("mfnet")

SUBCOMMANDS = ("gen-data", "train-classifier", "infer-cam", "make-labels", "train", "infer",
               "eval", "ablate", "sweep-delta", "grad-check")
DOMAIN_ERRORS = (ShapeError, NumericError, CapacityError, TrainingError, ValueError, OSError,
                 KeyError)

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_BLOCKS = {"pamr": PamrParams, "slic": SlicParams, "crf": CrfParams, "scene": SceneParams}
_TUPLE_KEYS = {"radii", "radius_range", "clutter"}


@dataclass
class RunConfig:
    """Flat TrainConfig fields, path slots, refinement/scene blocks and metric policy."""
    train: TrainConfig = field(default_factory=TrainConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    scene: SceneParams = field(default_factory=SceneParams)
    scales: tuple = DEFAULT_SCALES
    metric_policy: str = "adaptive"
    n_train: int = 100
    n_test: int = 50
    n_classifier: int = 12800
    data_dir: str | None = None
    cam_dir: str | None = None
    label_dir: str | None = None
    checkpoint_dir: str | None = None
    report_path: str | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        own = {f.name for f in fields(cls)} - {"train", "refine", "scene"}
        refine_keys = {"threshold", "use_crf"}
        unknown = set(data) - _TRAIN_KEYS - own - set(_BLOCKS) - refine_keys
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        blocks = {}
        for name, kind in _BLOCKS.items():
            block = dict(data.get(name, {}))
            for key in _TUPLE_KEYS & set(block):
                block[key] = tuple(block[key])
            try:
                blocks[name] = kind(**block)
            except TypeError as exc:
                raise ConfigError(f"bad '{name}' block: {exc}") from None
        try:
            refine = RefineConfig(pamr=blocks["pamr"], slic=blocks["slic"], crf=blocks["crf"],
                                  **{k: data[k] for k in refine_keys & set(data)})
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        train = TrainConfig.from_dict({k: data[k] for k in _TRAIN_KEYS & set(data)})
        rest = {k: data[k] for k in own & set(data)}
        if "scales" in rest:
            rest["scales"] = tuple(float(s) for s in rest["scales"])
        cfg = cls(train=train, refine=refine, scene=blocks["scene"], **rest)
        if cfg.metric_policy not in ("adaptive", "max_over_thresholds"):
            raise ConfigError(f"unknown metric_policy {cfg.metric_policy!r}")
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        out = asdict(self.train)
        out.update(pamr=asdict(self.refine.pamr), slic=asdict(self.refine.slic),
                   crf=asdict(self.refine.crf), scene=asdict(self.scene),
                   threshold=self.refine.threshold, use_crf=self.refine.use_crf)
        for f in fields(self):
            if f.name not in ("train", "refine", "scene"):
                out[f.name] = getattr(self, f.name)
        return out


# --- helpers ------------------------------------------------------------------

def _csv_list(kind):
    def parse(text):
        try:
            return [kind(t) for t in text.split(",") if t.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected comma-separated values, got {text!r}")
    return parse


def _need_dir(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"missing {what} path")
    p = Path(path)
    if not p.is_dir():
        raise ConfigError(f"{what} directory {p} does not exist")
    return p


def _need_dataset(path) -> Path:
    p = _need_dir(path, "dataset")
    if not (p / "manifest.json").is_file():
        raise ConfigError(f"{p} has no manifest.json")
    return p


def _out_dir(args, fallback, what: str) -> Path:
    path = args.out or fallback
    if path is None:
        raise ConfigError(f"--out is required for the {what}")
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _emit_report(args, cfg: RunConfig, report: dict) -> None:
    path = args.out or cfg.report_path
    if path is None:
        sys.stdout.write(json.dumps(report, indent=2, sort_keys=True) + "\n")
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    dump_json(path, report)


def _write_csv(path, rows: list[dict]) -> None:
    keys = sorted({k for r in rows for k in r})
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: json.dumps(v) if isinstance(v, list) else v for k, v in r.items()})


def _stems(data_dir: Path) -> list[str]:
    manifest = json.loads((data_dir / "manifest.json").read_text(encoding="utf-8"))
    return [Path(e["image_path"]).stem for e in manifest]


def _pmap(fn, items, jobs: int):
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _write_jsonl(path, entries) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")


def _frozen(params: dict) -> dict:
    return {k: np.asarray(v.value) for k, v in params.items()}


# --- subcommands --------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> None:
    out = _out_dir(args, cfg.data_dir, "dataset")
    samples = gen_synthetic_dataset(args.count, cfg.train.image_size, cfg.train.num_categories,
                                    seed=cfg.train.seed, scene=cfg.scene)
    write_dataset(samples, out)
    log.info("wrote %d samples to %s", len(samples), out)


def cmd_train_classifier(args, cfg: RunConfig) -> None:
    data = _need_dataset(args.data or cfg.data_dir)
    out = _out_dir(args, cfg.checkpoint_dir, "checkpoint")
    samples = read_dataset(data)
    result = train_classifier(samples, cfg.train)
    nd.save_params(result.params, out)
    _write_jsonl(out / "train_log.jsonl", result.history)
    dump_json(out / "info.json", result.info)


def _cam_job(job):
    params, path, scales = job
    return multi_inference_cam(params, load_png(path), scales)


def cmd_infer_cam(args, cfg: RunConfig) -> None:
    data = _need_dataset(args.data or cfg.data_dir)
    ckpt = _need_dir(args.checkpoint or cfg.checkpoint_dir, "checkpoint")
    out = _out_dir(args, cfg.cam_dir, "CAM maps")
    params = _frozen(nd.load_params(ckpt))
    manifest = json.loads((data / "manifest.json").read_text(encoding="utf-8"))
    jobs = [(params, data / e["image_path"], cfg.scales) for e in manifest]
    for stem, cam in zip(_stems(data), _pmap(_cam_job, jobs, args.jobs)):
        write_wsf(out / f"{stem}.wsf", cam)
        save_png(out / f"{stem}.png", cam)


def _label_job(job):
    image_path, cam_path, refine = job
    pair = synthesize_labels(load_png(image_path), read_wsf(cam_path).astype(np.float64), refine)
    return pair.y1.mask, pair.y2.mask


def cmd_make_labels(args, cfg: RunConfig) -> None:
    data = _need_dataset(args.data or cfg.data_dir)
    cams = _need_dir(args.cams or cfg.cam_dir, "CAM")
    out = _out_dir(args, cfg.label_dir, "labels")
    manifest = json.loads((data / "manifest.json").read_text(encoding="utf-8"))
    stems = _stems(data)
    missing = [s for s in stems if not (cams / f"{s}.wsf").is_file()]
    if missing:
        raise ConfigError(f"{len(missing)} CAM files missing in {cams}, e.g. {missing[0]}.wsf")
    jobs = [(data / e["image_path"], cams / f"{s}.wsf", cfg.refine) for e, s in zip(manifest, stems)]
    (out / "y1").mkdir(exist_ok=True)
    (out / "y2").mkdir(exist_ok=True)
    for stem, (y1, y2) in zip(stems, _pmap(_label_job, jobs, args.jobs)):
        save_png(out / "y1" / f"{stem}.png", y1)
        save_png(out / "y2" / f"{stem}.png", y2)


def cmd_train(args, cfg: RunConfig) -> None:
    data = _need_dataset(args.data or cfg.data_dir)
    labels_dir = _need_dir(args.labels or cfg.label_dir, "label")
    out = _out_dir(args, cfg.checkpoint_dir, "checkpoint")
    samples = read_dataset(data)
    stems = _stems(data)
    try:
        y1 = np.stack([load_mask_png(labels_dir / "y1" / f"{s}.png") for s in stems])
        y2 = np.stack([load_mask_png(labels_dir / "y2" / f"{s}.png") for s in stems])
    except FileNotFoundError as exc:
        raise ConfigError(f"label file missing: {exc.filename}") from None
    affinities = np.stack([pamr_affinity(s.image, cfg.refine.pamr) for s in samples])
    result = train_mfnet(samples, LabelSet(y1, y2), cfg.train, dump_dir=out,
                         affinities=affinities.astype(np.float32))
    nd.save_params(result.params, out)
    _write_jsonl(out / "train_log.jsonl", result.history)


def cmd_infer(args, cfg: RunConfig) -> None:
    data = _need_dataset(args.data or cfg.data_dir)
    ckpt = _need_dir(args.checkpoint or cfg.checkpoint_dir, "checkpoint")
    out = _out_dir(args, None, "predictions")
    params = nd.load_params(ckpt)
    preds = predict(params, read_dataset(data))
    for stem, p in zip(_stems(data), preds):
        save_png(out / f"{stem}.png", p)


def _mask_files(path: Path) -> dict:
    """stem -> mask path, from a dataset dir (manifest) or a plain directory of PNGs."""
    if (path / "manifest.json").is_file():
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
        return {Path(e["image_path"]).stem: path / e["gt_path"] for e in manifest}
    return {p.stem: p for p in sorted(path.glob("*.png"))}


def _eval_job(job):
    pred_path, gt_path = job
    return load_png(pred_path), load_mask_png(gt_path)


def cmd_eval(args, cfg: RunConfig) -> None:
    pred_dir = _need_dir(args.pred, "prediction")
    gt_dir = _need_dir(args.gt or cfg.data_dir, "ground-truth")
    preds, gts = _mask_files(pred_dir), _mask_files(gt_dir)
    if not gts:
        raise ConfigError(f"no ground-truth masks in {gt_dir}")
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise ShapeError(f"{len(missing)} predictions missing, e.g. {missing[0]}")
    stems = sorted(gts)
    pairs = _pmap(_eval_job, [(preds[s], gts[s]) for s in stems], args.jobs)
    report = evaluate([p for p, _ in pairs], [g for _, g in pairs], dataset=str(gt_dir.name),
                      policy=cfg.metric_policy)
    out = report.to_dict()
    for stem, row in zip(stems, out["per_image"]):
        row["name"] = stem
    _emit_report(args, cfg, out)
    if args.csv:
        with Path(args.csv).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=("name",) + METRIC_NAMES)
            writer.writeheader()
            writer.writerows(out["per_image"])


def _prepared(args, cfg: RunConfig):
    return prepare(cfg.train, cfg.refine, n_train=cfg.n_train, n_test=cfg.n_test,
                   n_classifier=cfg.n_classifier, jobs=args.jobs, scene=cfg.scene)


def _seed_list(args, cfg: RunConfig) -> list[int]:
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    return [cfg.train.seed + i for i in range(args.seeds)]


def cmd_ablate(args, cfg: RunConfig) -> None:
    cases = args.cases or sorted(ABLATION_CASES)
    bad = [c for c in cases if c not in ABLATION_CASES]
    if bad:
        raise ConfigError(f"unknown ablation cases {bad}")
    seeds = _seed_list(args, cfg)
    report = run_ablation(_prepared(args, cfg), cases, cfg.train, seeds, cfg.metric_policy)
    report["config"] = cfg.to_dict()
    _emit_report(args, cfg, report)
    if args.csv:
        _write_csv(args.csv, report["rows"])


def cmd_sweep_delta(args, cfg: RunConfig) -> None:
    seeds = _seed_list(args, cfg)
    report = sweep_delta(_prepared(args, cfg), args.deltas, cfg.train, seeds, cfg.metric_policy)
    report["config"] = cfg.to_dict()
    _emit_report(args, cfg, report)
    if args.csv:
        _write_csv(args.csv, report["rows"])


class GradCheckFailed(ArithmeticError):
    pass


def cmd_grad_check(args, cfg: RunConfig) -> None:
    if args.instances < 1:
        raise ConfigError("--instances must be >= 1")
    checks = run_grad_checks(seed=cfg.train.seed, instances=args.instances, h=args.step)
    report = {"step": args.step, "seed": cfg.train.seed, "checks": checks,
              "passed": all(c["passed"] for c in checks.values())}
    _emit_report(args, cfg, report)
    if not report["passed"]:
        failed = sorted(k for k, c in checks.items() if not c["passed"])
        raise GradCheckFailed(f"gradient check failed for {failed}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-classifier": cmd_train_classifier,
    "infer-cam": cmd_infer_cam,
    "make-labels": cmd_make_labels,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep-delta": cmd_sweep_delta,
    "grad-check": cmd_grad_check,
}


# --- argument parsing ---------------------------------------------------------

def _common(default: bool) -> argparse.ArgumentParser:
    """Global flags; subparsers use SUPPRESS so a value given before the subcommand survives."""
    d = (lambda v: v) if default else (lambda v: argparse.SUPPRESS)
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", metavar="PATH", default=d(None),
                   help="JSON run config (TrainConfig fields, paths, refinement blocks)")
    g.add_argument("--seed", type=int, metavar="U64", default=d(None),
                   help="seed for all randomness (overrides the config)")
    g.add_argument("--jobs", type=int, metavar="N", default=d(1),
                   help="worker processes for per-image stages (default 1)")
    g.add_argument("--out", metavar="PATH", default=d(None),
                   help="output directory or report file")
    g.add_argument("-v", "--verbose", action="store_true", default=d(False),
                   help="log progress to stderr")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfnet", parents=[_common(True)],
                                     description="Weakly supervised saliency pipeline on synthetic data.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    common = [_common(False)]

    def add(name, help_text):
        return sub.add_parser(name, parents=common, help=help_text, description=help_text)

    p = add("gen-data", "Write a synthetic dataset (images/, gt/, manifest.json) to --out.")
    p.add_argument("--count", type=int, default=100, help="number of samples (default 100)")
    p.add_argument("--size", type=int, help="image side in pixels (config image_size)")
    p.add_argument("--categories", type=int, help="number of categories (config num_categories)")

    p = add("train-classifier", "Train the GAP classifier on image-level labels; checkpoint to --out.")
    p.add_argument("--data", help="dataset directory (config data_dir)")
    p.add_argument("--iters", type=int, help="iterations (config iters_classifier)")
    p.add_argument("--lr", type=float, help="learning rate (config lr_classifier)")

    p = add("infer-cam", "Multi-scale, flipped CAMs for every image (WSF1 + PNG) into --out.")
    p.add_argument("--data", help="dataset directory (config data_dir)")
    p.add_argument("--checkpoint", help="classifier checkpoint directory (config checkpoint_dir)")
    p.add_argument("--scales", type=_csv_list(float), help="comma-separated scales (config scales)")

    p = add("make-labels", "Pixel-wise (y1/) and superpixel-wise (y2/) pseudo labels into --out.")
    p.add_argument("--data", help="dataset directory (config data_dir)")
    p.add_argument("--cams", help="CAM directory from infer-cam (config cam_dir)")

    p = add("train", "Train the saliency network for one ablation case; checkpoint and log to --out.")
    p.add_argument("--data", help="dataset directory (config data_dir)")
    p.add_argument("--labels", help="label directory from make-labels (config label_dir)")
    p.add_argument("--case", type=int, help="ablation case 1-9 (config ablation_case)")
    p.add_argument("--iters", type=int, help="iterations (config iters_saliency)")
    p.add_argument("--lr", type=float, help="learning rate (config lr_saliency)")
    p.add_argument("--delta", type=float, help="self-supervision weight (config delta)")

    p = add("infer", "Saliency maps (PNG) from a trained checkpoint into --out; filters unused.")
    p.add_argument("--data", help="dataset directory (config data_dir)")
    p.add_argument("--checkpoint", help="saliency checkpoint directory (config checkpoint_dir)")

    p = add("eval", "MAE, F, S, E and weighted F of predictions against ground truth.")
    p.add_argument("--pred", required=True, help="directory of predicted PNG maps")
    p.add_argument("--gt", help="dataset directory or directory of PNG masks (config data_dir)")
    p.add_argument("--csv", help="also write per-image metrics as CSV")
    p.add_argument("--policy", choices=("adaptive", "max_over_thresholds"),
                   help="F-measure threshold policy (config metric_policy)")

    p = add("ablate", "Train and evaluate ablation cases on freshly generated desk data.")
    p.add_argument("--cases", type=_csv_list(int), help="comma-separated case ids (default 1-9)")
    p.add_argument("--seeds", type=int, default=1, help="number of training seeds (default 1)")
    p.add_argument("--iters", type=int, help="saliency iterations (config iters_saliency)")
    p.add_argument("--n-train", type=int, help="training images (config n_train)")
    p.add_argument("--n-test", type=int, help="test images (config n_test)")
    p.add_argument("--csv", help="also write the per-run rows as CSV")

    p = add("sweep-delta", "Case-9 training per self-supervision weight; reports mean |P1-P2|.")
    p.add_argument("--deltas", type=_csv_list(float), default=[2.0, 0.0, -2.0],
                   help="comma-separated delta values (default 2,0,-2)")
    p.add_argument("--seeds", type=int, default=1, help="number of training seeds (default 1)")
    p.add_argument("--iters", type=int, help="saliency iterations (config iters_saliency)")
    p.add_argument("--n-train", type=int, help="training images (config n_train)")
    p.add_argument("--n-test", type=int, help="test images (config n_test)")
    p.add_argument("--csv", help="also write the per-run rows as CSV")

    p = add("grad-check", "Finite-difference gradient checks of every op and loss (JSON report).")
    p.add_argument("--instances", type=int, default=20, help="random instances per check (default 20)")
    p.add_argument("--step", type=float, default=1e-3, help="central-difference step (default 1e-3)")
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    train = {}
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        train["seed"] = args.seed
    mapping = {"size": "image_size", "categories": "num_categories", "case": "ablation_case",
               "delta": "delta"}
    for flag, key in mapping.items():
        if getattr(args, flag, None) is not None:
            train[key] = getattr(args, flag)
    if getattr(args, "iters", None) is not None:
        key = "iters_classifier" if args.command == "train-classifier" else "iters_saliency"
        train[key] = args.iters
    if getattr(args, "lr", None) is not None:
        train["lr_classifier" if args.command == "train-classifier" else "lr_saliency"] = args.lr
    if train:
        cfg.train = TrainConfig.from_dict({**asdict(cfg.train), **train})
    updates = {}
    if getattr(args, "scales", None):
        updates["scales"] = tuple(args.scales)
    if getattr(args, "policy", None):
        updates["metric_policy"] = args.policy
    for flag in ("n_train", "n_test"):
        if getattr(args, flag, None) is not None:
            if getattr(args, flag) < 1:
                raise ConfigError(f"--{flag.replace('_', '-')} must be >= 1")
            updates[flag] = getattr(args, flag)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    return replace(cfg, **updates) if updates else cfg


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors (2) and --help (0)
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"mfnet {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except (GradCheckFailed, *DOMAIN_ERRORS) as exc:
        print(f"mfnet {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
