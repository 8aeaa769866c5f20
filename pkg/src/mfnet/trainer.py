"""Training loops: classifier pretraining, MFNet under the nine ablation cases, delta sweep."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import ndgrad as nd
from .cam import DEFAULT_SCALES, multi_inference_cam
from .core import ConfigError, NumericError, Provenance, Sample, SceneParams, gen_synthetic_dataset
from .labels import FUSION_PROVENANCE, RefineConfig, fuse, make_ys, synthesize_labels
from .losses import (classification_loss, filter_loss, multi_guidance_loss,
                     self_supervision_loss, total_loss)
from .metrics import evaluate, f_measure
from .nets import (NetConfig, classifier_forward, infer_saliency, init_classifier, init_mfnet,
                   mfnet_forward, to_nchw)
from .refine import pamr_affinity

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


@dataclass
class TrainConfig:
    lr_classifier: float = 1e-3
    iters_classifier: int = 16000
    batch_classifier: int = 8
    # random horizontal flips of classifier batches
    flip_classifier: bool = True
    lr_saliency: float = 1e-4
    iters_saliency: int = 3000
    delta: float = 2.0
    image_size: int = 64
    seed: int = 0
    ablation_case: int = 9
    batch_size: int = 4
    num_categories: int = 4
    ss_mode: str = "similarity"
    log_every: int = 50
    filter_level: str = "f3"
    # guidance target for the decoder: "soft" Ys, or Ys binarized at 0.5
    ys_target: str = "soft"
    # steps during which L_mg is left out, so the filters are trained before they guide
    guidance_warmup: int = 0

    @property
    def net(self) -> NetConfig:
        return NetConfig(filter_level=self.filter_level)

    def __post_init__(self):
        for name in ("lr_classifier", "lr_saliency"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("iters_classifier", "batch_classifier", "iters_saliency", "batch_size", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 1 <= self.ablation_case <= 9:
            raise ConfigError("ablation_case must be in [1, 9]")
        if self.image_size % 32:
            raise ConfigError("image_size must be a multiple of 32")
        if self.ss_mode not in ("similarity", "literal"):
            raise ConfigError(f"unknown ss_mode {self.ss_mode!r}")
        if self.guidance_warmup < 0:
            raise ConfigError("guidance_warmup must be >= 0")
        if self.ys_target not in ("soft", "binary"):
            raise ConfigError(f"unknown ys_target {self.ys_target!r}")
        if self.filter_level not in ("f3", "f4", "f5"):
            raise ConfigError(f"unknown filter_level {self.filter_level!r}")

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        """Iteration counts, rates and image size as published (pretrained-encoder regime)."""
        base = dict(iters_classifier=20000, lr_saliency=3e-6, iters_saliency=26000, image_size=256,
                    filter_level="f5")
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class AblationSpec:
    case: int
    uses_df: bool
    label_source: str
    architecture: str

    @property
    def provenance(self) -> list[str]:
        if self.label_source == "Y1":
            return [Provenance.PIXEL.value]
        if self.label_source == "Y2":
            return [Provenance.SUPERPIXEL.value]
        if self.label_source in FUSION_PROVENANCE:
            return [FUSION_PROVENANCE[self.label_source].value]
        return [Provenance.PIXEL.value, Provenance.SUPERPIXEL.value]


ABLATION_CASES = {
    1: AblationSpec(1, False, "Y1", "single_decoder"),
    2: AblationSpec(2, False, "Y2", "single_decoder"),
    3: AblationSpec(3, True, "Y1", "single_df"),
    4: AblationSpec(4, True, "Y2", "single_df"),
    5: AblationSpec(5, False, "avg", "single_decoder"),
    6: AblationSpec(6, False, "intersect", "single_decoder"),
    7: AblationSpec(7, False, "union", "single_decoder"),
    8: AblationSpec(8, False, "both", "dual_decoder"),
    9: AblationSpec(9, True, "both", "mdf"),
}


@dataclass
class LabelSet:
    """Precomputed pseudo labels, (N, H, W) uint8 each."""
    y1: np.ndarray
    y2: np.ndarray

    def target(self, source: str) -> np.ndarray:
        if source == "Y1":
            return self.y1
        if source == "Y2":
            return self.y2
        return fuse(self.y1, self.y2, source)


@dataclass
class TrainResult:
    params: dict
    history: list = field(default_factory=list)
    info: dict = field(default_factory=dict)


def _batches(rng: np.random.Generator, n: int, batch_size: int):
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield order[start:start + batch_size]


def _step(params: dict, state: nd.AdamState, lr: float) -> None:
    grads = {k: t.grad for k, t in params.items() if t.grad is not None}
    values = {k: params[k].value for k in grads}
    nd.adam_step(values, grads, state, lr)
    for t in params.values():
        t.grad = None


def _scalar(t) -> float:
    return float(t.value) if t is not None else 0.0


# --- classifier ---------------------------------------------------------------

def multilabel_accuracy(params: dict, samples: list[Sample], batch: int = 32) -> float:
    """Exact-match accuracy of ``sigmoid(S) > 0.5`` against the category bits."""
    hits = 0
    frozen = {k: nd.Tensor(v.value) for k, v in params.items()}
    for start in range(0, len(samples), batch):
        chunk = samples[start:start + batch]
        _, scores = classifier_forward(frozen, to_nchw(np.stack([s.image for s in chunk])))
        pred = scores.value.reshape(len(chunk), -1) > 0
        truth = np.stack([s.category for s in chunk]).astype(bool)
        hits += int(np.all(pred == truth, axis=1).sum())
    return hits / len(samples)


def train_classifier(samples: list[Sample], config: TrainConfig,
                     on_log: Callable[[dict], None] | None = None) -> TrainResult:
    if not samples:
        raise ConfigError("empty classifier training set")
    rng = np.random.default_rng(config.seed)
    params = init_classifier(config.num_categories, config.seed)
    state = nd.AdamState()
    images = to_nchw(np.stack([s.image for s in samples]))
    cats = np.stack([s.category for s in samples]).astype(np.float32)
    history = []
    batches = _batches(rng, len(samples), config.batch_classifier)
    for step in range(1, config.iters_classifier + 1):
        idx = next(batches)
        x = images[idx]
        if config.flip_classifier:
            flip = rng.uniform(size=len(idx)) < 0.5
            x = np.where(flip[:, None, None, None], x[..., ::-1], x)
        _, scores = classifier_forward(params, x)
        loss = classification_loss(scores, cats[idx])
        if not np.isfinite(loss.value):
            raise TrainingError(f"classifier loss non-finite at step {step}")
        nd.backward(loss)
        _step(params, state, config.lr_classifier)
        if step % config.log_every == 0 or step == config.iters_classifier:
            entry = {"step": step, "Lc": _scalar(loss)}
            history.append(entry)
            if on_log:
                on_log(entry)
    info = {"train_accuracy": multilabel_accuracy(params, samples)}
    return TrainResult(params, history, info)


# --- MFNet --------------------------------------------------------------------

def _as_batch_target(arr: np.ndarray) -> np.ndarray:
    return arr[:, None].astype(np.float32)


def _guidance(p1, p2, affinity, config: TrainConfig) -> np.ndarray:
    ys = make_ys(p1.value[:, 0], p2.value[:, 0], affinity=affinity)
    if config.ys_target == "binary":
        ys = ys > 0.5
    return ys[:, None].astype(np.float32)


def _case_loss(spec: AblationSpec, params, x, targets, affinity, config: TrainConfig,
               guide: bool = True):
    """Forward pass and loss terms for one batch; returns (total, terms, outputs).

    With ``guide=False`` the guidance term L_mg is a constant zero (warm-up).
    """
    out = mfnet_forward(params, x, config.net)

    def guidance(p1, p2):
        if not guide:
            return nd.Tensor(np.zeros((), dtype=np.float32))
        return multi_guidance_loss(out.ps, _guidance(p1, p2, affinity, config))

    terms = {}
    if spec.architecture == "single_decoder":
        loss = multi_guidance_loss(out.ps, targets[0])
        terms["Ls"] = loss
    elif spec.architecture == "single_df":
        l1 = filter_loss(out.p1, targets[0])
        lmg = guidance(out.p1, out.p1)
        loss = nd.add(l1, lmg)
        terms.update(L1=l1, Lmg=lmg)
    elif spec.architecture == "dual_decoder":
        la = filter_loss(out.ps, targets[0])
        lb = filter_loss(out.ps2, targets[1])
        mutual = nd.mean(nd.square(nd.sub(out.ps, out.ps2)))
        loss = nd.add(nd.add(la, lb), mutual)
        terms.update(L1=la, L2=lb, Lmut=mutual)
    else:
        l1 = filter_loss(out.p1, targets[0])
        l2 = filter_loss(out.p2, targets[1])
        lmg = guidance(out.p1, out.p2)
        lss = self_supervision_loss(out.p1, out.p2, config.ss_mode)
        loss = total_loss(l1, l2, lmg, lss, config.delta)
        terms.update(L1=l1, L2=l2, Lmg=lmg, Lss=lss)
    return loss, terms, out


def train_mfnet(samples: list[Sample], labels: LabelSet, config: TrainConfig,
                spec: AblationSpec | None = None, on_log: Callable[[dict], None] | None = None,
                dump_dir=None, affinities: np.ndarray | None = None) -> TrainResult:
    """Train the network of ``spec`` (default: the config's ablation case) on fixed labels."""
    spec = spec or ABLATION_CASES[config.ablation_case]
    rng = np.random.default_rng(config.seed)
    params = init_mfnet(config.seed, spec.architecture, config.net)
    state = nd.AdamState()
    images = to_nchw(np.stack([s.image for s in samples]))
    if spec.label_source == "both":
        targets = [_as_batch_target(labels.y1), _as_batch_target(labels.y2)]
    else:
        targets = [_as_batch_target(labels.target(spec.label_source))]
    if spec.uses_df and affinities is None:
        affinities = np.stack([pamr_affinity(s.image) for s in samples]).astype(np.float32)
    history = []
    batches = _batches(rng, len(samples), config.batch_size)
    for step in range(1, config.iters_saliency + 1):
        idx = next(batches)
        aff = affinities[idx] if spec.uses_df else None
        loss, terms, _ = _case_loss(spec, params, images[idx], [t[idx] for t in targets], aff, config,
                                    guide=step > config.guidance_warmup)
        if not np.isfinite(loss.value):
            if dump_dir is not None:
                Path(dump_dir).mkdir(parents=True, exist_ok=True)
                np.savez(Path(dump_dir) / f"diverged_step{step}.npz", images=images[idx],
                         **{f"target{i}": t[idx] for i, t in enumerate(targets)})
            raise TrainingError(f"non-finite loss at step {step} (case {spec.case})")
        nd.backward(loss)
        _step(params, state, config.lr_saliency)
        if step % config.log_every == 0 or step == config.iters_saliency:
            entry = {"step": step, "L1": _scalar(terms.get("L1")), "L2": _scalar(terms.get("L2")),
                     "Lmg": _scalar(terms.get("Lmg")), "Lss": _scalar(terms.get("Lss")),
                     "total": float(loss.value)}
            history.append(entry)
            if on_log:
                on_log(entry)
    return TrainResult(params, history, {"case": spec.case})


def predict(params: dict, samples: list[Sample], batch: int = 25) -> list[np.ndarray]:
    preds = []
    for start in range(0, len(samples), batch):
        chunk = samples[start:start + batch]
        ps = infer_saliency(params, to_nchw(np.stack([s.image for s in chunk])))
        preds.extend(np.asarray(p, dtype=np.float64) for p in ps)
    return preds


def filter_disagreement(params: dict, samples: list[Sample], net: NetConfig = NetConfig(),
                        batch: int = 25) -> float:
    """Mean |P1 - P2| over the given images (both filters required)."""
    total, count = 0.0, 0
    frozen = {k: nd.Tensor(v.value) for k, v in params.items()}
    for start in range(0, len(samples), batch):
        chunk = samples[start:start + batch]
        out = mfnet_forward(frozen, to_nchw(np.stack([s.image for s in chunk])), net)
        diff = np.abs(out.p1.value.astype(np.float64) - out.p2.value)
        total += diff.sum()
        count += diff.size
    return total / count


# --- pipeline -----------------------------------------------------------------

# size of the desk classification corpus, separate from the saliency splits
DESK_N_CLASSIFIER = 12800


@dataclass
class DeskData:
    train: list
    test: list
    classifier_train: list


def make_desk_data(config: TrainConfig, n_train: int = 100, n_test: int = 50,
                   n_classifier: int = DESK_N_CLASSIFIER, scene: SceneParams = SceneParams()) -> DeskData:
    """Disjoint synthetic splits: a classification corpus and a saliency train/test pair."""
    size, c = config.image_size, config.num_categories
    return DeskData(
        train=gen_synthetic_dataset(n_train, size, c, config.seed * 1000 + 1, scene),
        test=gen_synthetic_dataset(n_test, size, c, config.seed * 1000 + 2, scene),
        classifier_train=gen_synthetic_dataset(n_classifier, size, c, config.seed * 1000 + 3, scene),
    )


def _cam_and_labels(args):
    params, image, scales, refine_cfg = args
    cam = multi_inference_cam(params, image, scales)
    pair = synthesize_labels(image, cam, refine_cfg)
    return cam, pair.y1.mask, pair.y2.mask


def build_labels(classifier: dict, samples: list[Sample], refine_cfg: RefineConfig = RefineConfig(),
                 scales=DEFAULT_SCALES, jobs: int = 1):
    """CAMs and (Y1, Y2) for every sample; returns (cams, LabelSet)."""
    frozen = {k: np.asarray(v.value) for k, v in classifier.items()}
    work = [(frozen, s.image, scales, refine_cfg) for s in samples]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_cam_and_labels, work))
    else:
        results = [_cam_and_labels(w) for w in work]
    cams = np.stack([r[0] for r in results])
    return cams, LabelSet(np.stack([r[1] for r in results]), np.stack([r[2] for r in results]))


@dataclass
class PreparedData:
    data: DeskData
    labels: LabelSet
    cams: np.ndarray
    classifier: TrainResult
    affinities: np.ndarray


def prepare(config: TrainConfig, refine_cfg: RefineConfig = RefineConfig(), n_train: int = 100,
            n_test: int = 50, n_classifier: int = DESK_N_CLASSIFIER, jobs: int = 1,
            scene: SceneParams = SceneParams()) -> PreparedData:
    data = make_desk_data(config, n_train, n_test, n_classifier, scene)
    t0 = time.perf_counter()
    clf = train_classifier(data.classifier_train, config)
    log.info("classifier trained in %.1fs, accuracy %.3f", time.perf_counter() - t0,
             clf.info["train_accuracy"])
    cams, labels = build_labels(clf.params, data.train, refine_cfg, jobs=jobs)
    affinities = np.stack([pamr_affinity(s.image) for s in data.train]).astype(np.float32)
    return PreparedData(data, labels, cams, clf, affinities)


def run_case(prepared: PreparedData, case: int, config: TrainConfig, seed: int,
             policy: str = "adaptive") -> tuple[dict, TrainResult]:
    spec = ABLATION_CASES[case]
    cfg = TrainConfig.from_dict({**asdict(config), "seed": seed, "ablation_case": case})
    t0 = time.perf_counter()
    result = train_mfnet(prepared.data.train, prepared.labels, cfg, spec,
                         affinities=prepared.affinities)
    preds = predict(result.params, prepared.data.test)
    gts = [s.gt_mask for s in prepared.data.test]
    report = evaluate(preds, gts, policy=policy)
    other = "max_over_thresholds" if policy == "adaptive" else "adaptive"
    f_other = float(np.mean([f_measure(p, g, policy=other) for p, g in zip(preds, gts)]))
    row = {"case": case, "seed": seed, "uses_df": spec.uses_df, "label_source": spec.label_source,
           "architecture": spec.architecture, "provenance": spec.provenance, **report.mean,
           F_POLICY_KEYS[other]: f_other}
    log.debug("case %d seed %d trained in %.1fs", case, seed, time.perf_counter() - t0)
    return row, result


F_POLICY_KEYS = {"adaptive": "f_beta_adaptive", "max_over_thresholds": "f_beta_max"}


def run_ablation(prepared: PreparedData, cases, config: TrainConfig, seeds=(0,),
                 policy: str = "adaptive") -> dict:
    """Train/evaluate each case for each seed; returns a Table-2-shaped report."""
    rows = []
    for case in cases:
        if case not in ABLATION_CASES:
            raise ConfigError(f"unknown ablation case {case}")
        for seed in seeds:
            row, _ = run_case(prepared, case, config, seed, policy)
            log.info("case %d seed %d: F=%.4f MAE=%.4f", case, seed, row["f_beta"], row["mae"])
            rows.append(row)
    return {"rows": rows, "summary": summarize(rows, "case")}


def summarize(rows: list[dict], key: str) -> list[dict]:
    out = []
    for value in sorted({r[key] for r in rows}):
        group = [r for r in rows if r[key] == value]
        entry = {key: value, "seeds": len(group)}
        for metric in ("mae", "f_beta", "s_alpha", "e_s", "f_beta_w", "f_beta_max", "f_beta_adaptive",
                       "mean_abs_p1_p2"):
            if metric in group[0]:
                entry[metric] = float(np.mean([r[metric] for r in group]))
        out.append(entry)
    return out


def sweep_delta(prepared: PreparedData, deltas, config: TrainConfig, seeds=(0,),
                policy: str = "adaptive") -> dict:
    """Case-9 training per delta; reports metrics and the final mean |P1 - P2| on the test split."""
    rows = []
    for delta in deltas:
        for seed in seeds:
            cfg = TrainConfig.from_dict({**asdict(config), "delta": float(delta), "ablation_case": 9})
            row, result = run_case(prepared, 9, cfg, seed, policy)
            row["delta"] = float(delta)
            row["mean_abs_p1_p2"] = filter_disagreement(result.params, prepared.data.test, cfg.net)
            log.info("delta %g seed %d: |P1-P2|=%.4f F=%.4f", delta, seed,
                     row["mean_abs_p1_p2"], row["f_beta"])
            rows.append(row)
    return {"rows": rows, "summary": summarize(rows, "delta")}


def write_jsonl(path, entries) -> None:
    with Path(path).open("a", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")
