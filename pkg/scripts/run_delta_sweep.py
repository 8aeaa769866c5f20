"""Sweep the self-supervision weight and report filter disagreement per value.

    python scripts/run_delta_sweep.py --deltas 2,0,-2 --seeds 3
"""
import argparse
import json
import logging
from dataclasses import asdict
from pathlib import Path

from mfnet.trainer import TrainConfig, prepare, sweep_delta


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--deltas", default="2,0,-2")
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--iters", type=int, default=None, help="saliency iterations")
    ap.add_argument("--n-train", type=int, default=100)
    ap.add_argument("--n-test", type=int, default=50)
    ap.add_argument("--n-classifier", type=int, default=12800)
    ap.add_argument("--classifier-iters", type=int, default=16000)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="results/delta_sweep.json")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = TrainConfig(iters_classifier=args.classifier_iters)
    if args.iters is not None:
        cfg = TrainConfig(iters_classifier=args.classifier_iters, iters_saliency=args.iters)
    prepared = prepare(cfg, n_train=args.n_train, n_test=args.n_test, n_classifier=args.n_classifier,
                       jobs=args.jobs)
    deltas = [float(d) for d in args.deltas.split(",")]
    report = sweep_delta(prepared, deltas, cfg, seeds=tuple(range(args.seeds)))
    report["config"] = asdict(cfg)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True))
    for s in report["summary"]:
        print(f"delta {s['delta']:+g}: mean |P1-P2|={s['mean_abs_p1_p2']:.4f} F={s['f_beta']:.4f}")


if __name__ == "__main__":
    main()
