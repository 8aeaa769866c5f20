"""Train every ablation case on the desk corpus and write a JSON + CSV table.

    python scripts/run_ablation.py --seeds 3 --out results/ablation.json

Defaults follow TrainConfig (64x64, 3000 saliency iterations); expect about
two minutes per (case, seed) on one core for the filter-based cases.
"""
import argparse
import csv
import json
import logging
from dataclasses import asdict
from pathlib import Path

from mfnet.trainer import ABLATION_CASES, TrainConfig, prepare, run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cases", default=",".join(map(str, sorted(ABLATION_CASES))))
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--iters", type=int, default=None, help="saliency iterations")
    ap.add_argument("--n-train", type=int, default=100)
    ap.add_argument("--n-test", type=int, default=50)
    ap.add_argument("--n-classifier", type=int, default=12800)
    ap.add_argument("--classifier-iters", type=int, default=16000)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="results/ablation.json")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = TrainConfig(iters_classifier=args.classifier_iters)
    if args.iters is not None:
        cfg = TrainConfig(iters_classifier=args.classifier_iters, iters_saliency=args.iters)
    prepared = prepare(cfg, n_train=args.n_train, n_test=args.n_test, n_classifier=args.n_classifier,
                       jobs=args.jobs)
    cases = [int(c) for c in args.cases.split(",")]
    report = run_ablation(prepared, cases, cfg, seeds=tuple(range(args.seeds)))
    report["config"] = asdict(cfg)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True))
    with out.with_suffix(".csv").open("w", newline="") as fh:
        keys = list(report["summary"][0])
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(report["summary"])
    for s in report["summary"]:
        print(f"case {s['case']}: F={s['f_beta']:.4f} MAE={s['mae']:.4f} S={s['s_alpha']:.4f} "
              f"E={s['e_s']:.4f} Fw={s['f_beta_w']:.4f}")


if __name__ == "__main__":
    main()
