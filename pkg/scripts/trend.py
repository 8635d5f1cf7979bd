"""Desk-scale training trend: all four optimization modes plus the plain-head
baseline, followed by the controllability probe. Writes a JSON summary.

    python3 scripts/trend.py --out results/trend.json [--steps 2000] [--sequences 200]
"""
import argparse
import json
import logging
from pathlib import Path

from worldmodel4d.experiment import controllability, loss_reduction, moving_average, run_trend


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="results/trend.json")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--sequences", type=int, default=200)
    p.add_argument("--codec-steps", type=int)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    res = run_trend(sequences=args.sequences, steps=args.steps, codec_steps=args.codec_steps, seed=args.seed)
    ctrl = controllability(res.runs["joint"].trainer, res.heldout[0].rgb[0])
    summary = {
        "config_hash": res.cfg.hash(),
        "codec_heldout_mse": res.codec_history,
        "runs": {name: {"seconds": r.seconds, "reduction": loss_reduction(r.totals),
                        "ma10_first": float(moving_average(r.totals)[0]),
                        "ma10_last": float(moving_average(r.totals)[-1]),
                        "ma100_last": float(moving_average(r.totals, 100)[-1]),
                        "heldout": r.heldout}
                 for name, r in res.runs.items()},
        "controllability": {k: v for k, v in ctrl.items() if k != "frames"},
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(json.dumps(summary, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
