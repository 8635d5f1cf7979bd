"""Train every ablation row on one shared codec and report held-out losses.

    python3 scripts/ablation.py --steps 500 --sequences 60 --out results/ablation.json
"""
import argparse
import json
import logging
from pathlib import Path

import numpy as np

from worldmodel4d import world as W
from worldmodel4d.codec import Codec, codec_training_frames, pretrain_codec
from worldmodel4d.config import ablation_table, toy_config, with_train
from worldmodel4d.experiment import train_run
from worldmodel4d.rng import stream


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="results/ablation.json")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--sequences", type=int, default=60)
    p.add_argument("--codec-steps", type=int, default=600)
    p.add_argument("--rows", nargs="*", help="subset of row names, e.g. a/joint e/random")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = toy_config()
    seqs = W.make_sequences(cfg.world, args.sequences, seed=args.seed)
    n_train = int(round(len(seqs) * cfg.world.split_ratio))
    train, heldout = seqs[:n_train], seqs[n_train:]
    codec = Codec(cfg.codec, stream(args.seed, "codec-init"))
    rgb, dep = codec_training_frames(train)
    hr, hd = codec_training_frames(heldout)
    pretrain_codec(codec, np.concatenate([rgb, dep]), np.concatenate([hr, hd]), args.codec_steps,
                   stream(args.seed, "codec-data"), lr=cfg.codec.lr, batch=cfg.codec.batch)

    table = ablation_table()
    rows = args.rows or list(table)
    results = {}
    for name in rows:
        r = train_run(name, with_train(cfg, **table[name]), codec, train, heldout, args.steps)
        results[name] = {"heldout": r.heldout, "final_ma100": float(np.mean(r.totals[-100:])), "seconds": r.seconds}
        print(f"{name:22s} " + " ".join(f"{k}={v:.4f}" for k, v in r.heldout.items()), flush=True)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(results, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
