"""Reduced-scale evidence run for the training-based gates.

Trains the tetromino_mini preset with I=3 and with I=0 on one seed, then
prints held-out ARI/MSE for both and the I=0-vs-I=3 raw-ELBO comparison.
Finishes in a few CPU-hours; a scaled-down rehearsal of gates 8 and 9.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

from acceptance_helpers import ensure_dataset, final_raw_elbo, train_and_score

from emorl.config import preset_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/mini_evidence")
    ap.add_argument("--steps", type=int, default=None, help="override total steps")
    args = ap.parse_args()
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)

    results = {}
    for label, curriculum, eval_steps in (
        ("I3", [(0, 3)], 3),
        ("I0", [(0, 0)], 0),
    ):
        cfg = preset_config("tetromino_mini")
        ensure_dataset(cfg, root)
        cfg.train.curriculum = curriculum
        outcome = train_and_score(
            cfg, root / label, args.seed, eval_steps=eval_steps,
            max_steps=args.steps,
        )
        results[label] = outcome
        print(f"{label}: ari={outcome.ari:.3f} raw_elbo={outcome.raw_elbo:.1f}")

    better = results["I3"].raw_elbo < results["I0"].raw_elbo
    print(f"refinement benefit (raw ELBO I3 < I0): {better}")


if __name__ == "__main__":
    main()
