"""Compare the five controllers across the four conditions.

    python3 demos/controller_comparison.py [--quick] [--episodes N]

Decomposed applies observation recovery only when the aleatoric trigger fires
and action dampening only when the epistemic trigger fires. Total-U applies
both whenever either fires, which dampens the policy through every sensor-noise
step.
"""

import argparse

from uqdecomp import harness as H
from uqdecomp import mlp


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--episodes", type=int, default=500)
    args = ap.parse_args()

    cfg = mlp.TrainConfig(epochs=40) if args.quick else None
    models, _ = H.calibrate(seed=0, k=3 if args.quick else 5, train_cfg=cfg)
    table, _ = H.run_experiment(H.GridSpec(), models, master_seed=0, episodes=args.episodes)
    print(table.format())
    for cond in ("sensor", "dynamics", "compound"):
        d, t = table.get("decomposed", cond), table.get("total_u", cond)
        print(f"{cond:9s} decomposed - total-U: {100 * (d.success_rate - t.success_rate):+.1f} pp")


if __name__ == "__main__":
    main()
