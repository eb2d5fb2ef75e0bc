"""Print the CORAL-vs-baseline tail metrics across seeds.

    python scripts/directional_effect.py [--steps 5000] [--reduction mean] [--latent-condition label]
"""

import argparse
import time
from dataclasses import fields, replace

from coral.experiments import DirectionalSetup, compare


def main():
    parser = argparse.ArgumentParser(formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    base = DirectionalSetup()
    for f in fields(DirectionalSetup):
        parser.add_argument("--" + f.name.replace("_", "-"), type=type(getattr(base, f.name)),
                            default=getattr(base, f.name))
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = vars(parser.parse_args())
    seeds = args.pop("seeds")
    setup = replace(base, **args)
    start = time.perf_counter()
    rows = compare(setup, seeds)
    print(f"{'seed':>4} {'arm':>8} {'tail_purity':>12} {'tail_prec':>10} {'tail_recall':>12} {'silhouette':>11} {'l_diff':>8}")
    for seed, coral, base_arm in rows:
        for name, r in (("coral", coral), ("baseline", base_arm)):
            sil = "n/a" if r.silhouette is None else f"{r.silhouette:.3f}"
            print(f"{seed:>4} {name:>8} {r.tail_purity:>12.3f} {r.tail_precision:>10.3f} "
                  f"{r.tail_recall:>12.3f} {sil:>11} {r.final_l_diff:>8.4f}")
    purity_wins = sum(c.tail_purity > b.tail_purity for _, c, b in rows)
    recall_wins = sum(c.tail_recall > b.tail_recall for _, c, b in rows)
    print(f"CORAL wins: tail purity {purity_wins}/{len(rows)}, tail recall {recall_wins}/{len(rows)}")
    print(f"elapsed {time.perf_counter() - start:.1f} s")


if __name__ == "__main__":
    main()
