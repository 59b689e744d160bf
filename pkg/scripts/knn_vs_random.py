"""Dev R@5 after training with kNN vs random negatives, over several seeds."""

import argparse
import json

from kbtqa.experiments import knn_vs_random


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--triples", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--negatives", type=int, default=25)
    a = p.parse_args()
    print(json.dumps(knn_vs_random(range(a.seeds), a.triples, a.lr, a.negatives), indent=2))


if __name__ == "__main__":
    main()
