"""Bi-encoder alone vs multistage retrieval on the lossy synthetic corpus."""

import argparse
import json

from kbtqa.experiments import multistage_benefit


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--questions", type=int, default=200)
    p.add_argument("--triples", type=int, default=500)
    p.add_argument("--hash-dim", type=int, default=16, help="small values make the first stage lossy")
    p.add_argument("--first-stage-n", type=int, default=200)
    p.add_argument("--top-k", type=int, default=20)
    a = p.parse_args()
    r = multistage_benefit(a.seed, a.questions, a.triples, a.hash_dim, a.first_stage_n, a.top_k)
    print(json.dumps(r, indent=2))


if __name__ == "__main__":
    main()
