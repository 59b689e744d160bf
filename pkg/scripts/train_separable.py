"""Train the linear bi-encoder on the separable corpus and compare with raw hashing."""

import argparse
import json
from dataclasses import fields

from kbtqa.experiments import SeparableSetup, trained_vs_untrained


def main():
    p = argparse.ArgumentParser(description=__doc__)
    for f in fields(SeparableSetup):
        p.add_argument("--" + f.name.replace("_", "-"), type=type(f.default), default=f.default)
    a = p.parse_args()
    setup = SeparableSetup(**{f.name: getattr(a, f.name) for f in fields(SeparableSetup)})
    print(json.dumps(trained_vs_untrained(setup), indent=2))


if __name__ == "__main__":
    main()
