"""Rotation/translation duality sweep over the minimum depth ratio."""

import argparse
from pathlib import Path

from cfpnp import io
from cfpnp.experiments import AmbiguityConfig, run_ambiguity


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", type=Path, default=Path("results/ambiguity.json"))
    args = p.parse_args()

    cfg = AmbiguityConfig()
    rows = run_ambiguity(cfg)
    for r in rows:
        if r["error"]:
            print(f"ratio {r['depth_ratio']:5g}: {r['error']}")
        else:
            print(f"ratio {r['depth_ratio']:5g}: residual/displacement {r['mean_ratio']:.4f}")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    io.dump_json(args.out, {"config": cfg, "rows": rows})


if __name__ == "__main__":
    main()
