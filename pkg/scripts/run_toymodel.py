"""Square toy model table: TRE / Angle / Dist per edge point count and solver."""

import argparse
from dataclasses import replace
from pathlib import Path

from cfpnp import io
from cfpnp.experiments import ToyConfig, run_toymodel


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--trials", type=int, default=ToyConfig.trials)
    p.add_argument("--seed", type=int, default=ToyConfig.seed)
    p.add_argument("--out", type=Path, default=Path("results/toymodel.json"))
    args = p.parse_args()

    cfg = replace(ToyConfig(), trials=args.trials, seed=args.seed)
    rows = run_toymodel(cfg)
    print(f"{'solver':<14}" + "".join(f"{n:>8}" for n in cfg.edge_counts) + "   (mean TRE, px)")
    for s in cfg.solvers:
        by_n = {r["count"]: r["tre"] for r in rows if r["solver"] == s}
        print(f"{s:<14}" + "".join(f"{by_n[n]:8.3f}" for n in cfg.edge_counts))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    io.dump_json(args.out, {"config": cfg, "rows": rows})


if __name__ == "__main__":
    main()
