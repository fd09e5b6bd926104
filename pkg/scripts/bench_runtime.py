"""Wall time of IRLS and dynaweight registration on a 2000-point tree scene."""

import argparse
from dataclasses import dataclass

import numpy as np

from cfpnp.dynaweight import dynaweight_register
from cfpnp.experiments import timed
from cfpnp.solvers import irls_register
from cfpnp.spatial import build_index
from cfpnp.synthlab import DisturbanceSpec, make_tree_scene, perturb_pose


@dataclass(frozen=True)
class BenchConfig:
    trials: int = 8
    repeats: int = 5
    branches: int = 8
    sigma_translation: float = 10.0
    sigma_angle: float = 5.0
    seed: int = 0


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--trials", type=int, default=BenchConfig.trials)
    p.add_argument("--repeats", type=int, default=BenchConfig.repeats)
    args = p.parse_args()
    cfg = BenchConfig(trials=args.trials, repeats=args.repeats)

    sc = make_tree_scene(cfg.branches, seed=cfg.seed)
    index = build_index(sc.targets2d)
    spec = DisturbanceSpec(cfg.sigma_translation, cfg.sigma_angle)
    irls_register(sc.source3d, index, sc.camera, sc.ground_truth_pose)  # compile
    plain, dyn = [], []
    for trial in range(cfg.trials):
        T0 = perturb_pose(sc.ground_truth_pose, spec, trial)
        plain.append(timed(irls_register, sc.source3d, index, sc.camera, T0, repeats=cfg.repeats)[0])
        dyn.append(timed(dynaweight_register, sc.source3d, index, sc.camera, T0, labels=sc.labels,
                         repeats=cfg.repeats)[0])
    print(f"points {len(sc.source3d)}, targets {len(sc.targets2d)}")
    print(f"irls       median {np.median(plain):7.1f} ms  max {np.max(plain):7.1f} ms")
    print(f"dynaweight median {np.median(dyn):7.1f} ms  max {np.max(dyn):7.1f} ms")


if __name__ == "__main__":
    main()
