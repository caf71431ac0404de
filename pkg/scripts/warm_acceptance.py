"""Pre-populate the acceptance artifact cache (hours on a small CPU box).

Stages print as they complete; rerunning skips finished artifacts.
"""

import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

import torch

torch.set_num_threads(2)

from acceptance_support import (
    DIGITS,
    TEXTURES,
    baseline_point,
    condensed_run,
    desk_scorer,
    independent_matching_baseline,
    joint_run,
    plain_classifier,
    tradeoff_point,
)

SWEEP_LAMBDAS = (0.0, 0.3, 1.0, 3.0)
SIDE_LAMBDAS = (1.0, 2.0)
STRIPE_LAMBDA = 2.0
CONDENSE_LAMBDAS = (0.0, 1.0, 4.0)


def stage(name, fn):
    t0 = time.time()
    fn()
    print(f"[warm] {name}: done in {time.time() - t0:.0f}s", flush=True)


def main():
    stage("scorer", desk_scorer)
    for seed in (0, 1, 2):
        stage(f"plain_textures_seed{seed}", lambda s=seed: plain_classifier(TEXTURES, s))
        stage(f"joint_textures_l0_seed{seed}", lambda s=seed: joint_run(TEXTURES, 0.0, s))
    for lam in SWEEP_LAMBDAS:
        stage(f"joint_digits_l{lam}", lambda l=lam: joint_run(DIGITS, l, 0))
        stage(f"joint_textures_l{lam}", lambda l=lam: joint_run(TEXTURES, l, 0))
    for lam in SIDE_LAMBDAS:
        stage(f"joint_side_by_side_l{lam}", lambda l=lam: joint_run("side_by_side", l, 0))
    stage("stripes_run", lambda: joint_run("stripes", STRIPE_LAMBDA, 0))
    stage("stripes_tradeoff", lambda: tradeoff_point("stripes", STRIPE_LAMBDA, 0))
    for lam in SWEEP_LAMBDAS:
        stage(f"tradeoff_textures_l{lam}", lambda l=lam: tradeoff_point(TEXTURES, l, 0))
    for method, knob in (("mse_simplifier", 0.05), ("mse_simplifier", 0.5),
                         ("gaussian_blur", 1.0), ("gaussian_blur", 2.0),
                         ("jpeg", 10.0), ("jpeg", 40.0)):
        stage(f"baseline_{method}_{knob}", lambda m=method, k=knob: baseline_point(m, TEXTURES, k, 0))
    for lam in CONDENSE_LAMBDAS:
        stage(f"condense_l{lam}", lambda l=lam: condensed_run(l))
    stage("condense_anchor", independent_matching_baseline)
    print("[warm] all artifacts ready", flush=True)


if __name__ == "__main__":
    main()
