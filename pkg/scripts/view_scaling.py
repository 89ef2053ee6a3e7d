"""Train with a variable number of context views, then score the same targets with 2, 3 and 4 views.

    python scripts/view_scaling.py --steps 1000
"""

import argparse

from h3r.config import RunConfig, TrainConfig
from h3r.metrics import evaluate
from h3r.scene import SyntheticSceneSpec, generate_scene
from h3r.training import Trainer


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--max-context", type=int, default=4)
    args = ap.parse_args()

    n = args.max_context
    scene = generate_scene(SyntheticSceneSpec(seed=args.seed, n_context=n, n_target=2))
    cfg = RunConfig(train=TrainConfig(steps=args.steps, decay_until=max(args.steps, 101), min_context=2, max_context=n))
    trainer = Trainer(cfg, [scene])
    trainer.run()
    for k in range(2, n + 1):
        report = evaluate(trainer.model, [scene], bucket="views", n_context=k)
        agg = report.aggregate
        print(f"{k} context views: psnr {agg['psnr']:.2f} dB, ssim {agg['ssim']:.4f}")


if __name__ == "__main__":
    main()
