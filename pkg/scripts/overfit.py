"""Overfit the desk model on one synthetic scene and report held-out PSNR as training goes.

    python scripts/overfit.py --steps 2000 --eval-every 250 --out runs/overfit
"""

import argparse
import copy
import time

from h3r.config import RunConfig, TrainConfig
from h3r.metrics import evaluate
from h3r.scene import SyntheticSceneSpec, generate_scene
from h3r.training import Trainer


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0, help="scene seed")
    ap.add_argument("--eval-every", type=int, default=250)
    ap.add_argument("--out", default=None, help="run directory for metrics.csv and checkpoints")
    args = ap.parse_args()

    scene = generate_scene(SyntheticSceneSpec(seed=args.seed))
    cfg = RunConfig(train=TrainConfig(steps=args.steps, decay_until=max(args.steps, 101)))
    trainer = Trainer(cfg, [scene], args.out)
    print(f"step 0: held-out psnr {evaluate(trainer.model, [scene]).aggregate['psnr']:.2f} dB")
    trainer.model.train()
    start = time.perf_counter()

    def report(m):
        step = m["step"] + 1
        if step % args.eval_every and step != args.steps:
            return
        ema = copy.deepcopy(trainer.model)
        ema.load_state_dict(trainer.ema.averaged())
        raw = evaluate(trainer.model, [scene]).aggregate["psnr"]
        avg = evaluate(ema, [scene]).aggregate["psnr"]
        trainer.model.train()
        print(f"step {step}: held-out psnr {raw:.2f} dB (ema {avg:.2f}), train psnr {m['psnr_train']:.2f}, "
              f"{time.perf_counter() - start:.0f} s")

    trainer.run(callback=report)


if __name__ == "__main__":
    main()
