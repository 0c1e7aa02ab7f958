"""Train the desk-scale model that ships as artifacts/desk_model.pfrg.

2,000 synthetic scenes (2-4 views each, suite seed 1) are keypoint-sampled
once and fed to the default 4-block, 128-wide velocity field for 40 epochs.
On a single CPU core this takes roughly three hours. Interrupt it and
rerun with --resume to continue from the last per-epoch checkpoint.

    python demos/train_desk_model.py [--epochs 40] [--out artifacts/desk_model.pfrg]
"""

import argparse
import logging
import time
from pathlib import Path

from flowreg import ModelConfig, SamplingConfig, TrainConfig, save_model, synthetic_suite, train
from flowreg.training import samples_from_views

TRAIN_SEED = 1
N_SCENES = 2000
SAMPLING = SamplingConfig(v_d=0.2, v_c=0.25, alpha_s=0.08, r_s=1.0)

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--epochs", type=int, default=40)
parser.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "artifacts" / "desk_model.pfrg"))
parser.add_argument("--resume", action="store_true")
args = parser.parse_args()
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

t0 = time.time()
samples = []
for i, scene in enumerate(synthetic_suite(TRAIN_SEED, N_SCENES)):
    # one scene at a time keeps only keypoints in memory, not the dense views
    samples += samples_from_views([scene.views], [scene.gt_poses], SAMPLING, start_id=i)
print(f"sampled {len(samples)} scenes, {sum(s.num_tokens for s in samples)} keypoints "
      f"in {time.time() - t0:.0f} s")

out = Path(args.out)
out.parent.mkdir(parents=True, exist_ok=True)
cfg = TrainConfig(epochs=args.epochs, checkpoint_every=206, checkpoint_path=str(out) + ".train")
resume = cfg.checkpoint_path if args.resume and Path(cfg.checkpoint_path).exists() else None


def progress(step, epoch, loss):
    if step % 100 == 0:
        print(f"step {step:5d}  epoch {epoch:2d}  loss {loss:.4f}  {time.time() - t0:.0f} s", flush=True)


result = train(samples, ModelConfig(), cfg, resume_from=resume, callback=progress)
save_model(out, result.model, {"suite_seed": TRAIN_SEED, "n_scenes": N_SCENES, "epochs": args.epochs,
                               "steps": result.step})
print(f"wrote {out} after {result.step} steps")
