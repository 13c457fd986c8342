"""
Train a small detector and run it
=================================

About ten minutes of CPU training on a phantom set, then detection on held-out
frames with both decision logics.
"""

import copy
import tempfile
from pathlib import Path

from weakdet import phantom, pipeline
from weakdet.config import DataConfig, ModelConfig, RunConfig, TrainConfig

out = Path(tempfile.mkdtemp(prefix="weakdet_demo_"))
manifest, _ = phantom.generate(phantom.PhantomConfig(n_subjects=4, frames_per_subject=150,
                                                     image_h=96, image_w=96, seed=3),
                               out / "data")
ds = phantom.load(manifest)
train, val, test = phantom.random_split(ds.keys(), seed=0)
print("train / val / test:", len(train), len(val), len(test))

# a quarter-width network keeps this to about ten minutes on one core
cfg = RunConfig(data=DataConfig(dataset=str(out / "data"), image_size=96),
                model=ModelConfig(channel_scale=0.25),
                train=TrainConfig(epochs=60))
result = pipeline.train(cfg, ds, train, val, out_dir=out / "run", progress=print)
print("detection loss: %.3f -> %.3f" % (result.initial_loss, result.final_loss))
print("selected epoch", result.best_epoch)
print("calibrated beta: %.3f, %.3f" % (result.detector.post.beta_x, result.detector.post.beta_y))

# OR reports a target when either the mask or the classifier sees one,
# AND needs both: fewer false alarms, possibly more misses
det = result.detector
for logic in ("or", "and"):
    post = copy.deepcopy(det.post)
    post.decision_logic = logic
    rep, _, _ = pipeline.evaluate_keys(det, ds, test, post=post)
    p, r = (("%.3f" % v) if v is not None else "undefined" for v in (rep.precision, rep.recall))
    print(f"{logic:>3}: precision {p} recall {r} (tp {rep.tp}, "
          f"fp {rep.fp}, fn {rep.fn})")

# the checkpoint restores the whole pipeline
again = pipeline.Detector.load(out / "run" / "checkpoint.wbx")
x = pipeline.stack_inputs(ds, test[:4], again.frame_mode)
for key, d in zip(test[:4], again.detect(x)):
    print(key, "present" if d.present else "absent",
          "" if not d.present else "center (%.1f, %.1f) size %.1f x %.1f" % (*d.center, *d.size))
