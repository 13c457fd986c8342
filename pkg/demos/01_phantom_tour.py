"""
A tour of the phantom dataset
=============================

Generate a small synthetic scan set, load it back and look at what a
frame, its annotation and the stacked network input contain.
"""

import tempfile
from pathlib import Path

import numpy as np

from weakdet import phantom
from weakdet.pipeline import overlay, write_ppm
from weakdet.preprocess import rasterize_mask, stack_frames

out = Path(tempfile.mkdtemp(prefix="weakdet_demo_"))

# three subjects, 60 frames each, 96x96 pixels
cfg = phantom.PhantomConfig(n_subjects=3, frames_per_subject=60, image_h=96, image_w=96,
                            seed=7)
manifest, _ = phantom.generate(cfg, out / "data")
ds = phantom.load(manifest)
print("sequences:", ds.subjects)
print("frames:", len(ds.keys()), "pixel pitch (mm):", ds.mm_per_pixel)

# about a fifth of the frames show no target
absent = [k for k, box in ds.annotations.items() if box is None]
print("absent frames:", len(absent))

# one present frame, its box and the rasterized weak mask
key = next(k for k, box in ds.annotations.items() if box is not None)
frame = ds.sequences[key[0]][key[1]]
box = ds.annotations[key]
mask = rasterize_mask(box, ds.image_h, ds.image_w)
print("frame", key, "box", box, "mask area", int(mask.sum()))
print("mean intensity inside / outside the box: %.1f / %.1f"
      % (frame[mask > 0].mean(), frame[mask == 0].mean()))

# the network sees frames t-2, t-1, t as three channels in [0, 1)
x = stack_frames(ds.sequences[key[0]], key[1])
print("stacked input", x.shape, x.dtype, "range", x.min(), x.max())

# green ground-truth outline burned into the gray frame
write_ppm(out / "frame_with_box.ppm", overlay(frame, None, box))
print("overlay written to", out / "frame_with_box.ppm")

# consecutive annotations drift by at most a pixel or two
seq = ds.subjects[0]
centers = np.array([ds.annotations[(seq, t)].center for t in range(60)
                    if ds.annotations[(seq, t)] is not None])
steps = np.abs(np.diff(centers, axis=0)).max()
print("largest per-frame box step in", seq, ":", steps, "px")
