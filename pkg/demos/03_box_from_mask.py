"""
From a confidence mask to a box
===============================

The post-processor turns a soft mask into a center (confidence-weighted
mean of the supra-threshold pixels) and a box whose sides are a scale
factor times the weighted spread.
"""

import math

import numpy as np

from weakdet.postprocess import (PostprocessConfig, calibrate_betas, detect, weighted_center,
                                 weighted_std, BoundingBox)

# a blurry rectangular blob, as a box-trained network tends to produce
yy, xx = np.mgrid[0:64, 0:64]
conf = 1 / (1 + np.exp(-(8 - np.maximum(np.abs(xx - 30) / 1.5, np.abs(yy - 22)))))

c = weighted_center(conf, 0.5)
s = weighted_std(conf, 0.5, c)
print("center (index coordinates): (%.2f, %.2f)" % c)
print("weighted spread: (%.2f, %.2f)" % s)

# a uniform box of width W has spread W / sqrt(12), hence the default factor
d = detect(conf, PostprocessConfig())
print("default factor %.3f -> box %s" % (math.sqrt(12), d.box))

# fit the factors from masks with known boxes instead
masks, boxes = [], []
for w, h in [(10, 6), (16, 12), (24, 8)]:
    m = np.zeros((64, 64))
    m[20:20 + h, 10:10 + w] = 0.9
    masks.append(m)
    boxes.append(BoundingBox(10, 20, 10 + w, 20 + h))
print("calibrated factors: (%.3f, %.3f)" % calibrate_betas(masks, boxes))

# raising the threshold shrinks the supra-threshold set
for thr in (0.3, 0.5, 0.7, 0.9):
    print("threshold %.1f -> %d pixels" % (thr, detect(conf, PostprocessConfig(
        sigmoid_threshold=thr)).k))
