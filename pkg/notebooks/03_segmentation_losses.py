"""
Segmentation losses and metrics
===============================

Compare cross entropy, focal loss, the selective-sensitivity (SS) loss and
their combination on a prediction that is right except for one blob.
"""

import numpy as np

from diffseg.data import one_hot_mask, synth_image
from diffseg.gradcore import Tensor
from diffseg.seglosses import (MultiLossConfig, ce_loss, focal_loss, normalized_deviation,
                               segmentation_metrics, ss_loss, ssfl_loss)

rng = np.random.default_rng(3)
_, labels = synth_image(32, rng)
y = one_hot_mask(labels, 3)[None]

# a confident prediction that copies the mask but swaps classes in one square
pred = 0.9 * y + 0.05
pred[:, :, 10:16, 10:16] = pred[:, ::-1, 10:16, 10:16]
p = Tensor(pred / pred.sum(axis=1, keepdims=True))

print("ce   ", ce_loss(y, p).item())
print("focal", focal_loss(y, p).item())
print("ss   ", ss_loss(y, p).item())
print("ss+fl", ssfl_loss(y, p, MultiLossConfig(lambda_fl=1.0)).item())

# the normalised deviation map is large only where the prediction is wrong
e = normalized_deviation(y[:, 0], p.data[:, 0]).data[0]
print("mean deviation inside the swapped square:", e[10:16, 10:16].mean())
print("mean deviation elsewhere:", (e.sum() - e[10:16, 10:16].sum()) / (e.size - 36))

m = segmentation_metrics(y, p.data)
print({k: round(m[k], 4) for k in ("accuracy", "precision", "recall", "f1")})
