"""
Noise schedule, forward process and P2 weights
==============================================

Inspect the linear beta schedule, noise an image at a few timesteps and undo
one step with the true noise.
"""

import numpy as np

from diffseg import diffusion
from diffseg.data import synth_image
from diffseg.schedule import build_linear_schedule, p2_weight, posterior_mean_coeffs

s = build_linear_schedule(T=1000, beta_start=1e-4, beta_end=0.02, k=1.0, gamma_p2=1.0)

# alpha_bar and the signal-to-noise ratio fall with t; the P2 weight rises,
# so training emphasises the noisy steps where coarse content is decided
for t in (1, 10, 100, 500, 1000):
    print(f"t={t:4d}  alpha_bar={s.alpha_bar[t]:.5f}  snr={s.snr[t]:10.3e}  "
          f"p2 weight={p2_weight(s, t):.5f}")

rng = np.random.default_rng(0)
image, _ = synth_image(64, rng)
x0 = diffusion.to_model_space(image[None])
eps = rng.standard_normal(x0.shape)
for t in (10, 250, 1000):
    xt = diffusion.forward_sample(x0, t, eps, s)
    corr = np.corrcoef(xt.ravel(), x0.ravel())[0, 1]
    print(f"t={t:4d}  correlation with the clean image {corr:.3f}")

# one reverse step fed the true noise lands on the posterior mean
t = 250
xt = diffusion.forward_sample(x0, t, eps, s)
cx, c0 = posterior_mean_coeffs(s, t)
step = diffusion.reverse_step(xt, t, eps, np.zeros_like(xt), s)
print("reverse step vs posterior mean:", np.max(np.abs(step - (cx * xt + c0 * x0))))
