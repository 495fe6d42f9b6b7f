"""The forward process and the ancestral sampler on a scalar latent.

No training: the noise predictor here is an oracle that knows z0, so the
sampler must walk back to it exactly.  Run with ``python3 demos/diffusion_basics.py``.
"""

import numpy as np
import torch

from sgdiff.diffusion import make_schedule, p_sample_loop, q_sample

schedule = make_schedule(200, 1e-4, 0.08)
print("alpha_bar at t=1, 50, 100, 200:", schedule.alpha_bar[[0, 49, 99, 199]].round(4))

# q(z_t | z0) in one shot matches t single steps.
z0 = torch.full((10_000, 1), 1.5, dtype=torch.float64)
g = torch.Generator().manual_seed(0)
direct = q_sample(z0, 60, torch.randn(z0.shape, generator=g, dtype=torch.float64), schedule)
stepped = z0.clone()
for t in range(60):
    beta = schedule.betas[t]
    stepped = np.sqrt(1 - beta) * stepped + np.sqrt(beta) * torch.randn(z0.shape, generator=g, dtype=torch.float64)
print("one-shot mean/var: %.4f %.4f" % (direct.mean(), direct.var()))
print("stepped  mean/var: %.4f %.4f" % (stepped.mean(), stepped.var()))
print("closed form:       %.4f %.4f" % (np.sqrt(schedule.alpha_bar[59]) * 1.5, 1 - schedule.alpha_bar[59]))

# An oracle eps predictor that knows the answer.
target = torch.tensor([[0.7], [-1.2], [2.0]], dtype=torch.float64)


def oracle(z, t):
    ab = torch.as_tensor(schedule.alpha_bar[t - 1]).reshape(-1, 1)
    return (z - ab.sqrt() * target) / (1 - ab).sqrt()


out = p_sample_loop(oracle, target.shape, schedule, torch.Generator().manual_seed(1), dtype=torch.float64)
print("recovered:", out.flatten().numpy().round(6), "target:", target.flatten().numpy())
