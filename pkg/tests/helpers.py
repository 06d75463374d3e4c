"""Shared fixtures-as-functions for model-level tests."""
import numpy as np

from sdtrack import autodiff as ad
from sdtrack.nn import BatchNorm


def randomize_bn(model, rng):
    for _, m in model.named_modules():
        if isinstance(m, BatchNorm):
            n = m.buffers["running_mean"].shape[0]
            m.buffers["running_mean"][...] = rng.normal(0, 0.2, n)
            m.buffers["running_var"][...] = rng.uniform(0.5, 1.5, n)
            m.beta.data[...] = rng.normal(0, 0.2, n)


def event_like(rng, shape, density=0.3):
    vals = rng.choice(np.array([30, 60, 24, 19.2, 90]) / 255.0, size=shape) * 4
    return (vals * (rng.random(shape) < density)).astype(ad.get_default_dtype())


def toy_inputs(rng, cfg, B=2):
    z = event_like(rng, (cfg.T, B, 3, cfg.template_size, cfg.template_size))
    x = event_like(rng, (cfg.T, B, 3, cfg.search_size, cfg.search_size))
    return z, x
