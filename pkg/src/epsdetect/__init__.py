"""Expected-perturbation-score (EPS) adversarial detection on synthetic worlds.

The package implements the full desk-scale detection stack:

- ``schedule``: variance-preserving forward-diffusion noise schedule and
  transition-kernel sampler.
- ``analytic``: closed-form Gaussian-world oracle (analytic scores, EPS mean
  shift / variance, noncentral chi-square kernel-exceedance probability).
- ``scorenet``: small trainable score network fit by denoising score
  matching, with built-in reverse-mode gradients.
- ``eps``: the EPS statistic and its single-timestep / norm baselines.
- ``mmd``: Gaussian and deep kernels, biased MMD estimators, and deep-kernel
  training by the test-power criterion.
- ``attacks``: toy differentiable classifier and the FGSM/BIM/PGD/MIM family.
- ``harness``: end-to-end detection pipeline, AUROC, ablation sweeps, CLI.

All randomness flows through explicit ``numpy.random.Generator`` handles
(PCG64); identical seeds give bit-identical results. All arithmetic is
float64.
"""

from epsdetect.schedule import NoiseSchedule
from epsdetect.analytic import GaussianWorld, EpsTheory
from epsdetect.eps import TimeGrid, ScoreSource, EpsVector
from epsdetect.mmd import KernelSpec

__all__ = [
    "NoiseSchedule",
    "GaussianWorld",
    "EpsTheory",
    "TimeGrid",
    "ScoreSource",
    "EpsVector",
    "KernelSpec",
]

__version__ = "0.1.0"
