"""Differentiable top-k subset sampling for interpretable graph QA.

The package is organized as:

* :mod:`sgqa.subsets`    -- exact k-subset distribution math.
* :mod:`sgqa.estimators` -- discrete gradient estimators (STE, IMLE,
  AIMLE, SIMPLE, Gumbel SoftSub-ST).
* :mod:`sgqa.autodiff` / :mod:`sgqa.nn` -- minimal reverse-mode tape and
  the neural building blocks (dense, GAT, Adam).
* :mod:`sgqa.model`      -- the interpretable graph-QA model and its
  training / evaluation loops.
* :mod:`sgqa.data`       -- synthetic scene-graph QA corpus generator.
* :mod:`sgqa.metrics`    -- accuracy and token co-occurrence metrics.
* :mod:`sgqa.preference` -- tie-aware Bradley-Terry fitting and rank
  correlations.
* :mod:`sgqa.evalserver` -- pairwise human-evaluation HTTP backend.
* :mod:`sgqa.cli`        -- command-line pipeline entry point.
"""

from .subsets import (
    KSubsetDistribution,
    enumerate_ksubsets,
    exact_marginals,
    gumbel_noise,
    make_rng,
    marginals_jacobian,
    perturb_and_map,
    subset_logprob,
    topk_map,
)
from .estimators import (
    AimleState,
    EstimatorConfig,
    Method,
    RelaxedMask,
    aimle_update,
    estimate_true_grad_oracle,
    gumbel_softsub_st,
    imle_grad,
    simple_grad,
    ste_grad,
)

__version__ = "0.1.0"
