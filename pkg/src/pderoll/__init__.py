"""pderoll: adaptive-rollout PDE forecasting with a conditional diffusion surrogate.

Subpackages follow the pipeline: sim (reference solvers) -> data (storage,
normalization, segmentation) -> net (denoiser with exact gradients) ->
diffusion (objectives, training, DDIM sampling) -> planner (uncertainty and
step selection) -> rollout (autoregressive prediction and metrics) -> cli.
"""

__version__ = "0.1.0"
