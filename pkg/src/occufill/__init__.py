"""occufill: promptable completion of occluded subjects.

Library + CLI: a synthetic occlusion dataset forge, a prompt-conditioned
coarse diffusion generator with a zero-initialized control branch,
invisible-mask prediction, composite-then-refine inpainting, and a full
metric harness with an HTTP service for the companion UI.
"""
import torch as _torch

_torch.set_num_threads(max(1, _torch.get_num_threads()))

__version__ = "0.1.0"
