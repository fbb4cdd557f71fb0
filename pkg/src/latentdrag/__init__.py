"""Region-based drag editing on latent grids.

The engine moves, deforms, or rotates user-painted handle regions by
optimizing a latent code over a window of deterministic DDIM timesteps.
Each iteration matches features inside a scheduled intermediate target
region against warped reference features, with an L1 penalty keeping the
uneditable area anchored.
"""

__version__ = "0.1.0"
