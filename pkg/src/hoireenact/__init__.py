"""Reference-object conditioning for video diffusion transformers at desk scale:
head-sliding rotary positions, hard/soft attention gating and an inpainting-style
condition unit, with a toy denoiser and synthetic hand-object clips to exercise them.
"""

__version__ = "0.1.0"
