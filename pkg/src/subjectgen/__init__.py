"""Subject-driven image generation with a pair of small diffusion models.

A context model renders a scene for a prompt; a subject model, fine-tuned
on masked reference images, re-denoises an inverted copy of that scene so
the subject's identity lands in the context's layout. Everything here is
sized to run on CPU: pixel-space 32x32 latents, a frozen toy text encoder,
and synthetic shape datasets with analytic ground-truth masks.
"""

__version__ = "0.1.0"
