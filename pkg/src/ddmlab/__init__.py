"""Desk-scale diffusion lab: toy DDPM/DDIM models and few-step MMD finetuning."""

__version__ = "0.1.0"
