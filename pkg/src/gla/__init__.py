"""Generative latent alignment for radar presence detection."""
