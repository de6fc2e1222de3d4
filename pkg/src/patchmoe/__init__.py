"""Patch-MoE Mamba building blocks."""
