"""Streaming few-step generation with an EMA-fused attention sink and reward-weighted distribution matching distillation."""

__version__ = "0.1.0"
