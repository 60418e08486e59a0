"""Continual adversarial reinforcement learning for FDIA detection."""
