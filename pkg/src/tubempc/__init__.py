"""Adaptive tube MPC for a quadrotor with online sparse residual identification."""

__version__ = "0.1.0"
