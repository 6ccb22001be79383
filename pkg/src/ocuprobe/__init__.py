"""Ocular probe-response impairment screening: simulation, features, learners and evaluation."""

__version__ = "0.1.0"
