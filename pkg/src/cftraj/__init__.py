"""Counterfactual treatment-trajectory engine.

Learns confounding-robust sequence representations with a sampling-based
MMD balancing loss, predicts multi-step outcomes under alternative
treatment plans, and explains predictions via integrated gradients.
"""

__version__ = "0.1.0"
