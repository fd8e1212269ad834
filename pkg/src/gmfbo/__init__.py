"""Guided multi-fidelity Bayesian optimization for PD controller tuning.

Subpackages: kernel (multi-source covariance), gp (exact GP regression),
plant (simulated servo and metrics), correction (twin-correction model),
acquisition (cost-aware expected improvement), optimizers (the main loop and
baselines), bench (Monte Carlo harness), cli (command-line entry points).
"""

__version__ = "0.1.0"
