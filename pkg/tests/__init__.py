"""
CHyVAE Test Suite

Oracle tests for the linear algebra, distributions, autodiff, model, losses,
dataset, metric, trainer and command-line layers.
"""
