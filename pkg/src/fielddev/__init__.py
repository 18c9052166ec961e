"""Field-development optimization at desk scale.

A two-phase reservoir simulator drives a sequential drilling environment;
policies are trained with PPO on a convolutional network and benchmarked
against a hybrid PSO-MADS derivative-free optimizer.
"""

__version__ = "0.1.0"
