"""Spiking neural networks with binary {+1, -1} synapses.

Two training rules share one simulator: straight-through SGD on latent real
weights (:mod:`bisnn.train_st`) and mean-field Bernoulli natural-gradient
training with Gumbel-relaxed samples (:mod:`bisnn.train_bayes`).
"""

__version__ = "0.1.0"
