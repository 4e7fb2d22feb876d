"""Multi-channel speech enhancement toolkit.

Two-stage 2-D convolutional time-frequency feature fusion in front of a
causal TCN complex-mask estimator, trained with an SI-SNR loss plus a
frozen acoustic-model auxiliary loss, with shoebox room simulation and
evaluation tooling to exercise the whole chain at desk scale.
"""

__version__ = "0.1.0"
