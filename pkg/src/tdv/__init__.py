"""Total deep variation toolkit: learned regularizer, unrolled gradient
flows, sampled optimal-control training, and post-hoc analyses."""

__version__ = "0.1.0"
