"""Camera-based IV drip monitoring: a from-scratch convolutional drop detector,
synthetic training data, a debounced drop counter and a multi-stream engine."""

__version__ = "0.1.0"
