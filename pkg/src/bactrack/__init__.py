"""bactrack: multi-template aerial tracking with mixed-temporal attention.

Inference engine for a tracker that keeps an online collection of target
appearance templates, fuses them through grouped mixed-temporal attention,
and decides per frame whether the collection should absorb the latest
appearance.  Ships with a synthetic-sequence harness, one-pass evaluation
metrics, and finite-difference gradient verification of every kernel.
"""

__version__ = "0.1.0"
