"""Extreme-scale texture classification at desk scale.

Scale proposals over an image pyramid, sparse-coding scale-boundary
regrouping, a GA-trained trio of small conv nets, Fisher-vector encoding
and SVM voting, plus a synthetic texture generator with scale ground truth.
"""
__version__ = "0.1.0"
