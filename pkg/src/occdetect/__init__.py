"""Occupancy detection from indoor climate sensors.

Logistic regression, class-weighted RBF SVM and an attention LSTM sharing one
feature pipeline, with F1-calibrated thresholds and GP/EI hyperparameter search.
"""

__version__ = "0.1.0"
