"""AnoDFDNet: deep-feature-difference anomaly detection on paired images."""

__version__ = "0.1.0"
