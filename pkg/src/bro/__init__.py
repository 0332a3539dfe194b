"""Few-shot segmentation with feature calibration, channel attention and a
bidirectional prototype alignment loss, on synthetic organ phantoms."""

__version__ = "0.1.0"
