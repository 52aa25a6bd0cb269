"""Self-distillation pretraining and evaluation toolkit for compact
ultrasound vision transformers."""

__version__ = "0.1.0"
