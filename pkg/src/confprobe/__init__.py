"""confprobe: capture a model's inherent confidence by repeated mutated
questioning, build confidence-annotated instruction data, and evaluate how
well stated confidence tracks correctness."""

__version__ = "0.1.0"
