"""Learning-stage adapter: fine-tune a toy model on confidence-annotated
instruction rows, excluding loss-masked rows' response tokens from the loss."""

__version__ = "0.1.0"
