"""Key-based adversarial defense for a small vision transformer: keyed
block-wise pixel shuffling, keyed fine-tuning (full or LoRA), and attack
evaluation."""

__version__ = "0.1.0"
