"""Task-aware MoE-LoRA and task-contrastive regularisation on a toy flow-matching transformer."""

__version__ = "0.1.0"
