"""Retrieval-augmented multimodal pretrain-and-finetune toolkit (desk scale)."""

__version__ = "0.1.0"
