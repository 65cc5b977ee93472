"""Contrastive pretraining and label-efficient finetuning for rover terrain segmentation."""

__version__ = "0.1.0"
