"""Multimodal multitask metadata prediction: count-sketch compact bilinear
pooling, geometric-average multitask loss with focal loss, and macro-AUC
evaluation on a synthetic pathology-like benchmark."""

__version__ = "0.1.0"
