"""Attention-guided object masking pipeline.

Scores image/caption pairs with a dual encoder, turns the similarity
gradient into an attention map, converts the map into segmentation prompts,
and masks the object with a promptable segmenter — plus the evaluation
harness (IoU, F1 threshold selection, top-k accuracy) around it.
"""

__version__ = "0.1.0"
