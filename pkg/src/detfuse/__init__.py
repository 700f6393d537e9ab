"""Detection ensembling toolkit: weighted boxes fusion, COCO-style mAP,
cut-paste augmentation and reference detector losses."""

__version__ = "0.1.0"
