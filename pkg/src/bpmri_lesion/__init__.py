"""Detection/segmentation post-processing, ensembling, self-training and evaluation
for biparametric prostate MRI lesion models, with a verifiable non-local attention block."""

__version__ = "0.1.0"
