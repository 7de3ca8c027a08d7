"""Multi-task cardiac analysis directly from undersampled k-space.

Three-stage pipeline on a synthetic dynamic cardiac phantom cohort:
masked-autoencoder pretraining per domain, contrastive image/k-space
alignment, and multi-task fine-tuning (phenotype regression, disease
classification, segmentation, direct reconstruction).
"""

__version__ = "0.1.0"
