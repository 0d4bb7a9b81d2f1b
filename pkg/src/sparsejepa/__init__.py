"""SparseJEPA at desk scale: latent-prediction pretraining with group sparsity,
plus exact verification of the multiinformation grouping claims."""

__version__ = "0.1.0"
