import pytest

from lrva.config import ExperimentConfig

TINY = {
    "backbone.image_size": 32, "backbone.patch_size": 8, "backbone.d_model": 16, "backbone.n_heads": 2,
    "backbone.n_blocks": 2, "backbone.mlp_ratio": 2,
    "data.n_classes": 3, "data.per_class": 2, "data.val_per_class": 1, "data.n_test": 6,
    "data.n_pairs": 4, "data.n_val_pairs": 3, "data.n_test_pairs": 4,
    "subkernel.u": 4, "domattn.C": 2, "aug.m": 1, "aug.bank_size": 4,
    "train.epochs": 2, "train.batch": 4,
}


@pytest.fixture
def tiny_cfg():
    return ExperimentConfig(TINY)
