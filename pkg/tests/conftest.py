import numpy as np
import pytest

import esprune as ep


@pytest.fixture(scope="session")
def tiny_archs():
    """One small architecture per family, all on 12x12 inputs, 5 classes."""
    return {
        "cnn": ep.build_preset("tiny_cnn", num_classes=5, input_shape=(3, 12, 12)),
        "resnet": ep.build_preset("tiny_resnet", num_classes=5, input_shape=(3, 12, 12)),
        "densenet": ep.build_preset("tiny_densenet", num_classes=5, input_shape=(3, 12, 12)),
    }


@pytest.fixture(scope="session")
def tiny_models(tiny_archs):
    return {fam: ep.init_model(arch, seed=11) for fam, arch in tiny_archs.items()}


@pytest.fixture(scope="session")
def blob_data():
    """8-class synthetic set small enough for quick evolution runs."""
    return ep.synthetic(8, 30, 12, seed=5)


def masked_scores(base_model, x, genome):
    """Scores of the full network with pruned channels' activations zeroed."""
    from esprune.genome import channel_masks

    masks = channel_masks(base_model.arch, genome)
    hook_ids = {l.id for l in base_model.arch.layers if l.kind in ("conv", "residual_add")}
    return ep.forward(base_model, x, channel_masks={k: m for k, m in masks.items()
                                                    if k in hook_ids})
