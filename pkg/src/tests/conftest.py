# -*- coding: utf-8 -*-

import numpy as np
import pytest

from mclab.config import TrainConfig
from mclab.synthcenter import CenterProfile, generate_center, write_center
from mclab.tinynet import NetworkDescriptor
from mclab.volgrid import CaseRecord, Volume

# 10³ patches, 6³ targets, 241 parameters
TINY = NetworkDescriptor(
    normal_widths=(2, 2),
    context_widths=(2,),
    downsample=2,
    fusion_width=3,
    input_size=10,
)


def tiny_profile(name: str, seed: int, **kwargs) -> CenterProfile:
    defaults = dict(
        n_train=3,
        n_val=2,
        n_test=2,
        dims=(32, 32, 32),
        lesion_density=2.0,
        size_log_mean=-2.5,
        size_log_std=0.3,
        seed=seed,
    )
    return CenterProfile(name=name, **(defaults | kwargs))


def tiny_config(**kwargs) -> TrainConfig:
    defaults = dict(
        epochs=2,
        batches_per_epoch=2,
        batch_size=4,
        validate_every=1,
        infer_tile=24,
    )
    return TrainConfig(**(defaults | kwargs))


def blob_case(case_id: str, dims=(16, 16, 16), centers=((8, 8, 8),), radius=2) -> CaseRecord:
    """A hand made case with cubic lesions inside a box shaped brain."""
    brain = np.zeros(dims, dtype=bool)
    brain[2:-2, 2:-2, 2:-2] = True

    label = np.zeros(dims, dtype=bool)
    for x, y, z in centers:
        label[x - radius : x + radius, y - radius : y + radius, z - radius : z + radius] = True

    image = brain * 1.0 + label * 2.0
    return CaseRecord(
        case_id=case_id,
        image=Volume.intensity(image),
        label=Volume.mask(label),
        brain_mask=Volume.mask(brain),
    )


@pytest.fixture
def tiny():
    return TINY


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def interior():
    return generate_center(tiny_profile("interior", seed=1))


@pytest.fixture(scope="session")
def boundary():
    return generate_center(
        tiny_profile(
            "boundary",
            seed=2,
            spatial_mode="boundary",
            distractor_rate=0.5,
            meningeal_rim=0.6,
        )
    )


@pytest.fixture(scope="session")
def manifests(tmp_path_factory, interior, boundary):
    root = tmp_path_factory.mktemp("centers")
    return [
        write_center(interior, root / "interior"),
        write_center(boundary, root / "boundary"),
    ]
