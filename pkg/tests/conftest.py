import sys
from pathlib import Path

import pytest
import torch

# small tensors: single-threaded kernels are faster and bitwise stable
torch.set_num_threads(1)

sys.path.insert(0, str(Path(__file__).parent))

from adaseg.codespace import HyperParams
from adaseg.data import SynthSpec, build_registry, synthesize_dataset
from adaseg.networks import NetConfig, build_models

# micro scale: 8x8 canvas, width 8, two resolution stages
MICRO_NET = NetConfig(image_size=8, base_width=8, n_down=2, n_inter=1,
                      code_hidden=64)
# desk scale: 64x64 canvas, width 16, the full four-stage architecture
DESK_NET = NetConfig(image_size=64, base_width=16)


@pytest.fixture(scope="session")
def micro_bundle():
    return build_models(MICRO_NET, seed=1234)


@pytest.fixture(scope="session")
def desk_bundle():
    return build_models(DESK_NET, seed=77)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A small synthetic dataset shared by data/training/pipeline tests."""
    root = tmp_path_factory.mktemp("tiny_synth")
    spec = SynthSpec(size=64, n_intra=(6, 2, 2), n_inter=(6, 2, 2), seed=11)
    train_m, eval_m = synthesize_dataset(spec, root)
    return spec, root, train_m, eval_m


@pytest.fixture(scope="session")
def tiny_registry(tiny_dataset):
    _, _, train_m, eval_m = tiny_dataset
    return build_registry(train_m, eval_m, 64)


@pytest.fixture
def micro_hp():
    return HyperParams(seed=3, iters_joint=100, iters_self=40, eval_interval=0,
                       checkpoint_interval=0, prebuild_samples=32)
