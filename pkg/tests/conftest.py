import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

from drivessl import sim  # noqa: E402
from drivessl.encoder import EncoderConfig  # noqa: E402
from drivessl.pretrain import generate_synthetic_corpus  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
ACCEPTANCE_CFG = ROOT / "configs" / "acceptance.cfg"
DESK_CFG = ROOT / "configs" / "desk.cfg"


@pytest.fixture
def tiny_encoder_config():
    return EncoderConfig(frames=4, frame_size=16, channels=(4, 8), strides=((1, 2, 2), (2, 2, 2)),
                         projection_dim=8, predictor_hidden=16)


@pytest.fixture
def small_world():
    return sim.WorldConfig(route_id="straight", frame_size=16, view_meters=24.0)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    world = sim.WorldConfig(frame_size=16, view_meters=24.0)
    return generate_synthetic_corpus(root, n_videos=4, length=24, seed=3, world=world)
