import pytest

from vaco.config import DataConfig, RunConfig, TeacherConfig, ValSection
from vaco.decoder import DecoderConfig
from vaco.model import TaskConfig
from vaco.teachers import ImageConfig
from vaco.training import StageConfig


def tiny_run_config(**overrides) -> RunConfig:
    """A run small enough to train in a second or two."""
    base = dict(
        decoder=DecoderConfig(layers=2, d_model=16, heads=2, ffn_dim=32, vocab_size=16, max_positions=64),
        image=ImageConfig(height=4, width=4, channels=3, patch=2, encoder_dim=8),
        teacher=TeacherConfig(world_seed=0, gain=3.0, hidden=8),
        tasks=(TaskConfig("depth", queries=2, tokens=4, dim=6, seed=11),
               TaskConfig("semantic", queries=2, tokens=4, dim=4, seed=12)),
        val=ValSection(layers=1, heads=2),
        data=DataConfig(train=32, heldout=16, task_link="depth"),
        pt=StageConfig("PT", epochs=1, batch_size=8, lr=2e-3),
        sft=StageConfig("SFT", epochs=1, batch_size=8, lr=1e-3),
        seeds=(0, 1),
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_run_config()
