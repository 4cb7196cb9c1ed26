import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

TINY_KW = dict(resolution=16, width=32, heads=2, blocks=1, embed_dim=16, mlp_ratio=2)


@pytest.fixture(scope="session")
def trained_tiny():
    """A small dual encoder trained clean for a few seconds (about 60% val zero-shot accuracy)."""
    from ddlab import data, evaluate, models, train

    cfg = models.ModelConfig(**TINY_KW)
    stages = [train.TrainStageConfig(resolution=16, samples=12000, batch_size=32, lr=3e-3)]
    params, _, _ = train.pretrain_text_encoder(cfg, stages, seed=0, dataset_size=640, cap_weight=0.0)
    val = data.make_dataset(640, 16, 0).take_split("val")
    return params, evaluate.build_zero_shot_head(params), val
