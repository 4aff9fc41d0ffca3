import os

os.environ.setdefault("CIL_CONFIG", "testing")
os.environ["LOG_TO_FILE"] = "False"
os.environ["PROGRESS_BARS"] = "False"

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from cilkit.models import Backbone, BackboneConfig, Classifier, ModelState  # noqa: E402
from cilkit.services.fusion_service import fuse  # noqa: E402
from cilkit.services.trainer_service import PretrainConfig, TrainConfig, pretrain_backbone, train_task  # noqa: E402
from cilkit.utils.datasets import (  # noqa: E402
    ProtocolSpec,
    SyntheticConfig,
    make_auxiliary_dataset,
    make_synthetic_stream,
)
from cilkit.utils.experiment_config import ExperimentConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_backbone_config():
    return BackboneConfig(num_blocks=1, embed_dim=8, num_heads=2, mlp_hidden=16, seq_len=3, token_dim=4)


@pytest.fixture
def tiny_backbone(tiny_backbone_config):
    backbone = Backbone(tiny_backbone_config)
    backbone.freeze()
    return backbone


@pytest.fixture(scope="session")
def tiny_protocol():
    return ProtocolSpec(total_classes=4, base=0, increment=2, shuffle_seed=1993)


@pytest.fixture(scope="session")
def tiny_synthetic():
    return SyntheticConfig(
        num_classes=4,
        train_per_class=12,
        test_per_class=6,
        token_dim=4,
        seq_len=3,
        noise_std=0.1,
        confusable_pairs=0,
        seed=3,
    )


@pytest.fixture(scope="session")
def tiny_stream(tiny_synthetic, tiny_protocol):
    return make_synthetic_stream(tiny_synthetic, tiny_protocol)


@pytest.fixture(scope="session")
def tiny_train_config():
    return TrainConfig(
        epochs=4,
        batch_size=8,
        lr0=0.05,
        rank=2,
        replay_samples_per_class=10,
        calibration_epochs=1,
        seed=5,
    )


@pytest.fixture(scope="session")
def trained_state(tiny_backbone_config, tiny_stream, tiny_train_config):
    """Two tasks trained and fused on the tiny stream (built once per session)"""
    backbone = Backbone(tiny_backbone_config)
    backbone.freeze()
    state = ModelState(backbone=backbone, classifier=Classifier(tiny_backbone_config.embed_dim))
    for task in tiny_stream.tasks:
        train_task(task, state, tiny_train_config)
    state.universal = fuse(state.task_adapters)
    return state


@pytest.fixture(scope="session")
def tiny_pretrain():
    return PretrainConfig(num_classes=4, instances_per_class=8, epochs=1, batch_size=8)


@pytest.fixture
def tiny_experiment(tiny_backbone_config, tiny_protocol, tiny_synthetic, tiny_pretrain, tiny_train_config):
    return ExperimentConfig(
        name="tiny",
        protocol=tiny_protocol,
        synthetic=tiny_synthetic,
        backbone=tiny_backbone_config,
        pretrain=tiny_pretrain,
        train=tiny_train_config,
        seed=5,
    )


@pytest.fixture(scope="session")
def pretrained_backbone(tiny_backbone_config, tiny_pretrain):
    """Backbone pre-trained the way run_experiment builds one for tiny_experiment"""
    data = make_auxiliary_dataset(
        tiny_pretrain.num_classes,
        tiny_pretrain.instances_per_class,
        tiny_backbone_config.token_dim,
        tiny_backbone_config.seq_len,
        tiny_pretrain.noise_std,
        tiny_pretrain.seed,
    )
    backbone = Backbone(tiny_backbone_config)
    pretrain_backbone(backbone, data, tiny_pretrain)
    return backbone
