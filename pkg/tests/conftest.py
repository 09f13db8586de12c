import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile(
    "package", deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("package")

torch.manual_seed(0)


@pytest.fixture(scope="session")
def pretrained():
    """(model, schedule, dataset) for the shared pretrained toy checkpoint.

    Trains once and caches under tests/_cache; later sessions reuse the
    archive, so everything downstream sees the identical model.
    """
    from fixture_cache import pretrained_model

    return pretrained_model()


@pytest.fixture(scope="session")
def base_checkpoint(pretrained, tmp_path_factory):
    """The pretrained model saved as a checkpoint file for CLI commands."""
    from subjectgen.checkpoint import save_checkpoint

    model, _, _ = pretrained
    path = tmp_path_factory.mktemp("ckpt") / "base.zip"
    save_checkpoint(path, model, extra={"role": "test-fixture"})
    return path
