import numpy as np
import pytest

from mdpformer import phantom
from mdpformer.pipeline import PipelineConfig, prepare_record


@pytest.fixture(scope="session")
def tiny_sp():
    return phantom.tiny_spec(seed=3)


@pytest.fixture(scope="session")
def tiny_pcfg(tiny_sp):
    # phantoms are generated at the target spacing, so resampling is identity
    return PipelineConfig(target_spacing=tiny_sp.spacing, margin_range=(0, 3))


@pytest.fixture(scope="session")
def sample_records(tiny_sp):
    """One case per class worth exercising (normal, PDAC, MCN cyst, IPMN tube)."""
    classes = [0, 1, 5, 4]
    return [phantom.generate_case(tiny_sp, c, 1000 + i, f"case_{i:04d}")
            for i, c in enumerate(classes)]


@pytest.fixture(scope="session")
def sample_prepared(sample_records, tiny_pcfg):
    return [prepare_record(r, tiny_pcfg) for r in sample_records]


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
