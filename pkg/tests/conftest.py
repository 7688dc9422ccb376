import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_benchmark():
    """Small two-domain synthetic benchmark shared by training tests."""
    from meltpool_da import synth
    src = synth.SyntheticDomainSpec(train_per_class=8, val_per_class=4,
                                    test_per_class=4, seed=0)
    tgt = synth.default_target_spec(seed=1)
    tgt.train_per_class = 8
    tgt.val_per_class = tgt.test_per_class = 4
    return synth.generate_domain_pair(src, tgt)
