import pytest

from icucast.hazard import PipelineConfig, train_hazard_model
from icucast.synth import WorldConfig, generate_patient_world


@pytest.fixture(scope="session")
def small_patient_world():
    return generate_patient_world(WorldConfig(n_patients=1500, seed=21))


@pytest.fixture(scope="session")
def small_hazard_model(small_patient_world):
    return train_hazard_model(
        small_patient_world.records,
        "icu",
        config=PipelineConfig(classifier="gbt", calibrator="isotonic"),
        horizon=6,
        seed=0,
    )
