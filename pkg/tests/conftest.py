import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from anomseg import synth

SMALL_CONFIG = {
    "patch_size": 128,
    "min_overlap": 32,
    "layers": [7, 15, 23, 31],
    "k": 20,
    "target_size": 300,
    "subset_count": 1,
    "seed": 0,
}


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A small synthetic dataset plus a matching pipeline config."""
    root = tmp_path_factory.mktemp("dataset")
    spec = synth.SynthSpec(seed=0, train_count=10, test_anomalous_count=3, test_clean_count=2)
    paths = synth.generate(spec, root / "data")
    config_path = root / "config.json"
    config_path.write_text(json.dumps(SMALL_CONFIG))
    return {
        "root": root,
        "spec": spec,
        "train_manifest": paths["train_manifest"],
        "test_manifest": paths["test_manifest"],
        "config": config_path,
    }
