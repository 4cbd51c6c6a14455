from __future__ import annotations

import pytest

from hybridts import config as cfgmod

# a few seconds end to end; enough positives in every partition
TINY_TEXT = """\
synth.n_surgeries=40
synth.duration_range=100,140
synth.precursor_rate=0.2
lstm.layer_sizes=4,3
lstm.max_epochs=2
lstm.patience_epochs=1
lstm.batch_size=64
gbt.max_rounds=8
gbt.max_depth=3
lookbacks=5,10
"""


@pytest.fixture
def tiny_cfg(tmp_path) -> cfgmod.ExperimentConfig:
    return cfgmod.loads(TINY_TEXT + f"output_dir={tmp_path / 'out'}\n")
