import sys
import pathlib

import pytest

sys.path.insert(0, str(pathlib.Path(__file__).parent))

from agmask.dataset import SynthConfig, synth_generate
from agmask.training import TrainConfig, train


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small 2-concept corpus shared by pipeline/CLI tests."""
    root = tmp_path_factory.mktemp("tiny-corpus")
    cfg = SynthConfig(size=48, count_per_concept=8, seed=21, distractors=1,
                      noise=4, concepts=[("red", "circle"), ("blue", "square")])
    entries = synth_generate(cfg, root)
    return root, entries


@pytest.fixture(scope="session")
def tiny_checkpoint(tiny_corpus, tmp_path_factory):
    """A briefly trained checkpoint over the tiny corpus."""
    root, entries = tiny_corpus
    path = tmp_path_factory.mktemp("ck") / "tiny.agmw"
    cfg = TrainConfig(batch_size=2, learning_rate=4e-3, epochs=25,
                      weight_decay=0.0, temperature=0.2, seed=5,
                      stratify_captions=True)
    train(entries, path, cfg, split=None)
    return path
