import numpy as np
import pytest

from agmask.dataset import SynthConfig, synth_generate
from agmask.encoders import DualEncoder
from agmask.errors import ConfigError
from agmask.rng import SplitMix64
from agmask.training import TrainConfig, _batches, init_encoders, train


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("corpus")
    cfg = SynthConfig(count_per_concept=4, seed=9, size=32, distractors=1,
                      concepts=[("red", "circle"), ("blue", "square")])
    entries = synth_generate(cfg, tmp)
    return tmp, entries


def toy_config(**kw):
    defaults = dict(batch_size=4, learning_rate=5e-3, epochs=2,
                    weight_decay=0.0, seed=11, feature_channels=4,
                    embed_dim=8, token_dim=8)
    defaults.update(kw)
    return TrainConfig(**defaults)


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=0)
        with pytest.raises(ConfigError):
            TrainConfig(epochs=-1)
        with pytest.raises(ConfigError):
            TrainConfig(temperature=0)

    def test_full_scale_defaults(self):
        cfg = TrainConfig()
        assert cfg.batch_size == 64
        assert cfg.learning_rate == 1e-5
        assert cfg.epochs == 50
        assert (cfg.beta1, cfg.beta2) == (0.9, 0.98)
        assert cfg.weight_decay == 0.01


class TestBatches:
    def pairs(self, captions):
        return [(None, c) for c in captions]

    def test_random_batches_cover_everything(self):
        pairs = self.pairs(["a"] * 5 + ["b"] * 5)
        cfg = toy_config(batch_size=3)
        batches = _batches(pairs, cfg, SplitMix64(1))
        flat = sorted(i for b in batches for i in b)
        assert flat == list(range(10))

    def test_stratified_batches_have_unique_captions(self):
        pairs = self.pairs(["a", "b", "c"] * 4 + ["a"])
        cfg = toy_config(stratify_captions=True)
        batches = _batches(pairs, cfg, SplitMix64(2))
        flat = sorted(i for b in batches for i in b)
        assert flat == list(range(len(pairs)))
        for batch in batches:
            captions = [pairs[i][1] for i in batch]
            assert len(set(captions)) == len(captions)

    def test_drop_incomplete(self):
        pairs = self.pairs(["a"] * 7)
        cfg = toy_config(batch_size=3, drop_incomplete=True)
        batches = _batches(pairs, cfg, SplitMix64(3))
        assert all(len(b) == 3 for b in batches)
        assert sum(len(b) for b in batches) == 6


class TestTrain:
    def test_zero_epochs_equals_initialization(self, corpus, tmp_path):
        _, entries = corpus
        cfg = toy_config(epochs=0)
        ck = tmp_path / "zero.agmw"
        dual, history = train(entries, ck, cfg, split=None)
        fresh = init_encoders(cfg, [e.caption for e in entries])
        loaded = DualEncoder.load(ck)
        for name, t in fresh.params().items():
            assert np.array_equal(loaded.params()[name].data, t.data), name
        assert len(history) == 1

    def test_loss_decreases_over_two_epochs(self, corpus, tmp_path):
        _, entries = corpus
        pairs = entries[:8]
        dual, history = train(pairs, tmp_path / "t.agmw",
                              toy_config(epochs=2), split=None)
        assert len(history) == 3
        assert history[-1] < history[0]

    def test_same_seed_byte_identical_checkpoints(self, corpus, tmp_path):
        _, entries = corpus
        p1, p2 = tmp_path / "a.agmw", tmp_path / "b.agmw"
        train(entries, p1, toy_config(), split=None)
        train(entries, p2, toy_config(), split=None)
        assert p1.read_bytes() == p2.read_bytes()

    def test_different_seed_differs(self, corpus, tmp_path):
        _, entries = corpus
        p1, p2 = tmp_path / "a.agmw", tmp_path / "b.agmw"
        train(entries, p1, toy_config(seed=2), split=None)
        train(entries, p2, toy_config(seed=3), split=None)
        assert p1.read_bytes() != p2.read_bytes()

    def test_empty_dataset_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="empty"):
            train([], tmp_path / "x.agmw", toy_config())

    def test_split_filtering(self, corpus, tmp_path):
        _, entries = corpus
        train_count = sum(1 for e in entries if e.split == "train")
        if train_count == 0:
            pytest.skip("tiny corpus has no train entries")
        dual, _ = train(entries, tmp_path / "s.agmw", toy_config(epochs=0))
        assert dual is not None

    def test_batch_too_large_with_drop_incomplete(self, corpus, tmp_path):
        _, entries = corpus
        cfg = toy_config(batch_size=999, drop_incomplete=True)
        with pytest.raises(ConfigError, match="batch size"):
            train(entries, tmp_path / "x.agmw", cfg, split=None)

    def test_vocab_covers_captions(self, corpus, tmp_path):
        _, entries = corpus
        dual, _ = train(entries, tmp_path / "v.agmw", toy_config(epochs=0),
                        split=None)
        for token in ("red", "circle", "blue", "square"):
            assert token in dual.text_encoder.vocab
