from pathlib import Path

import numpy as np
import pytest

from DietaMT.core_data_pipeline import (
    format_samples,
    shuffle,
    synthetic_number_corpus,
)
from DietaMT.core_model import DietaModel, ModelConfig, load_checkpoint
from DietaMT.core_tokenizer import (
    BYTE_ENCODER,
    EOS_ID,
    PAD_ID,
    SPECIAL_PIECES,
    Vocab,
    train_bpe,
)
from DietaMT.core_trainer import (
    METRICS_COLUMNS,
    OPTIMIZER_MAGIC,
    RECIPES,
    BatchStats,
    Schedule,
    TrainConfig,
    checkpoint_path,
    describe_recipes,
    get_recipe,
    lion_step,
    lr_at,
    make_batches,
    read_metrics,
    recipe_slug,
    train,
)
from DietaMT.support_functions import ConfigError, ContractError


@pytest.fixture(scope="module")
def byte_vocab():
    pieces = list(SPECIAL_PIECES) + [BYTE_ENCODER[b] for b in range(256)]
    return Vocab(pieces, [], len(pieces))


@pytest.fixture(scope="module")
def toy_data():
    pairs = synthetic_number_corpus(40, seed=1, max_digits=2)
    texts = [s.text for s in shuffle(list(format_samples(pairs)), 1)]
    return texts, train_bpe(texts, vocab_size=300)


def toy_config(vocab):
    return ModelConfig(
        vocab_size=len(vocab), d_model=32, n_heads=2, n_layers=1, max_seq_len=48
    )


class TestLion:
    def test_scalar_update(self):
        p, m = lion_step(
            np.array(1.0), np.array(0.5), np.array(0.0), lr=0.1, weight_decay=0.0
        )
        assert p == 0.9
        assert m == pytest.approx(0.005)

    def test_decoupled_weight_decay(self):
        param, grad = np.array([1.0, -2.0]), np.array([-3.0, 0.0])
        p, _ = lion_step(param, grad, np.zeros(2), lr=0.1)
        expected = [1.0 - 0.1 * (-1 + 0.01), -2.0 - 0.1 * (0 - 0.02)]
        np.testing.assert_allclose(p, expected)

    def test_inputs_are_untouched(self):
        param, grad, momentum = np.ones(3), np.ones(3), np.zeros(3)
        lion_step(param, grad, momentum, lr=0.5)
        np.testing.assert_array_equal(param, np.ones(3))
        np.testing.assert_array_equal(momentum, np.zeros(3))

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            lion_step(np.ones(3), np.ones(2), np.zeros(3), lr=0.1)


class TestSchedule:
    def test_warmup_then_linear_decay(self):
        schedule = Schedule(total_steps=100)
        assert schedule.warmup_steps == 10
        assert lr_at(0, schedule) == 0.0
        assert lr_at(5, schedule) == pytest.approx(1e-4)
        assert lr_at(10, schedule) == pytest.approx(2e-4)
        assert lr_at(55, schedule) == pytest.approx(1e-4)
        assert lr_at(100, schedule) == pytest.approx(0.0)

    def test_warmup_steps_round_to_an_integer(self):
        assert Schedule(total_steps=70).warmup_steps == 7
        assert Schedule(total_steps=33).warmup_steps == 3
        assert Schedule(total_steps=3).warmup_steps == 1

    def test_floor(self):
        schedule = Schedule(total_steps=20, peak_lr=1.0, floor_lr=0.5)
        assert lr_at(20, schedule) == pytest.approx(0.5)

    def test_contract(self):
        with pytest.raises(ContractError):
            lr_at(101, Schedule(total_steps=100))
        with pytest.raises(ConfigError):
            Schedule(total_steps=0)
        with pytest.raises(ConfigError):
            Schedule(total_steps=10, warmup_fraction=1.5)


class TestRecipes:
    def test_lineage(self):
        assert set(RECIPES) == {"DIETA", "+BT", "+cont", "+nosynth", "+allsynth"}
        assert get_recipe("DIETA").starts_from is None
        assert get_recipe("+BT").starts_from is None
        assert get_recipe("+cont").starts_from == "DIETA"
        assert get_recipe("+nosynth").starts_from == "DIETA"
        assert get_recipe("+allsynth").starts_from == "+cont"
        assert get_recipe("DIETA").samples == 415_728_874
        assert get_recipe("+allsynth").samples == 768_440_887
        with pytest.raises(ConfigError):
            get_recipe("+unknown")

    def test_paths(self):
        assert recipe_slug("DIETA") == "dieta"
        assert recipe_slug("+allsynth") == "dieta-allsynth"
        step_path = checkpoint_path("runs", "+cont", 12)
        assert step_path == Path("runs/dieta-cont-step0000012.ckpt")
        assert checkpoint_path("runs", "DIETA") == Path("runs/dieta.ckpt")

    def test_description_lists_every_recipe(self):
        text = describe_recipes()
        for name in RECIPES:
            assert name in text


class TestBatching:
    def test_token_budget(self, byte_vocab):
        stats = BatchStats()
        texts = ["aaa", "bbb", "cc", "d" * 10]
        batches = list(make_batches(texts, byte_vocab, 8, 16, stats))
        assert [b.shape for b in batches] == [(2, 4), (1, 3), (1, 11)]
        assert stats.batches == 3
        assert stats.tokens == 4 + 4 + 3 + 11
        assert all(b.ids[b.mask][-1] == EOS_ID for b in batches)

    def test_padding_and_mask(self, byte_vocab):
        (batch,) = make_batches(["aaa", "b"], byte_vocab, 8, 16)
        assert batch.mask.tolist() == [[True] * 4, [True, True, False, False]]
        assert batch.ids[1, 1] == EOS_ID
        assert batch.ids[1, 2:].tolist() == [PAD_ID, PAD_ID]
        assert batch.n_tokens == 6

    def test_truncation(self, byte_vocab):
        stats = BatchStats()
        (batch,) = make_batches(["abcdefghij"], byte_vocab, 64, 6, stats)
        assert batch.shape == (1, 6)
        assert stats.truncated == 1
        assert EOS_ID not in batch.ids

    def test_bad_budget(self, byte_vocab):
        with pytest.raises(ConfigError):
            list(make_batches(["a"], byte_vocab, 0, 16))


class TestTrain:
    def test_loss_decreases(self, tmp_path, toy_data):
        texts, vocab = toy_data
        tc = TrainConfig(
            peak_lr=2e-3,
            max_tokens_per_batch=256,
            epochs=50,
            max_steps=60,
            log_every=0,
            output_dir=str(tmp_path),
        )
        result = train("DIETA", toy_config(vocab), texts, vocab, tc)
        assert result.steps == 60
        assert len(result.losses) == 60
        assert np.mean(result.losses[-10:]) < np.mean(result.losses[:10])

        assert result.checkpoint == tmp_path / "dieta.ckpt"
        _, sections = load_checkpoint(result.checkpoint)
        header, momenta = sections[OPTIMIZER_MAGIC]
        assert header["step"] == "60"
        assert set(momenta) == set(result.model.params)

        metrics = read_metrics(result.metrics)
        assert list(metrics.columns) == METRICS_COLUMNS
        assert metrics["step"].tolist() == list(range(1, 61))

    def test_resume_reproduces_uninterrupted_run(self, tmp_path, toy_data):
        texts, vocab = toy_data
        common = dict(
            max_tokens_per_batch=256,
            epochs=5,
            max_steps=6,
            precision="float64",
            log_every=0,
        )
        full = train(
            "DIETA",
            toy_config(vocab),
            texts,
            vocab,
            TrainConfig(
                checkpoint_every=3, output_dir=str(tmp_path / "full"), **common
            ),
        )
        interval = tmp_path / "full" / "dieta-step0000003.ckpt"
        assert interval.exists()

        resumed = train(
            "DIETA",
            toy_config(vocab),
            texts,
            vocab,
            TrainConfig(output_dir=str(tmp_path / "resumed"), **common),
            resume_from=interval,
        )
        assert resumed.steps == 6
        np.testing.assert_allclose(resumed.losses, full.losses[3:], rtol=1e-12)
        for name, param in full.model.params.items():
            np.testing.assert_allclose(
                resumed.model.params[name].data, param.data, rtol=1e-12
            )

    def test_continued_recipe_needs_its_parent(self, tmp_path, toy_data):
        texts, vocab = toy_data
        tc = TrainConfig(max_steps=2, output_dir=str(tmp_path), log_every=0)
        with pytest.raises(ConfigError, match="does not exist"):
            train("+cont", toy_config(vocab), texts, vocab, tc)

        parent = train("DIETA", toy_config(vocab), texts, vocab, tc)
        child = train("+nosynth", toy_config(vocab), texts, vocab, tc)
        assert child.checkpoint == tmp_path / "dieta-nosynth.ckpt"
        assert child.model.config == parent.model.config

    @pytest.mark.slow
    def test_every_parameter_is_updated(self, tmp_path, toy_data):
        texts, vocab = toy_data
        config = ModelConfig(
            vocab_size=len(vocab), d_model=32, n_heads=2, n_layers=2, max_seq_len=48
        )
        tc = TrainConfig(
            peak_lr=2e-3,
            weight_decay=0.0,
            max_tokens_per_batch=256,
            epochs=50,
            max_steps=150,
            log_every=0,
            output_dir=str(tmp_path),
        )
        initial = DietaModel(config, seed=tc.seed)
        result = train("DIETA", config, texts, vocab, tc)
        # without weight decay a Lion update needs a nonzero gradient
        frozen = [
            name
            for name, param in result.model.params.items()
            if np.array_equal(param.data, initial.params[name].data)
        ]
        assert frozen == []
        assert np.mean(result.losses[-20:]) < np.mean(result.losses[:20])

    def test_empty_corpus(self, tmp_path, toy_data):
        _, vocab = toy_data
        with pytest.raises(ConfigError):
            tc = TrainConfig(output_dir=str(tmp_path))
            train("DIETA", toy_config(vocab), [], vocab, tc)
