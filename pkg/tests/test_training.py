"""Losses, freeze contracts, determinism, and checkpointing."""

import numpy as np
import pytest

from kwbias.autodiff import Tape, Tensor, backward
from kwbias.model import ModelConfig, init_params, param_group_hash
from kwbias.prompts import sample_training_keywords, assemble_prompt
from kwbias.rng import stream
from kwbias.synth import SynthSpec, Utterance, generate_corpus
from kwbias.text import build_vocab
from kwbias.training import (
    Adam,
    CheckpointError,
    TrainConfig,
    TrainingError,
    checkpoint_load,
    checkpoint_save,
    loss_asr,
    loss_kws,
    set_trainable,
    train_run,
)

from helpers import gradcheck_modes

SPEC = SynthSpec(train_size=60, dev_size=8, test_size=8, n_mels=12, seed=21)
MODEL = ModelConfig(d_model=32, n_heads=4, n_enc_layers=1, n_dec_layers=1, d_ff=64,
                    vocab_size=120, n_mels=12, max_src_frames=128, max_tgt_len=96)


@pytest.fixture(scope="module")
def corpus():
    splits, bank = generate_corpus(SPEC)
    vocab = build_vocab([u.text for u in splits["train"]], MODEL.vocab_size)
    return splits, bank, vocab


def test_train_config_validation():
    with pytest.raises(TrainingError, match="mode"):
        TrainConfig(mode="warp", steps=1, learning_rate=1e-3)
    with pytest.raises(TrainingError, match="learning_rate"):
        TrainConfig(mode="pt", steps=1, learning_rate=0.0)
    with pytest.raises(TrainingError, match="batch_size >= 2"):
        TrainConfig(mode="ft", steps=1, learning_rate=1e-3, batch_size=1)
    with pytest.raises(TrainingError, match="steps"):
        TrainConfig(mode="pt", steps=0, learning_rate=1e-3)


def test_initial_asr_loss_is_log_vocab(corpus):
    splits, _, vocab = corpus
    params = init_params(ModelConfig(vocab_size=len(vocab), n_mels=12, d_model=32,
                                     n_heads=4, n_enc_layers=1, n_dec_layers=1, d_ff=64), seed=0)
    items = [(u.frames, vocab.tokenize(u.text)) for u in splits["train"][:4]]
    prompts = [assemble_prompt(vocab, ())] * 4
    loss = float(loss_asr(params, vocab, items, prompts).data)
    assert abs(loss - np.log(len(vocab))) < 0.3


def test_batch_of_identical_examples_equals_single_example_loss(corpus):
    splits, _, vocab = corpus
    params = init_params(MODEL, seed=1)
    u = splits["train"][0]
    item = (u.frames, vocab.tokenize(u.text))
    prompt = assemble_prompt(vocab, ())
    single = float(loss_asr(params, vocab, [item], [prompt]).data)
    batch = float(loss_asr(params, vocab, [item] * 3, [prompt] * 3).data)
    assert abs(single - batch) < 1e-12


def test_empty_batch_is_an_error(corpus):
    _, _, vocab = corpus
    params = init_params(MODEL, seed=1)
    with pytest.raises(TrainingError, match="empty batch"):
        loss_asr(params, vocab, [], [])


def test_initial_kws_loss_is_chance_level(corpus):
    splits, _, vocab = corpus
    from kwbias.model import encode

    params = init_params(MODEL, seed=2)
    toks = [vocab.tokenize(u.text) for u in splits["train"][:4]]
    rng = stream(3, "kws-loss")
    batch = []
    for j in range(4):
        ks = sample_training_keywords(vocab, toks, j, rng)
        batch.append((encode(params, splits["train"][j].frames), ks))
    loss = float(loss_kws(params, batch).data)
    assert abs(loss - np.log(2)) < 0.1


def test_gradcheck_all_modes_and_frozen_groups_zero(corpus):
    splits, _, vocab = corpus
    params = init_params(MODEL, seed=4)
    from kwbias.model import encode, init_prefix

    init_prefix(params, 4, seed=4)
    toks = [vocab.tokenize(u.text) for u in splits["train"][:2]]
    rng = stream(5, "gc")
    keyword_sets = [sample_training_keywords(vocab, toks, j, rng) for j in range(2)]
    prompts = [assemble_prompt(vocab, ks) for ks in keyword_sets]
    items = [(splits["train"][j].frames, toks[j]) for j in range(2)]

    def asr_loss():
        return loss_asr(params, vocab, items, prompts)

    def kws_loss():
        us = [encode(params, splits["train"][j].frames) for j in range(2)]
        return loss_kws(params, [(us[j], keyword_sets[j]) for j in range(2)])

    worst = gradcheck_modes(
        params,
        {"base-asr": asr_loss, "kws": kws_loss, "ft": asr_loss, "pt": asr_loss},
        n_coords=8,
    )
    assert max(worst.values()) < 1e-4, worst


def test_loss_decreases_over_200_steps_in_every_mode(corpus):
    splits, _, vocab = corpus
    train = splits["train"]
    params = init_params(MODEL, seed=6)

    def ema_ends(losses):
        ema = losses[0]
        for v in losses:
            ema = 0.95 * ema + 0.05 * v
        return losses[0], ema

    for mode, lr in (("base-asr", 1e-3), ("kws", 1e-3), ("ft", 3e-4), ("pt", 5e-4)):
        losses = train_run(TrainConfig(mode=mode, steps=200, learning_rate=lr, batch_size=4, seed=6),
                           train, vocab, params)
        first, last_ema = ema_ends(losses)
        assert last_ema < first, f"{mode}: EMA {last_ema} !< first {first}"


def test_freeze_contract_pt_and_ft(corpus):
    splits, _, vocab = corpus
    train = splits["train"]
    params = init_params(MODEL, seed=7)

    hashes = {g: param_group_hash(grp) for g, grp in params.groups().items()}
    train_run(TrainConfig(mode="pt", steps=30, learning_rate=5e-4, batch_size=4, seed=7, prefix_len=5),
              train, vocab, params)
    assert param_group_hash(params.encoder) == hashes["encoder"]
    assert param_group_hash(params.decoder) == hashes["decoder"]
    assert param_group_hash(params.kws) == hashes["kws"]
    assert params.prefix["q"].shape == (5, MODEL.d_model)

    before_ft = {g: param_group_hash(grp) for g, grp in params.groups().items()}
    train_run(TrainConfig(mode="ft", steps=30, learning_rate=1e-4, batch_size=4, seed=7),
              train, vocab, params)
    assert param_group_hash(params.decoder) != before_ft["decoder"]
    assert param_group_hash(params.encoder) == before_ft["encoder"]
    assert param_group_hash(params.kws) == before_ft["kws"]
    assert param_group_hash(params.prefix) == before_ft["prefix"]


def test_training_is_bitwise_deterministic(corpus):
    splits, _, vocab = corpus
    train = splits["train"]

    def run():
        params = init_params(MODEL, seed=8)
        train_run(TrainConfig(mode="base-asr", steps=25, learning_rate=1e-3, batch_size=4, seed=8),
                  train, vocab, params)
        return {g: param_group_hash(grp) for g, grp in params.groups().items()}

    assert run() == run()


def test_non_finite_loss_aborts_with_step_index(corpus):
    splits, _, vocab = corpus
    params = init_params(MODEL, seed=9)
    params.decoder["embed"].data[0, 0] = np.nan
    with pytest.raises(TrainingError, match="non-finite loss at step 0"):
        train_run(TrainConfig(mode="base-asr", steps=5, learning_rate=1e-3, batch_size=4, seed=9),
                  splits["train"], vocab, params)


def test_adam_moves_only_tensors_with_gradients():
    t1 = Tensor(np.ones(3), requires_grad=True)
    t2 = Tensor(np.ones(3), requires_grad=True)
    opt = Adam([("a", t1), ("b", t2)], lr=0.1)
    t1.grad = np.ones(3)
    opt.step()
    assert not np.array_equal(t1.data, np.ones(3))
    assert np.array_equal(t2.data, np.ones(3))


def test_checkpoint_round_trip_and_hash_validation(tmp_path, corpus):
    splits, _, vocab = corpus
    params = init_params(MODEL, seed=10)
    from kwbias.model import init_prefix

    init_prefix(params, 3, seed=10)
    path = tmp_path / "m.ckpt"
    checkpoint_save(path, params, vocab.content_hash, seed=10)

    loaded, meta = checkpoint_load(path, vocab.content_hash)
    assert meta["seed"] == 10
    assert loaded.config == params.config
    for g, grp in params.groups().items():
        assert param_group_hash(grp) == param_group_hash(loaded.groups()[g])

    # save -> load -> save produces identical bytes
    path2 = tmp_path / "m2.ckpt"
    checkpoint_save(path2, loaded, vocab.content_hash, seed=10)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_tampering(tmp_path, corpus):
    splits, _, vocab = corpus
    params = init_params(MODEL, seed=11)
    path = tmp_path / "m.ckpt"
    checkpoint_save(path, params, vocab.content_hash, seed=11)
    blob = bytearray(path.read_bytes())
    blob[-5] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="corrupt|hash mismatch"):
        checkpoint_load(path)


def test_checkpoint_rejects_wrong_vocab(tmp_path, corpus):
    splits, _, vocab = corpus
    params = init_params(MODEL, seed=12)
    path = tmp_path / "m.ckpt"
    checkpoint_save(path, params, vocab.content_hash, seed=12)
    with pytest.raises(CheckpointError, match="vocabulary hash mismatch"):
        checkpoint_load(path, "0" * 64)


def test_set_trainable_matches_mode_contract():
    params = init_params(MODEL, seed=13)
    from kwbias.model import init_prefix

    init_prefix(params, 2, seed=13)
    set_trainable(params, "pt")
    assert params.prefix["q"].requires_grad
    assert not any(t.requires_grad for t in params.encoder.values())
    assert not any(t.requires_grad for t in params.decoder.values())
    assert not any(t.requires_grad for t in params.kws.values())
    set_trainable(params, "base-asr")
    assert all(t.requires_grad for t in params.encoder.values())
    assert all(t.requires_grad for t in params.decoder.values())
    assert not params.prefix["q"].requires_grad
