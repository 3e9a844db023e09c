"""Model forward-pass contracts: shapes, determinism, prompt handling."""

import numpy as np
import pytest

from kwbias.autodiff import Tensor
from kwbias.model import (
    ModelConfig,
    ModelError,
    encode,
    decode_next,
    init_params,
    init_prefix,
    kws_detect,
    param_count,
    param_group_hash,
    prompt_attention_block,
    transcribe_greedy,
)
from kwbias.rng import stream
from kwbias.text import N_RESERVED, build_vocab

CFG = ModelConfig(d_model=32, n_heads=4, n_enc_layers=2, n_dec_layers=2, d_ff=64,
                  vocab_size=60, n_mels=8, max_src_frames=64, max_tgt_len=48)


@pytest.fixture(scope="module")
def params():
    return init_params(CFG, seed=11)


@pytest.fixture(scope="module")
def vocab():
    return build_vocab(["bako demo rila sotu", "demo vanu kipo", "rila bako sotu"], 60)


def test_config_validation():
    with pytest.raises(ModelError, match="divisible"):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ModelError, match=">= 1"):
        ModelConfig(n_enc_layers=0)


def test_encode_halves_the_frame_count(params):
    rng = stream(0, "enc")
    assert encode(params, rng.normal(size=(10, 8))).shape == (5, CFG.d_model)
    assert encode(params, rng.normal(size=(11, 8))).shape == (5, CFG.d_model)


def test_encode_is_position_sensitive(params):
    rng = stream(1, "perm")
    frames = rng.normal(size=(10, 8))
    swapped = frames.copy()
    swapped[[0, 3]] = swapped[[3, 0]]
    assert not np.allclose(encode(params, frames).data, encode(params, swapped).data)


def test_encode_finite_on_zero_input(params):
    assert np.isfinite(encode(params, np.zeros((12, 8))).data).all()


def test_encode_rejects_bad_inputs(params):
    with pytest.raises(ModelError, match="max_src_frames"):
        encode(params, np.zeros((65, 8)))
    with pytest.raises(ModelError, match="features"):
        encode(params, np.zeros((10, 9)))


def test_decode_next_distribution_sums_to_one(params, vocab):
    u = encode(params, stream(2, "u").normal(size=(10, 8)))
    probs = decode_next(params, u, [vocab.sop_id, vocab.sot_id], [7, 8], None)
    assert probs.shape == (CFG.vocab_size,)
    assert abs(probs.sum() - 1.0) < 1e-12
    assert (probs >= 0).all()


def test_decode_next_plain_mode_equals_sot_only_conditioning(params, vocab):
    u = encode(params, stream(3, "u").normal(size=(10, 8)))
    t_prev = [9, 12]
    plain = decode_next(params, u, [vocab.sot_id], t_prev, None)
    again = decode_next(params, u, [vocab.sot_id], t_prev, None)
    assert np.array_equal(plain, again)  # deterministic forward


def test_decode_next_attends_to_prompt_content(params, vocab):
    # an untrained model already reads the prompt: changing one keyword
    # token must move the distribution
    u = encode(params, stream(4, "u").normal(size=(10, 8)))
    p1 = [vocab.sop_id, 10, 11, vocab.sot_id]
    p2 = [vocab.sop_id, 10, 12, vocab.sot_id]
    d1 = decode_next(params, u, p1, [7], None)
    d2 = decode_next(params, u, p2, [7], None)
    assert not np.allclose(d1, d2)


def test_decode_next_overlength_conditioning_rejected(params, vocab):
    u = encode(params, stream(5, "u").normal(size=(10, 8)))
    with pytest.raises(ModelError, match="max_tgt_len"):
        decode_next(params, u, [vocab.sot_id], list(range(10, 10 + CFG.max_tgt_len)), None)


def test_transcribe_stops_at_eot_and_respects_max_len(params, vocab):
    u = encode(params, stream(6, "u").normal(size=(10, 8)))
    out = transcribe_greedy(params, u, [vocab.sop_id, vocab.sot_id], None, vocab.eot_id, 12)
    assert len(out) <= 12
    assert vocab.eot_id not in out


def test_transcribe_eot_forced_gives_empty_transcript(params, vocab):
    forced = init_params(CFG, seed=11)
    forced.decoder["out_b"].data[vocab.eot_id] = 50.0
    u = encode(forced, stream(7, "u").normal(size=(10, 8)))
    out = transcribe_greedy(forced, u, [vocab.sop_id, vocab.sot_id], None, vocab.eot_id, 12)
    assert out == []


def test_transcribe_breaks_ties_to_lowest_id(params, vocab):
    flat = init_params(CFG, seed=11)
    # zero embeddings and bias give identical logits: argmax picks id 0
    flat.decoder["embed"] = Tensor(np.zeros_like(flat.decoder["embed"].data))
    flat.decoder["out_b"] = Tensor(np.zeros(CFG.vocab_size))
    u = encode(flat, stream(8, "u").normal(size=(10, 8)))
    out = transcribe_greedy(flat, u, [vocab.sop_id, vocab.sot_id], None, vocab.eot_id, 3)
    assert out == [0, 0, 0]


def test_init_prefix_rows_copy_token_embeddings(params):
    fresh = init_params(CFG, seed=11)
    q = init_prefix(fresh, 12, seed=5)
    assert q.shape == (12, CFG.d_model)
    table = fresh.decoder["embed"].data
    for row in q.data:
        matches = np.where((table == row).all(axis=1))[0]
        assert len(matches) >= 1
        assert (matches >= N_RESERVED).all()
    again = init_params(CFG, seed=11)
    q2 = init_prefix(again, 12, seed=5)
    assert np.array_equal(q.data, q2.data)


def test_prefix_changes_the_distribution(params, vocab):
    fresh = init_params(CFG, seed=11)
    u = encode(fresh, stream(9, "u").normal(size=(10, 8)))
    without = decode_next(fresh, u, [vocab.sop_id, vocab.sot_id], [7], None)
    q = init_prefix(fresh, 4, seed=5)
    with_q = decode_next(fresh, u, [vocab.sop_id, vocab.sot_id], [7], q)
    assert not np.allclose(without, with_q)


def test_kws_empty_keyword_set(params):
    u = encode(params, stream(10, "u").normal(size=(10, 8)))
    pred = kws_detect(params, u, [])
    assert len(pred) == 0


def test_kws_probabilities_in_unit_interval(params):
    u = encode(params, stream(11, "u").normal(size=(10, 8)))
    pred = kws_detect(params, u, [[7], [8, 9], [10, 11, 12, 13]])
    assert len(pred) == 3
    assert ((pred.probabilities >= 0) & (pred.probabilities <= 1)).all()
    assert pred.decisions.dtype == bool


def test_kws_rejects_overlong_keyword(params):
    u = encode(params, stream(12, "u").normal(size=(10, 8)))
    with pytest.raises(ModelError, match="1..4"):
        kws_detect(params, u, [[7, 8, 9, 10, 11]])


def test_attention_block_shape_and_row_sums(params, vocab):
    fresh = init_params(CFG, seed=11)
    q = init_prefix(fresh, 3, seed=5)
    u = encode(fresh, stream(13, "u").normal(size=(10, 8)))
    prompt = [vocab.sop_id, 10, 11, vocab.delim_id, 12, vocab.sot_id]
    t_ids = [7, 8, 9]
    for layer in range(CFG.n_dec_layers):
        block, row_sums = prompt_attention_block(fresh, u, prompt, t_ids, q, layer)
        assert block.shape == (len(prompt), len(t_ids))
        assert np.allclose(row_sums, 1.0, atol=1e-9)
    with pytest.raises(ModelError, match="layer"):
        prompt_attention_block(fresh, u, prompt, t_ids, q, CFG.n_dec_layers)


def test_group_hash_tracks_content(params):
    h1 = param_group_hash(params.encoder)
    h2 = param_group_hash(params.encoder)
    assert h1 == h2
    other = init_params(CFG, seed=12)
    assert param_group_hash(other.encoder) != h1


def test_param_count(params):
    assert param_count({"q": Tensor(np.zeros((12, 64)))}) == 768
    assert param_count(params.prefix) == 0
