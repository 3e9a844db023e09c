"""Evaluation harness structure: conditions, reports, ablation, attention.

These tests run on a deliberately tiny corpus and very short training so
they exercise plumbing, not model quality; quality lives in the
acceptance suite.
"""

import numpy as np
import pytest

from kwbias.config import RunConfig
from kwbias.harness import (
    CONDITIONS,
    EvalError,
    ablate_prefix_lengths,
    ablation_csv,
    ablation_table,
    clone_params,
    evaluate_condition,
    evaluate_conditions,
    export_attention,
    make_eval_context,
    report_csv,
    report_table,
    train_stack,
    write_attention_record,
    write_reports,
)
from kwbias.model import param_group_hash
from kwbias.synth import generate_corpus
from kwbias.text import build_vocab

TINY = RunConfig(
    train_size=50, dev_size=8, test_size=8,
    n_common=5, n_jargon=20, jargon_per_utterance=2,
    min_words=4, max_words=5, n_mels=12,
    d_model=32, n_heads=4, n_enc_layers=1, n_dec_layers=1, d_ff=64,
    steps_asr=40, steps_kws=30, steps_ft=25, steps_pt=25,
    vocab_target=140, seed=5,
)


@pytest.fixture(scope="module")
def tiny_world():
    splits, bank = generate_corpus(TINY.synth_spec())
    vocab = build_vocab([u.text for u in splits["train"]], TINY.vocab_target)
    stack = train_stack(TINY, splits["train"], vocab, seed=TINY.seed)
    ctx = make_eval_context(TINY, vocab, [u.text for u in splits["train"]])
    return splits, bank, vocab, stack, ctx


def test_train_stack_produces_all_stages(tiny_world):
    _, _, _, stack, _ = tiny_world
    assert set(stack) == {"base", "kws", "ft", "pt"}
    assert "q" in stack["pt"].prefix
    assert stack["ft"].prefix == {}
    # base encoder carried through frozen stages
    enc_hash = param_group_hash(stack["base"].encoder)
    for role in ("kws", "ft", "pt"):
        assert param_group_hash(stack[role].encoder) == enc_hash


def test_eval_keyword_sets_are_stable_per_index(tiny_world):
    splits, _, _, _, ctx = tiny_world
    u = splits["test"][0]
    a = ctx.keywords_for(0, u.text)
    b = ctx.keywords_for(0, u.text)
    assert a.keywords == b.keywords
    assert len(a) == TINY.eval_keywords
    assert len(a.positives()) == TINY.eval_positives


def test_oracle_condition_bypasses_the_spotter(tiny_world):
    splits, _, vocab, stack, ctx = tiny_world
    report = evaluate_condition("pt-oracle", stack["pt"], None, splits["test"], ctx)
    assert report.condition == "pt-oracle"
    assert report.trainable_params == TINY.prefix_len * TINY.d_model


def test_kws_conditions_require_spotter(tiny_world):
    splits, _, _, stack, ctx = tiny_world
    with pytest.raises(EvalError, match="keyword-spotter"):
        evaluate_condition("baseline+prompt", stack["base"], None, splits["test"], ctx)


def test_unknown_condition_rejected(tiny_world):
    splits, _, _, stack, ctx = tiny_world
    with pytest.raises(EvalError, match="unknown condition"):
        evaluate_condition("zero-shot", stack["base"], None, splits["test"], ctx)
    with pytest.raises(EvalError, match="unknown condition"):
        evaluate_conditions(["zero-shot"], stack, None, splits["test"], ctx)


def test_missing_checkpoint_for_condition(tiny_world):
    splits, _, _, stack, ctx = tiny_world
    partial = {"base": stack["base"]}
    with pytest.raises(EvalError, match="'pt' checkpoint"):
        evaluate_conditions(["pt"], partial, stack["kws"], splits["test"], ctx)


def test_reports_are_deterministic_and_well_formed(tiny_world, tmp_path):
    splits, _, _, stack, ctx = tiny_world
    reports = evaluate_conditions(
        ["baseline", "baseline+prompt", "pt-oracle"], stack, stack["kws"], splits["test"], ctx
    )
    again = evaluate_conditions(
        ["baseline", "baseline+prompt", "pt-oracle"], stack, stack["kws"], splits["test"], ctx
    )
    assert report_csv(reports) == report_csv(again)

    csv = report_csv(reports)
    header, *rows = csv.strip().split("\n")
    assert header == "condition,wer,S,D,I,f1,tp,fp,fn,params"
    assert len(rows) == 3
    assert rows[0].startswith("baseline,")

    table = report_table(reports)
    assert "insertion-rate delta" in table  # both baseline conditions present

    csv_path, txt_path = write_reports(tmp_path, reports)
    assert csv_path.read_text() == csv
    assert txt_path.read_text() == table


def test_every_condition_name_is_reportable(tiny_world):
    splits, _, _, stack, ctx = tiny_world
    reports = evaluate_conditions(list(CONDITIONS), stack, stack["kws"], splits["test"][:3], ctx)
    assert [r.condition for r in reports] == list(CONDITIONS)
    for r in reports:
        assert np.isfinite(r.wer.wer)
        assert 0.0 <= r.f1.f1 <= 1.0


def test_clone_params_is_deep(tiny_world):
    _, _, _, stack, _ = tiny_world
    clone = clone_params(stack["base"])
    clone.encoder["in_w"].data[0, 0] += 1.0
    assert stack["base"].encoder["in_w"].data[0, 0] != clone.encoder["in_w"].data[0, 0]


def test_ablation_rows_ascending_and_rerunnable(tiny_world):
    splits, _, _, stack, ctx = tiny_world
    lengths = [6, 2]
    rows = ablate_prefix_lengths(stack["kws"], lengths, splits["train"], splits["test"], ctx, TINY)
    assert [r["prefix_len"] for r in rows] == [2, 6]
    rows2 = ablate_prefix_lengths(stack["kws"], lengths, splits["train"], splits["test"], ctx, TINY)
    assert rows == rows2
    csv = ablation_csv(rows)
    assert csv.splitlines()[0] == "prefix_len,wer,f1"
    assert len(csv.strip().splitlines()) == 3
    assert "tokens" in ablation_table(rows)
    with pytest.raises(EvalError, match="at least one"):
        ablate_prefix_lengths(stack["kws"], [], splits["train"], splits["test"], ctx, TINY)


def test_attention_export_records(tiny_world, tmp_path):
    splits, bank, vocab, stack, ctx = tiny_world
    records = export_attention(stack["pt"], splits["test"], ctx, bank.jargon, layer=0)
    jargon_present = [
        u for i, u in enumerate(splits["test"])
        if any(kw.surface in set(bank.jargon) for kw in ctx.keywords_for(i, u.text).positives())
    ]
    assert len(records) == len(jargon_present)
    for rec in records:
        n_prompt = len(rec.prompt_labels)
        n_out = len(rec.output_labels)
        assert rec.block.shape == (n_prompt, n_out)
        assert np.allclose(rec.row_sums, 1.0, atol=1e-9)
        path = tmp_path / f"r{rec.index}.mat"
        write_attention_record(path, rec)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("# rows: <sop>")
        assert lines[1].startswith("# cols: ")
        assert len(lines) == 2 + n_prompt
