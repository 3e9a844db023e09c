"""End-to-end evaluation: condition reports, prefix-length ablation, and
attention export.

Per-utterance evaluation keyword sets are derived from (seed, utterance
index) alone, so every condition scores against identical keywords and a
rerun with the same seed reproduces the report byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .config import RunConfig
from .errors import KwbiasError
from .metrics import KeywordF1, WerBreakdown, compute_wer, keyword_f1
from .model import (
    ModelParams,
    encode,
    kws_detect,
    param_count,
    prompt_attention_block,
    transcribe_greedy,
)
from .prompts import KeywordSet, assemble_prompt, kws_to_prompt, prompt_keyword_spans, select_eval_keywords
from .rng import stream
from .synth import Utterance
from .text import TfidfTable, Vocab, normalize
from .training import TrainConfig, train_run


class EvalError(KwbiasError):
    pass


CONDITIONS = ("baseline", "baseline+prompt", "ft", "pt", "ft-oracle", "pt-oracle")

# Which trained model each condition runs, and whether the prompt comes
# from the keyword spotter, the ground-truth positives, or is empty.
_CONDITION_MODEL = {
    "baseline": "base",
    "baseline+prompt": "base",
    "ft": "ft",
    "ft-oracle": "ft",
    "pt": "pt",
    "pt-oracle": "pt",
}


@dataclass(frozen=True)
class ConditionReport:
    condition: str
    wer: WerBreakdown
    f1: KeywordF1
    trainable_params: int


@dataclass(frozen=True)
class EvalContext:
    """Everything an evaluation pass needs besides the model parameters."""

    vocab: Vocab
    tfidf: TfidfTable
    negatives_pool: tuple[str, ...]
    seed: int
    n_keywords: int = 20
    n_positives: int = 3
    kws_threshold: float = 0.5

    def keywords_for(self, index: int, transcript: str) -> KeywordSet:
        rng = stream(self.seed, "eval-kw", index)
        return select_eval_keywords(
            self.vocab,
            transcript,
            self.tfidf,
            self.negatives_pool,
            rng,
            n_positives=self.n_positives,
            n_negatives=self.n_keywords - self.n_positives,
        )


def make_eval_context(cfg: RunConfig, vocab: Vocab, train_texts: Sequence[str]) -> EvalContext:
    from .text import tfidf_scores

    return EvalContext(
        vocab=vocab,
        tfidf=tfidf_scores(train_texts),
        negatives_pool=tuple(train_texts),
        seed=cfg.seed,
        n_keywords=cfg.eval_keywords,
        n_positives=cfg.eval_positives,
        kws_threshold=cfg.kws_threshold,
    )


def _condition_prompt(
    condition: str,
    keywords: KeywordSet,
    u: Tensor,
    kws_params: ModelParams | None,
    vocab: Vocab,
    threshold: float,
) -> list[int]:
    if condition == "baseline":
        return assemble_prompt(vocab, ())
    if condition.endswith("-oracle"):
        return assemble_prompt(vocab, keywords.positives())
    if kws_params is None:
        raise EvalError(f"condition {condition!r} needs a keyword-spotter checkpoint")
    pred = kws_detect(kws_params, u, [kw.tokens for kw in keywords], threshold=threshold)
    return kws_to_prompt(vocab, list(pred.decisions), keywords)


def _trainable_count(condition: str, params: ModelParams) -> int:
    if condition.startswith("ft"):
        return param_count(params.decoder)
    if condition.startswith("pt"):
        return param_count(params.prefix)
    return 0


def evaluate_condition(
    condition: str,
    params: ModelParams,
    kws_params: ModelParams | None,
    test_set: Sequence[Utterance],
    ctx: EvalContext,
) -> ConditionReport:
    """Greedy-transcribe the test set under one prompting condition."""
    if condition not in CONDITIONS:
        raise EvalError(f"unknown condition {condition!r}, expected one of {CONDITIONS}")
    vocab = ctx.vocab
    prefix = params.prefix.get("q")
    wer_total = WerBreakdown(0, 0, 0, 0)
    refs: list[str] = []
    hyps: list[str] = []
    keyword_sets: list[KeywordSet] = []
    for index, utt in enumerate(test_set):
        keywords = ctx.keywords_for(index, utt.text)
        u = encode(params, utt.frames)
        prompt = _condition_prompt(condition, keywords, u, kws_params, vocab, ctx.kws_threshold)
        max_len = params.config.max_tgt_len - len(prompt) - (prefix.shape[0] if prefix is not None else 0) - 1
        hyp_ids = transcribe_greedy(params, u, prompt, prefix, vocab.eot_id, max_len)
        hypothesis = normalize(vocab.detokenize(hyp_ids, skip_reserved=True))
        reference = normalize(utt.text)
        wer_total = wer_total + compute_wer(reference, hypothesis)
        refs.append(reference)
        hyps.append(hypothesis)
        keyword_sets.append(keywords)
    f1 = keyword_f1(refs, hyps, keyword_sets)
    return ConditionReport(condition, wer_total, f1, _trainable_count(condition, params))


def evaluate_conditions(
    conditions: Sequence[str],
    checkpoints: dict[str, ModelParams],
    kws_params: ModelParams | None,
    test_set: Sequence[Utterance],
    ctx: EvalContext,
) -> list[ConditionReport]:
    reports = []
    for condition in conditions:
        role = _CONDITION_MODEL.get(condition)
        if role is None:
            raise EvalError(f"unknown condition {condition!r}, expected one of {CONDITIONS}")
        if role not in checkpoints:
            raise EvalError(f"condition {condition!r} needs the {role!r} checkpoint")
        reports.append(evaluate_condition(condition, checkpoints[role], kws_params, test_set, ctx))
    return reports


# ---------------------------------------------------------------------------
# reports


def report_csv(reports: Sequence[ConditionReport]) -> str:
    lines = ["condition,wer,S,D,I,f1,tp,fp,fn,params"]
    for r in reports:
        lines.append(
            f"{r.condition},{r.wer.wer:.6f},{r.wer.substitutions},{r.wer.deletions},"
            f"{r.wer.insertions},{r.f1.f1:.6f},{r.f1.true_positives},{r.f1.false_positives},"
            f"{r.f1.false_negatives},{r.trainable_params}"
        )
    return "\n".join(lines) + "\n"


def report_table(reports: Sequence[ConditionReport]) -> str:
    header = f"{'condition':<16} {'WER':>8} {'F1':>8} {'S':>5} {'D':>5} {'I':>5} {'params':>8}"
    rows = [header, "-" * len(header)]
    for r in reports:
        rows.append(
            f"{r.condition:<16} {r.wer.wer:>8.4f} {r.f1.f1:>8.4f} "
            f"{r.wer.substitutions:>5} {r.wer.deletions:>5} {r.wer.insertions:>5} "
            f"{r.trainable_params:>8}"
        )
    by_name = {r.condition: r for r in reports}
    if "baseline" in by_name and "baseline+prompt" in by_name:
        base, prompted = by_name["baseline"], by_name["baseline+prompt"]
        delta = prompted.wer.insertions / prompted.wer.ref_words - base.wer.insertions / base.wer.ref_words
        rows.append("")
        rows.append(f"insertion-rate delta (baseline+prompt - baseline): {delta:+.4f}")
    return "\n".join(rows) + "\n"


def write_reports(out_dir: Path | str, reports: Sequence[ConditionReport]) -> tuple[Path, Path]:
    out = Path(out_dir)
    csv_path = out / "report.csv"
    txt_path = out / "report.txt"
    csv_path.write_text(report_csv(reports), encoding="utf-8")
    txt_path.write_text(report_table(reports), encoding="utf-8")
    return csv_path, txt_path


# ---------------------------------------------------------------------------
# ablation


def clone_params(params: ModelParams) -> ModelParams:
    groups = {
        gname: {name: Tensor(t.data.copy()) for name, t in group.items()}
        for gname, group in params.groups().items()
    }
    return ModelParams(config=params.config, encoder=groups["encoder"], decoder=groups["decoder"],
                       kws=groups["kws"], prefix=groups["prefix"])


def prompt_tune_and_evaluate(
    stack_params: ModelParams,
    prefix_len: int,
    train_set: Sequence[Utterance],
    test_set: Sequence[Utterance],
    ctx: EvalContext,
    cfg: RunConfig,
    condition: str = "pt",
) -> tuple[ModelParams, ConditionReport]:
    params = clone_params(stack_params)
    params.prefix = {}
    tc = TrainConfig(
        mode="pt",
        steps=cfg.steps_pt,
        learning_rate=cfg.lr_pt,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        prefix_len=prefix_len,
    )
    train_run(tc, train_set, ctx.vocab, params)
    report = evaluate_condition(condition, params, stack_params, test_set, ctx)
    return params, report


def ablate_prefix_lengths(
    stack_params: ModelParams,
    lengths: Sequence[int],
    train_set: Sequence[Utterance],
    test_set: Sequence[Utterance],
    ctx: EvalContext,
    cfg: RunConfig,
) -> list[dict]:
    """One prompt-tuning run + evaluation per prefix length, ascending."""
    if not lengths:
        raise EvalError("ablation needs at least one prefix length")
    rows = []
    for n in sorted(lengths):
        _, report = prompt_tune_and_evaluate(stack_params, n, train_set, test_set, ctx, cfg)
        rows.append({"prefix_len": n, "wer": report.wer.wer, "f1": report.f1.f1})
    return rows


def ablation_csv(rows: Sequence[dict]) -> str:
    lines = ["prefix_len,wer,f1"]
    for r in rows:
        lines.append(f"{r['prefix_len']},{r['wer']:.6f},{r['f1']:.6f}")
    return "\n".join(lines) + "\n"


def ablation_table(rows: Sequence[dict]) -> str:
    lines = [f"{'tokens':>6} {'WER':>8} {'F1':>8}", "-" * 24]
    for r in rows:
        lines.append(f"{r['prefix_len']:>6} {r['wer']:>8.4f} {r['f1']:>8.4f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# attention export


@dataclass(frozen=True)
class AttentionRecord:
    index: int
    block: np.ndarray  # (n prompt tokens, n output tokens)
    row_sums: np.ndarray
    prompt_labels: tuple[str, ...]
    output_labels: tuple[str, ...]
    keyword_hit: bool | None  # peak lands in the keyword's emission columns


def _find_subsequence(haystack: Sequence[int], needle: Sequence[int]) -> int:
    k = len(needle)
    for i in range(len(haystack) - k + 1):
        if list(haystack[i : i + k]) == list(needle):
            return i
    return -1


def export_attention(
    params: ModelParams,
    test_set: Sequence[Utterance],
    ctx: EvalContext,
    jargon_words: Sequence[str],
    layer: int,
    limit: int | None = None,
) -> list[AttentionRecord]:
    """Teacher-forced attention blocks for jargon-bearing oracle prompts.

    For each utterance whose oracle prompt carries a jargon keyword, the
    record notes whether the keyword's prompt rows reach their maximum in
    a column where that keyword's tokens are being emitted.
    """
    vocab = ctx.vocab
    prefix = params.prefix.get("q")
    jargon = set(jargon_words)
    records: list[AttentionRecord] = []
    for index, utt in enumerate(test_set):
        if limit is not None and len(records) >= limit:
            break
        keywords = ctx.keywords_for(index, utt.text)
        positives = keywords.positives()
        jargon_kws = [kw for kw in positives if kw.surface in jargon]
        if not jargon_kws:
            continue
        prompt = assemble_prompt(vocab, positives)
        spans = prompt_keyword_spans(positives)
        t_ids = vocab.tokenize(utt.text)
        u = encode(params, utt.frames)
        block, row_sums = prompt_attention_block(params, u, prompt, t_ids, prefix, layer)

        kw = jargon_kws[0]
        span = spans[positives.index(kw)]
        hit: bool | None = None
        emit_start = _find_subsequence(t_ids, kw.tokens)
        if emit_start < 0:
            # First-word variant tokenizes without the leading space.
            alt = tuple(vocab.tokenize(kw.surface))
            emit_start = _find_subsequence(t_ids, alt)
            emit_len = len(alt)
        else:
            emit_len = len(kw.tokens)
        if emit_start >= 0:
            profile = block[span[0] : span[1]].max(axis=0)
            peak = int(np.argmax(profile))
            hit = emit_start <= peak < emit_start + emit_len

        prompt_labels = tuple(vocab.units[i] for i in prompt)
        output_labels = tuple(vocab.units[i] for i in t_ids)
        records.append(
            AttentionRecord(index, block, row_sums, prompt_labels, output_labels, hit)
        )
    return records


def write_attention_record(path: Path | str, record: AttentionRecord) -> None:
    """Plain-text matrix with row/column label headers for external plotting."""
    lines = [
        "# rows: " + "\t".join(record.prompt_labels),
        "# cols: " + "\t".join(record.output_labels),
    ]
    for row in record.block:
        lines.append("\t".join(f"{x:.6f}" for x in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# full training stack


def train_stack(
    cfg: RunConfig,
    train_set: Sequence[Utterance],
    vocab: Vocab,
    seed: int | None = None,
    modes: Sequence[str] = ("base-asr", "kws", "ft", "pt"),
) -> dict[str, ModelParams]:
    """Train base -> kws -> {ft, pt} and return each stage's parameters."""
    from .model import init_params

    seed = cfg.seed if seed is None else seed
    out: dict[str, ModelParams] = {}
    params = init_params(cfg.model_config(len(vocab)), seed)
    train_run(
        TrainConfig(mode="base-asr", steps=cfg.steps_asr, learning_rate=cfg.lr_asr,
                    batch_size=cfg.batch_size, seed=seed, prompt_exposure=cfg.prompt_exposure),
        train_set, vocab, params,
    )
    out["base"] = params

    kws_params = clone_params(params)
    train_run(
        TrainConfig(mode="kws", steps=cfg.steps_kws, learning_rate=cfg.lr_kws,
                    batch_size=cfg.batch_size, seed=seed),
        train_set, vocab, kws_params,
    )
    out["kws"] = kws_params

    if "ft" in modes:
        ft_params = clone_params(kws_params)
        train_run(
            TrainConfig(mode="ft", steps=cfg.steps_ft, learning_rate=cfg.lr_ft,
                        batch_size=cfg.batch_size, seed=seed),
            train_set, vocab, ft_params,
        )
        out["ft"] = ft_params

    if "pt" in modes:
        pt_params = clone_params(kws_params)
        train_run(
            TrainConfig(mode="pt", steps=cfg.steps_pt, learning_rate=cfg.lr_pt,
                        batch_size=cfg.batch_size, seed=seed, prefix_len=cfg.prefix_len),
            train_set, vocab, pt_params,
        )
        out["pt"] = pt_params
    return out
