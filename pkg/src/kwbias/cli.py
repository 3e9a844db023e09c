"""Command-line interface.

Subcommands cover the whole pipeline: `gen-data`, the four training
stages (`train-asr`, `train-kws`, `finetune`, `prompt-tune`),
`evaluate`, `ablate`, `attn-export`, and a single-utterance `transcribe`
demo.  Every subcommand resolves its configuration (file < flags), runs,
and writes `config.resolved` with input-checkpoint hashes into the
output directory, which is enough to rerun it bit-identically.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from .audio import load_wav, log_mel, resample
from .config import ConfigError, RunConfig, parse_config, write_resolved
from .errors import KwbiasError
from .harness import (
    CONDITIONS,
    ablate_prefix_lengths,
    ablation_csv,
    ablation_table,
    evaluate_conditions,
    export_attention,
    make_eval_context,
    write_attention_record,
    write_reports,
)
from .model import encode, init_params, kws_detect, transcribe_greedy
from .prompts import Keyword, KeywordSet, assemble_prompt, kws_to_prompt
from .synth import dataset_load, dataset_save, generate_corpus, word_bank_load_words, word_bank_save
from .text import Vocab, build_vocab, normalize
from .training import TrainConfig, checkpoint_load, checkpoint_save, train_run


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _overrides(args: argparse.Namespace) -> dict[str, str]:
    merged: dict[str, str] = {}
    for item in args.set or []:
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        merged[key.strip()] = value.strip()
    if args.seed is not None:
        merged["seed"] = str(args.seed)
    return merged


def _config(args: argparse.Namespace, extra: dict[str, str] | None = None) -> RunConfig:
    overrides = _overrides(args)
    overrides.update(extra or {})
    return parse_config(args.config, overrides)


def _provenance(command: str, inputs: dict[str, Path]) -> dict[str, str]:
    record = {"command": command}
    for role, path in sorted(inputs.items()):
        record[f"input.{role}"] = f"{path} sha256={_sha256_file(Path(path))}"
    return record


def _load_data(data_dir: Path | str, splits: tuple[str, ...] = ("train", "dev", "test")):
    data_dir = Path(data_dir)
    vocab = Vocab.load(data_dir / "vocab.tsv")
    sets = {name: dataset_load(data_dir / f"{name}.ds") for name in splits}
    return vocab, sets


def _write_metrics(out: Path, losses: list[float]) -> None:
    (out / "metrics.log").write_text(
        "".join(f"{i}\t{v!r}\n" for i, v in enumerate(losses)), encoding="utf-8"
    )


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    spec = cfg.synth_spec()
    splits, bank = generate_corpus(spec)
    for name, utts in splits.items():
        dataset_save(out / f"{name}.ds", utts, spec)
    vocab = build_vocab([u.text for u in splits["train"]], cfg.vocab_target)
    vocab.save(out / "vocab.tsv")
    word_bank_save(out / "words.json", bank)
    write_resolved(out, cfg, _provenance("gen-data", {}))
    print(f"wrote {sum(len(u) for u in splits.values())} utterances and a "
          f"{len(vocab)}-unit vocabulary to {out}")
    return 0


def _train_stage(args: argparse.Namespace, mode: str, source_ckpt: str | None) -> int:
    step_key = {"base-asr": "steps_asr", "kws": "steps_kws", "ft": "steps_ft", "pt": "steps_pt"}[mode]
    lr_key = {"base-asr": "lr_asr", "kws": "lr_kws", "ft": "lr_ft", "pt": "lr_pt"}[mode]
    extra: dict[str, str] = {}
    if args.steps is not None:
        extra[step_key] = str(args.steps)
    if args.learning_rate is not None:
        extra[lr_key] = str(args.learning_rate)
    if getattr(args, "prefix_len", None) is not None:
        extra["prefix_len"] = str(args.prefix_len)
    cfg = _config(args, extra)
    out = _out_dir(args)
    vocab, sets = _load_data(args.data, ("train",))

    inputs: dict[str, Path] = {"data": Path(args.data) / "train.ds"}
    if source_ckpt is None:
        params = init_params(cfg.model_config(len(vocab)), cfg.seed)
    else:
        ckpt_path = Path(getattr(args, source_ckpt.replace("-", "_")))
        inputs[source_ckpt] = ckpt_path
        params, _ = checkpoint_load(ckpt_path, vocab.content_hash)

    tc = TrainConfig(
        mode=mode,
        steps=getattr(cfg, step_key),
        learning_rate=getattr(cfg, lr_key),
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        prefix_len=cfg.prefix_len,
        prompt_exposure=cfg.prompt_exposure,
    )
    losses = train_run(tc, sets["train"], vocab, params)
    ckpt_out = out / f"{mode}.ckpt"
    checkpoint_save(ckpt_out, params, vocab.content_hash, cfg.seed)
    _write_metrics(out, losses)
    write_resolved(out, cfg, _provenance(mode, inputs))
    print(f"{mode}: {tc.steps} steps, final loss {losses[-1]:.4f}, checkpoint {ckpt_out}")
    return 0


def cmd_train_asr(args: argparse.Namespace) -> int:
    return _train_stage(args, "base-asr", None)


def cmd_train_kws(args: argparse.Namespace) -> int:
    return _train_stage(args, "kws", "asr-ckpt")


def cmd_finetune(args: argparse.Namespace) -> int:
    return _train_stage(args, "ft", "kws-ckpt")


def cmd_prompt_tune(args: argparse.Namespace) -> int:
    return _train_stage(args, "pt", "kws-ckpt")


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    vocab, sets = _load_data(args.data, ("train", "test"))
    conditions = [c.strip() for c in args.conditions.split(",") if c.strip()]

    inputs: dict[str, Path] = {"data": Path(args.data) / "test.ds"}
    checkpoints = {}
    for role, flag in (("base", args.base_ckpt), ("ft", args.ft_ckpt), ("pt", args.pt_ckpt)):
        if flag is not None:
            inputs[f"{role}-ckpt"] = Path(flag)
            checkpoints[role], _ = checkpoint_load(flag, vocab.content_hash)
    kws_params = None
    if args.kws_ckpt is not None:
        inputs["kws-ckpt"] = Path(args.kws_ckpt)
        kws_params, _ = checkpoint_load(args.kws_ckpt, vocab.content_hash)

    ctx = make_eval_context(cfg, vocab, [u.text for u in sets["train"]])
    reports = evaluate_conditions(conditions, checkpoints, kws_params, sets["test"], ctx)
    write_reports(out, reports)
    write_resolved(out, cfg, _provenance("evaluate", inputs))
    print((out / "report.txt").read_text(), end="")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    extra = {"ablate_lengths": args.lengths} if args.lengths else {}
    cfg = _config(args, extra)
    out = _out_dir(args)
    vocab, sets = _load_data(args.data, ("train", "test"))
    stack, _ = checkpoint_load(args.kws_ckpt, vocab.content_hash)
    ctx = make_eval_context(cfg, vocab, [u.text for u in sets["train"]])
    rows = ablate_prefix_lengths(stack, cfg.ablation_lengths(), sets["train"], sets["test"], ctx, cfg)
    (out / "ablation.csv").write_text(ablation_csv(rows), encoding="utf-8")
    (out / "ablation.txt").write_text(ablation_table(rows), encoding="utf-8")
    write_resolved(out, cfg, _provenance("ablate", {"kws-ckpt": Path(args.kws_ckpt),
                                                    "data": Path(args.data) / "train.ds"}))
    print((out / "ablation.txt").read_text(), end="")
    return 0


def cmd_attn_export(args: argparse.Namespace) -> int:
    extra = {"attn_layer": str(args.layer)} if args.layer is not None else {}
    cfg = _config(args, extra)
    out = _out_dir(args)
    vocab, sets = _load_data(args.data, ("train", "test"))
    params, _ = checkpoint_load(args.pt_ckpt, vocab.content_hash)
    words = word_bank_load_words(Path(args.data) / "words.json")
    ctx = make_eval_context(cfg, vocab, [u.text for u in sets["train"]])
    records = export_attention(params, sets["test"], ctx, words["jargon"], cfg.attn_layer,
                               limit=args.limit)
    attn_dir = out / "attn"
    attn_dir.mkdir(exist_ok=True)
    for record in records:
        write_attention_record(attn_dir / f"utt_{record.index:04d}.mat", record)
    scored = [r for r in records if r.keyword_hit is not None]
    hits = sum(r.keyword_hit for r in scored)
    summary = (
        f"records: {len(records)}\n"
        f"keyword-peak hits: {hits}/{len(scored)}\n"
    )
    (out / "attn_summary.txt").write_text(summary, encoding="utf-8")
    write_resolved(out, cfg, _provenance("attn-export", {"pt-ckpt": Path(args.pt_ckpt),
                                                         "data": Path(args.data) / "test.ds"}))
    print(summary, end="")
    return 0


def cmd_transcribe(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    inputs: dict[str, Path] = {"ckpt": Path(args.ckpt)}

    data_dir = Path(args.data) if args.data else None
    if args.wav is None and data_dir is None:
        raise ConfigError("transcribe needs either --wav or --data/--index")
    vocab = Vocab.load(Path(args.vocab) if args.vocab else data_dir / "vocab.tsv")
    params, _ = checkpoint_load(args.ckpt, vocab.content_hash)

    if args.wav is not None:
        inputs["wav"] = Path(args.wav)
        wave = resample(load_wav(args.wav), 16000)
        frames = log_mel(wave, n_mels=params.config.n_mels).frames
    else:
        inputs["data"] = data_dir / "test.ds"
        utts = dataset_load(data_dir / "test.ds")
        frames = utts[args.index].frames

    u = encode(params, frames)
    prefix = params.prefix.get("q")
    lines = []
    if args.keywords:
        surfaces = [normalize(k) for k in args.keywords.split(",") if normalize(k)]
        keywords = KeywordSet(
            tuple(Keyword(surface=s, tokens=tuple(vocab.tokenize(" " + s)), positive=True)
                  for s in dict.fromkeys(surfaces)),
            source="external",
        )
        if args.kws_ckpt is not None:
            inputs["kws-ckpt"] = Path(args.kws_ckpt)
            kws_params, _ = checkpoint_load(args.kws_ckpt, vocab.content_hash)
            pred = kws_detect(kws_params, encode(kws_params, frames),
                              [kw.tokens for kw in keywords], threshold=cfg.kws_threshold)
            prompt = kws_to_prompt(vocab, list(pred.decisions), keywords)
            detected = [kw.surface for kw, d in zip(keywords, pred.decisions) if d]
            lines.append("detected: " + (", ".join(detected) if detected else "(none)"))
        else:
            prompt = assemble_prompt(vocab, keywords)
    else:
        prompt = assemble_prompt(vocab, ())

    max_len = params.config.max_tgt_len - len(prompt) - (prefix.shape[0] if prefix is not None else 0) - 1
    ids = transcribe_greedy(params, u, prompt, prefix, vocab.eot_id, max_len)
    lines.append("transcript: " + normalize(vocab.detokenize(ids, skip_reserved=True)))
    text = "\n".join(lines) + "\n"
    (out / "transcript.txt").write_text(text, encoding="utf-8")
    write_resolved(out, cfg, _provenance("transcribe", inputs))
    print(text, end="")
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="key = value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="override the run seed")
    p.add_argument("--out", required=True, help="output directory for this run")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="directory produced by gen-data")
    p.add_argument("--steps", type=int, default=None, help="override this stage's step count")
    p.add_argument("--learning-rate", type=float, default=None, help="override this stage's learning rate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kwbias",
        description="Keyword-guided contextual biasing for a compact encoder-decoder ASR",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus and vocabulary")
    _add_common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-asr", help="train the base recognizer (encoder+decoder)")
    _add_common(p)
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train_asr)

    p = sub.add_parser("train-kws", help="train the keyword spotting head on a frozen base")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--asr-ckpt", required=True, help="base recognizer checkpoint")
    p.set_defaults(fn=cmd_train_kws)

    p = sub.add_parser("finetune", help="fine-tune the decoder on keyword-prompted data")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--kws-ckpt", required=True, help="checkpoint with trained keyword head")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("prompt-tune", help="train the soft prompt prefix, everything else frozen")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--kws-ckpt", required=True, help="checkpoint with trained keyword head")
    p.add_argument("--prefix-len", type=int, default=None, help="number of soft prompt tokens")
    p.set_defaults(fn=cmd_prompt_tune)

    p = sub.add_parser("evaluate", help="score prompting conditions on the test split")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--conditions", default="baseline,pt,pt-oracle",
                   help=f"comma list from {','.join(CONDITIONS)}")
    p.add_argument("--base-ckpt", default=None)
    p.add_argument("--ft-ckpt", default=None)
    p.add_argument("--pt-ckpt", default=None)
    p.add_argument("--kws-ckpt", default=None)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate", help="prompt-tune and score a range of prefix lengths")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--kws-ckpt", required=True)
    p.add_argument("--lengths", default=None, help="comma list, default 4,8,12,16,20,24")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("attn-export", help="export prompt-attention matrices for plotting")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--pt-ckpt", required=True)
    p.add_argument("--layer", type=int, default=None, help="decoder layer to export")
    p.add_argument("--limit", type=int, default=None, help="cap on exported utterances")
    p.set_defaults(fn=cmd_attn_export)

    p = sub.add_parser("transcribe", help="transcribe one WAV or dataset utterance")
    _add_common(p)
    p.add_argument("--ckpt", required=True, help="recognizer checkpoint")
    p.add_argument("--wav", default=None, help="16-bit PCM WAV file")
    p.add_argument("--data", default=None, help="dataset directory (with --index)")
    p.add_argument("--index", type=int, default=0, help="utterance index into the test split")
    p.add_argument("--vocab", default=None, help="vocabulary file (defaults to data dir)")
    p.add_argument("--keywords", default=None, help="comma-separated biasing keywords")
    p.add_argument("--kws-ckpt", default=None, help="filter --keywords through the spotter")
    p.set_defaults(fn=cmd_transcribe)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except KwbiasError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
