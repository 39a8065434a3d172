"""Command-line entry point: gen, vocab, config, train, decode, eval, bench."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .features import NormStats, fit_norm
from .manifest import Entry, ManifestError, audio_seconds, load_features, read_manifest
from .metrics import BenchItem, corpus_cer, edit_distance, measure_rtf
from .model import ModelConfig, pad_batch, toy_model_config
from .search import SearchConfig
from .trainer import Checkpoint, TrainConfig, Trainer, Utterance, load_checkpoint
from .vocab import Vocabulary, build_vocab


class CliError(Exception):
    pass


def _write_atomic(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _utterances(entries: List[Entry], vocab: Vocabulary, stats: Optional[NormStats]) -> List[Utterance]:
    return [Utterance(e.uid, load_features(e, stats), vocab.encode(e.text), e.text) for e in entries]


# --- subcommands -------------------------------------------------------------------


def cmd_gen(args) -> int:
    from .toydata import ToyTaskSpec, generate, generate_wav, write_corpus

    spec = ToyTaskSpec(vocab_size=args.vocab_size, noise=args.noise, seed=args.seed)
    if args.wav:
        path = generate_wav(spec, args.num, args.out)
    else:
        path = write_corpus(generate(spec, args.num), args.out)
    print(f"wrote {args.num} utterances to {path}")
    return 0


def cmd_vocab(args) -> int:
    entries = read_manifest(args.manifest, check_files=False)
    vocab = build_vocab(e.text for e in entries)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    vocab.save(args.out)
    print(f"vocabulary of {len(vocab)} symbols ({len(vocab.chars)} characters) -> {args.out}")
    return 0


def cmd_config(args) -> int:
    if args.toy:
        model = toy_model_config(args.encoder, args.decoder, 16)
        cfg = TrainConfig(model=_model_fields(model), steps=5000, batch_size=16, peak_lr=2e-3,
                          warmup_steps=300, ema_decay=0.99, variational_noise=False,
                          specaugment_cfg=(2, 0.05, 2, 10), log_every=50, eval_every=250)
    else:
        model = ModelConfig(args.encoder, args.decoder)
        sa = (10, 0.05, 2, 27) if args.encoder == "conformer" else (1, 50, 1, 15)
        cfg = TrainConfig(model=_model_fields(model), specaugment_cfg=sa)
    text = json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        _write_atomic(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return 0


def _model_fields(model: ModelConfig) -> dict:
    d = model.to_dict()
    d.pop("vocab_size")  # taken from the vocabulary at training time
    return d


def cmd_train(args) -> int:
    cfg = TrainConfig.load(args.config)
    cfg.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_entries = read_manifest(args.train)
    vocab = Vocabulary.load(args.vocab) if args.vocab else build_vocab(e.text for e in train_entries)
    stats = fit_norm(load_features(e) for e in train_entries)
    train = _utterances(train_entries, vocab, stats)
    dev = _utterances(read_manifest(args.dev), vocab, stats) if args.dev else []
    vocab.save(out / "vocab.txt")
    stats.save(out / "norm.json")
    _write_atomic(out / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    trainer = Trainer(cfg, vocab, stats)
    records = trainer.fit(train, dev, log_path=out / "metrics.jsonl", checkpoint_dir=out,
                          on_record=lambda r: print(json.dumps(r, sort_keys=True), flush=True))
    print(f"trained {trainer.step} steps ({trainer.skipped} skipped); checkpoint {out / 'final.npz'}")
    dev_cers = [r["cer"] for r in records if r["kind"] == "dev"]
    if dev_cers:
        print(f"final dev CER {dev_cers[-1]:.2f}%")
    return 0


def _load_for_inference(args) -> Checkpoint:
    ckpt = load_checkpoint(args.checkpoint)
    if getattr(args, "config", None):
        cfg = TrainConfig.load(args.config)
        fields = dict(cfg.model)
        fields["vocab_size"] = ckpt.model_config.vocab_size
        wanted = ModelConfig.from_dict(fields).to_dict()
        have = ckpt.model_config.to_dict()
        if wanted != have:
            raise CliError("architecture mismatch between checkpoint and config\n"
                           f"checkpoint: {json.dumps(have, sort_keys=True)}\n"
                           f"config:     {json.dumps(wanted, sort_keys=True)}")
    return ckpt


def _search_cfg(args) -> SearchConfig:
    return SearchConfig(beam_width=args.beam, eos_logit_threshold=args.eos_threshold,
                        max_output_length=args.max_length, max_symbols_per_frame=args.max_symbols)


def cmd_decode(args) -> int:
    ckpt = _load_for_inference(args)
    model = ckpt.build_model()
    vocab = Vocabulary(ckpt.manifest["vocab"])
    stats = NormStats(**ckpt.manifest["norm"]) if ckpt.manifest["norm"] else None
    entries = read_manifest(args.manifest)
    search_cfg = _search_cfg(args)
    lines = []
    for i in range(0, len(entries), args.batch_size):
        chunk = entries[i:i + args.batch_size]
        feats, lens = pad_batch([load_features(e, stats) for e in chunk])
        for e, hyp in zip(chunk, model.decode(feats, lens, search_cfg, greedy=args.greedy)):
            lines.append(json.dumps({"id": e.uid, "text": vocab.decode(hyp.tokens),
                                     "score": round(float(hyp.score), 6)}, ensure_ascii=False))
    _write_atomic(Path(args.out), "".join(line + "\n" for line in lines))
    print(f"decoded {len(lines)} utterances -> {args.out}")
    return 0


def read_hypotheses(path) -> dict:
    hyps = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            hyps[rec["id"]] = rec["text"]
        except (ValueError, KeyError, TypeError) as exc:
            raise ManifestError(f"{path}:{lineno}: malformed hypothesis line ({exc})") from None
    return hyps


def cmd_eval(args) -> int:
    refs = read_manifest(args.ref, check_files=False)
    hyps = read_hypotheses(args.hyp)
    missing = [e.uid for e in refs if e.uid not in hyps]
    if missing:
        raise CliError(f"{len(missing)} reference utterances have no hypothesis, e.g. {missing[:3]}")
    ref_texts = [list(e.text) for e in refs]
    hyp_texts = [list(hyps[e.uid]) for e in refs]
    value = corpus_cer(ref_texts, hyp_texts)
    edits = sum(edit_distance(r, h) for r, h in zip(ref_texts, hyp_texts))
    print(f"CER {value:.2f}% ({edits} edits / {sum(map(len, ref_texts))} reference characters, "
          f"{len(refs)} utterances)")
    return 0


def cmd_bench(args) -> int:
    ckpt = _load_for_inference(args)
    model = ckpt.build_model()
    vocab = Vocabulary(ckpt.manifest["vocab"])
    stats = NormStats(**ckpt.manifest["norm"]) if ckpt.manifest["norm"] else None
    entries = read_manifest(args.manifest)[:args.limit or None]
    items = []
    for e in entries:
        f = load_features(e, stats)  # outside the timed region
        items.append(BenchItem(e.uid, f, audio_seconds(e, f.shape[0]), vocab.encode(e.text)))
    search_cfg = _search_cfg(args)

    def decode(features):
        return model.decode(features[None], [features.shape[0]], search_cfg, greedy=args.greedy)[0]

    report = measure_rtf(decode, items)
    _write_atomic(Path(args.out), json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    if args.csv:
        report.write_csv(args.csv)
    print(report.to_text())
    return 0


# --- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random stream (default 0)")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (bench always uses 1)")

    search = argparse.ArgumentParser(add_help=False)
    search.add_argument("--beam", type=int, default=8)
    search.add_argument("--greedy", action="store_true", help="greedy decoding instead of beam search")
    search.add_argument("--eos-threshold", type=float, default=5.0)
    search.add_argument("--max-length", type=int, default=None)
    search.add_argument("--max-symbols", type=int, default=4, help="transducer emissions per frame")
    search.add_argument("--config", help="training config to check the checkpoint architecture against")

    p = argparse.ArgumentParser(prog="e2easr", description="End-to-end ASR toolkit on numpy.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--num", type=int, required=True)
    g.add_argument("--vocab-size", type=int, default=12)
    g.add_argument("--noise", type=float, default=0.3)
    g.add_argument("--wav", action="store_true", help="pure-tone WAV variant")
    g.set_defaults(func=cmd_gen)

    v = sub.add_parser("vocab", parents=[common], help="build a character vocabulary")
    v.add_argument("--manifest", required=True)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_vocab)

    c = sub.add_parser("config", parents=[common], help="write a complete training config")
    c.add_argument("--encoder", choices=("conformer", "blstm"), default="conformer")
    c.add_argument("--decoder", choices=("ctc", "transducer", "attention"), default="transducer")
    c.add_argument("--toy", action="store_true", help="reduced model sized for the synthetic corpus")
    c.add_argument("--out")
    c.set_defaults(func=cmd_config)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--train", required=True)
    t.add_argument("--dev")
    t.add_argument("--vocab")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decode", parents=[common, search], help="decode a manifest")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--manifest", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--batch-size", type=int, default=16)
    d.set_defaults(func=cmd_decode)

    e = sub.add_parser("eval", parents=[common], help="corpus CER of a hypothesis file")
    e.add_argument("--ref", required=True)
    e.add_argument("--hyp", required=True)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", parents=[common, search], help="batch-1 real-time-factor benchmark")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--manifest", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--csv")
    b.add_argument("--limit", type=int, default=0)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = 1 if args.command == "bench" else args.threads
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except (CliError, ManifestError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
