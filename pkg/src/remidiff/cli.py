"""Command-line entry point.

Subcommands: tokenize, detokenize, train, sample, eval-oa, profile,
ablate. Report paths (train, eval-oa, profile, sample) render a PNG
figure next to their CSV output.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import complexity as C
from . import evaluation as E
from . import plots
from .diffusion import make_schedule
from .midi import parse_midi, write_midi
from .model import ABLATION_ORDERS, MFAConfig, reorder_variant
from .remi import (
    RemiVocab,
    decode,
    encode,
    load_tokens_binary,
    load_tokens_text,
    quantize,
    save_tokens_binary,
    save_tokens_text,
)
from .sampler import SamplerConfig, generate
from .training import AdamW, load_checkpoint, parse_config, train
from .diffusion import q_sample, vb_loss

log = logging.getLogger(__name__)


def _cmd_tokenize(args) -> int:
    vocab = RemiVocab()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    midi_dir = Path(args.midi_dir)
    if not midi_dir.is_dir():
        print(f"error: MIDI directory {midi_dir} does not exist", file=sys.stderr)
        return 1
    count = 0
    for path in sorted(midi_dir.iterdir()):
        if path.suffix.lower() not in (".mid", ".midi"):
            continue
        try:
            score = quantize(parse_midi(path.read_bytes()), vocab.positions_per_bar, vocab)
            tokens = encode(score, vocab)
        except Exception as exc:
            log.warning("skipping %s: %s", path.name, exc)
            continue
        if args.binary:
            save_tokens_binary(tokens, out_dir / f"{path.stem}.tokb", vocab.size)
        else:
            save_tokens_text(tokens, out_dir / f"{path.stem}.txt")
        count += 1
    print(f"tokenized {count} files into {out_dir}")
    return 0 if count else 1


def _cmd_detokenize(args) -> int:
    vocab = RemiVocab()
    path = Path(args.tokens)
    if path.suffix == ".tokb":
        tokens, _ = load_tokens_binary(path)
    else:
        tokens = load_tokens_text(path)
    score, stats = decode(tokens, vocab)
    if stats.dropped:
        print(f"dropped {stats.dropped} ungrammatical tokens")
    Path(args.out).write_bytes(write_midi(score))
    print(f"wrote {args.out} ({stats.notes} notes)")
    return 0


def _cmd_train(args) -> int:
    try:
        cfg = parse_config(args.config, args.set)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if not Path(cfg.data_dir).is_dir():
        print(f"error: data_dir {cfg.data_dir} does not exist", file=sys.stderr)
        return 1
    try:
        ckpt, history = train(cfg, resume=args.resume, deterministic=args.deterministic)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    loss_csv = Path(cfg.out_dir) / "loss.csv"
    plots.plot_loss_curve(loss_csv, Path(cfg.out_dir) / "loss.png")
    final = history[-1][1] if history else float("nan")
    print(f"trained {len(history)} steps; final loss {final:.4f}; checkpoint {ckpt}")
    return 0


def _cmd_sample(args) -> int:
    vocab = RemiVocab()
    cfg, model, _, _, _ = load_checkpoint(args.checkpoint)
    sched = make_schedule(cfg.diffusion_steps, cfg.schedule_kind)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sampler_cfg = SamplerConfig(
        length=args.length,
        steps=args.steps,
        temperature=args.temperature,
        seed=args.seed,
        decode_policy="greedy" if args.greedy else "sample",
    )
    for i in range(args.n):
        one_cfg = SamplerConfig(
            length=sampler_cfg.length,
            steps=sampler_cfg.steps,
            temperature=sampler_cfg.temperature,
            seed=sampler_cfg.seed + i,
            decode_policy=sampler_cfg.decode_policy,
        )
        tokens, trace = generate(model, sched, one_cfg)
        save_tokens_text(tokens, out_dir / f"sample_{i:03d}.txt")
        score, stats = decode(tokens, vocab)
        if args.bars is not None:
            limit = args.bars * score.ticks_per_bar
            score.notes = [n for n in score.notes if n.onset < limit]
        (out_dir / f"sample_{i:03d}.mid").write_bytes(write_midi(score))
        with open(out_dir / f"sample_{i:03d}_trace.csv", "w") as fh:
            fh.write("step,masked_count\n")
            for t, masked in trace:
                fh.write(f"{t},{masked}\n")
        if i == 0:
            plots.plot_sample_trace(trace, out_dir / "sample_000_trace.png")
        print(f"sample_{i:03d}: {stats.notes} notes, {stats.dropped} dropped tokens")
    return 0


def _cmd_eval_oa(args) -> int:
    try:
        report = E.evaluate(args.gen_dir, args.ref_dir, seed=args.seed)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(E.format_report(report))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    E.write_report_csv(report, out_dir / "oa_report.csv")
    plots.plot_oa_report(report, out_dir / "oa_report.png")
    print(f"report written to {out_dir / 'oa_report.csv'}")
    return 0


def _cmd_profile(args) -> int:
    lengths = sorted(int(x) for x in args.lengths.split(","))
    config = MFAConfig(
        vocab_size=RemiVocab().size,
        model_dim=args.dim,
        state_dim=args.state,
        heads=args.heads,
        n_blocks=args.blocks,
        diffusion_steps=8,
    )
    rows = C.profile(config, lengths, repeats=args.repeats, seed=args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    C.write_profile_csv(rows, out_dir / "profile.csv")
    plots.plot_profile(rows, out_dir / "profile.png")
    print(C.PROFILE_CSV_HEADER)
    for row in rows:
        flag = "  [flagged: timing spread > 20%]" if row.flagged else ""
        print(
            f"{row.length},{row.analytic_flops_mfa},{row.analytic_flops_attn_only},"
            f"{row.measured_ms_mfa:.3f},{row.measured_ms_attn_only:.3f}{flag}"
        )
    print(f"profile written to {out_dir / 'profile.csv'}")
    return 0


def _cmd_ablate(args) -> int:
    vocab = RemiVocab()
    base = MFAConfig(
        vocab_size=vocab.size,
        model_dim=args.dim,
        state_dim=args.state,
        heads=args.heads,
        n_blocks=args.blocks,
        diffusion_steps=args.diffusion_steps,
    )
    model = reorder_variant(base, args.order, seed=args.seed)
    print(f"order={args.order}: {model.num_params()} parameters, layout {model.layout[0]}")
    if args.train_steps > 0:
        rng = np.random.default_rng(args.seed)
        sched = make_schedule(args.diffusion_steps)
        seq_len = args.seq_len
        opt = AdamW(model.params)
        for step in range(args.train_steps):
            x0 = rng.integers(0, vocab.size - 2, size=(2, seq_len))
            t = rng.integers(1, args.diffusion_steps + 1, size=2)
            xt = q_sample(x0, t, sched, rng, vocab.mask_index)
            logits = model.forward(xt, t)
            loss, _ = vb_loss(logits, x0, xt, t, sched, pad_index=vocab.pad_index)
            opt.zero_grad()
            loss.backward()
            opt.clip_global_norm(1.0)
            opt.step(1e-3)
            print(f"step {step}: loss {loss.item():.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="remidiff",
        description="Absorbing-state discrete diffusion over REMI music tokens.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tokenize", help="encode a directory of MIDI files as token files")
    p.add_argument("midi_dir")
    p.add_argument("out_dir")
    p.add_argument("--binary", action="store_true", help="write length-prefixed binary token files")
    p.set_defaults(func=_cmd_tokenize)

    p = sub.add_parser("detokenize", help="decode a token file back to MIDI")
    p.add_argument("tokens")
    p.add_argument("out")
    p.set_defaults(func=_cmd_detokenize)

    p = sub.add_parser("train", help="run the diffusion training loop")
    p.add_argument("config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--deterministic", action="store_true", help="force single-threaded execution")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sample", help="generate token sequences and MIDI from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--n", type=int, default=1, help="number of samples")
    p.add_argument("--length", type=int, default=256, help="token sequence length")
    p.add_argument("--steps", type=int, default=None, help="denoising steps (subsamples the schedule)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--greedy", action="store_true", help="argmax decoding instead of sampling")
    p.add_argument("--bars", type=int, default=None, help="truncate the decoded score after this many bars")
    p.add_argument("--out-dir", default="samples")
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("eval-oa", help="overlap-area evaluation of generated vs reference clips")
    p.add_argument("gen_dir")
    p.add_argument("ref_dir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="eval")
    p.set_defaults(func=_cmd_eval_oa)

    p = sub.add_parser("profile", help="analytic FLOPs and measured forward time vs length")
    p.add_argument("--lengths", default="256,512,1024,2048", help="comma-separated input lengths")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--state", type=int, default=8)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="profile")
    p.set_defaults(func=_cmd_profile)

    p = sub.add_parser("ablate", help="build a block-order variant and optionally train a few steps")
    p.add_argument("--order", required=True, choices=ABLATION_ORDERS)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--state", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--diffusion-steps", type=int, default=8)
    p.add_argument("--seq-len", type=int, default=32)
    p.add_argument("--train-steps", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_ablate)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
