"""Command-line entry point: ``mri2speech <subcommand> ...``.

Every invocation creates a fresh run directory ``<output root>/<UTC time>-<subcommand>``
holding ``config.ini`` (the resolved configuration), ``run.log`` and the
command's artifacts.  Metric files (``metrics.json``) contain no timestamps,
so identical seeds and configs give byte-identical metrics.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig, resolve_config

log = logging.getLogger("mri2speech")


def make_run_dir(root: Path, command: str) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
    for n in range(1000):
        path = root / (f"{stamp}-{command}" if n == 0 else f"{stamp}-{command}-{n}")
        try:
            path.mkdir()
            return path
        except FileExistsError:
            continue
    raise OSError(f"could not create a fresh run directory under {root}")


def write_metrics(run_dir: Path, metrics: dict) -> Path:
    path = run_dir / "metrics.json"
    path.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _setup_logging(run_dir: Path) -> logging.Handler:
    handler = logging.FileHandler(run_dir / "run.log", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    return handler


def _seed_everything(seed: int) -> None:
    import torch

    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def _manifest(path: str):
    from .corpus import load_manifest

    return load_manifest(path)


# ---------------------------------------------------------------------------
# subcommands: each takes (args, config, run_dir) and returns a metrics dict or None


def cmd_gen_data(args, cfg: RunConfig, run_dir: Path):
    from .synthetic import generate_synthetic_corpus

    corpus_cfg = dataclasses.asdict(cfg.corpus)
    for key, value in (("seed", args.seed), ("num_speakers", args.speakers),
                       ("utterances_per_speaker", args.utterances)):
        if value is not None:
            corpus_cfg[key] = value
    out = Path(args.out) if args.out else run_dir / "corpus"
    seed = corpus_cfg.pop("seed")
    nspk = corpus_cfg.pop("num_speakers")
    nutt = corpus_cfg.pop("utterances_per_speaker")
    inventory = corpus_cfg.pop("inventory")
    corpus = generate_synthetic_corpus(out, seed, nspk, nutt, inventory, **corpus_cfg)
    print(out / "manifest.jsonl")
    return {"utterances": len(corpus.manifest), "speakers": list(corpus.speakers),
            "train": len(corpus.manifest.split("train")), "test": len(corpus.manifest.split("test"))}


def cmd_train_recognizer(args, cfg: RunConfig, run_dir: Path):
    from .corpus import MaskSpec
    from .evalkit import evaluate_recognizer
    from .recognizer import train_recognizer

    manifest = _manifest(args.manifest)
    speakers = args.speakers.split(",") if args.speakers else None
    result = train_recognizer(manifest, cfg.recognizer, mask=MaskSpec(args.mask), speakers=speakers,
                              out_dir=run_dir, eval_every=args.eval_every,
                              stop_at_zero_cer=args.stop_at_zero_cer)
    print(result.checkpoint_path)
    metrics = {"final_loss": result.losses[-1]["loss"], "steps": len(result.losses),
               "fingerprint": result.model.to_checkpoint().fingerprint}
    if manifest.split(cfg.eval.split):
        rep = evaluate_recognizer(manifest, result.model, cfg.eval.decoder, cfg.eval.split, speakers)
        rep.save(run_dir, "eval")
        metrics.update({"cer": rep.cer, "wer": rep.wer})
    return metrics


def cmd_train_tts(args, cfg: RunConfig, run_dir: Path):
    from .tts import train_tts

    manifest = _manifest(args.manifest)
    speakers = args.speakers.split(",") if args.speakers else None
    model, rows = train_tts(manifest, cfg.tts, speakers=speakers, out_dir=run_dir)
    print(run_dir / "tts.ckpt")
    last = rows[-1]
    return {"steps": len(rows), "speakers": list(model.config.speakers),
            "final": {k: last[k] for k in ("recon", "kl", "dur", "total")},
            "fingerprint": model.to_checkpoint().fingerprint}


def cmd_transcribe(args, cfg: RunConfig, run_dir: Path):
    from .corpus import ArticulatoryClip
    from .media import read_clip
    from .recognizer import Recognizer

    model = Recognizer.load(args.ckpt)
    frames, fps = read_clip(args.clip)
    text = model.transcribe(ArticulatoryClip(frames, fps, "unknown"), args.decoder or cfg.eval.decoder)
    (run_dir / "transcript.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    return {"transcript": text}


def cmd_synthesize(args, cfg: RunConfig, run_dir: Path):
    from .synthesis import synthesize_same_speaker
    from .tts import TTS

    model = TTS.load(args.ckpt)
    speaker = args.speaker or cfg.synthesis.source_speaker or model.config.speakers[0]
    res = synthesize_same_speaker(args.text, speaker, model, cfg.synthesis.temperature, cfg.synthesis.seed)
    res.save(run_dir)
    print(run_dir / "out.wav")
    return {"samples": res.num_samples, "durations": res.durations.tolist()}


def cmd_transplant(args, cfg: RunConfig, run_dir: Path):
    from .corpus import ArticulatoryClip
    from .media import read_clip
    from .synthesis import end_to_end_mri2speech, transplant_synthesize
    from .tts import TTS

    if (args.text is None) == (args.clip is None):
        raise ValueError("give exactly one of --text or --clip")
    source = TTS.load(args.multi)
    target = TTS.load(args.target)
    src_spk = args.source_speaker or cfg.synthesis.source_speaker
    if not src_spk:
        raise ValueError("no source speaker (use --source-speaker or synthesis.source_speaker)")
    tgt_spk = args.target_speaker or cfg.synthesis.target_speaker or None
    temp, seed = cfg.synthesis.temperature, cfg.synthesis.seed
    if args.clip is not None:
        if not args.recognizer:
            raise ValueError("--clip needs --recognizer")
        frames, fps = read_clip(args.clip)
        clip = ArticulatoryClip(frames, fps, src_spk)
        res = end_to_end_mri2speech(clip, args.recognizer, source, target, src_spk, tgt_spk,
                                    cfg.eval.decoder, temp, seed)
    else:
        res = transplant_synthesize(args.text, src_spk, source, target, tgt_spk, temp, seed)
    res.save(run_dir)
    print(res.text)
    return {"text": res.text, "samples": res.num_samples, "durations": res.durations.tolist()}


def cmd_ablate(args, cfg: RunConfig, run_dir: Path):
    from .evalkit import ablation_run, ablation_table

    manifest = _manifest(args.manifest)
    modes = args.modes.split(",") if args.modes else cfg.eval.ablation_modes
    reports = ablation_run(manifest, cfg.recognizer, modes, run_dir, cfg.eval.decoder, cfg.eval.split)
    print(ablation_table(reports))
    return {m: {"cer": r.cer, "wer": r.wer} for m, r in reports.items()}


def cmd_eval(args, cfg: RunConfig, run_dir: Path):
    from .evalkit import evaluate_recognizer

    manifest = _manifest(args.manifest)
    rep = evaluate_recognizer(manifest, args.ckpt, args.decoder or cfg.eval.decoder, args.split or cfg.eval.split)
    rep.save(run_dir, "eval")
    print(rep.summary())
    return {"cer": rep.cer, "wer": rep.wer, "fingerprints": rep.fingerprints}


def cmd_report(args, cfg: RunConfig, run_dir: Path):
    from .evalkit import spectrogram_report
    from .media import read_wav

    waves, rates = [], set()
    for p in args.wav:
        w, sr = read_wav(p)
        waves.append(w)
        rates.add(sr)
    if len(rates) != 1:
        raise ValueError(f"all inputs must share one sample rate, got {sorted(rates)}")
    labels = args.labels.split(",") if args.labels else [Path(p).stem for p in args.wav]
    out = spectrogram_report(waves, labels, run_dir / "spectrograms.png", sample_rate=rates.pop(),
                             n_fft=cfg.tts.n_fft, hop=cfg.tts.hop, n_mels=cfg.tts.n_mels)
    print(out)
    return {"panels": len(waves)}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-recognizer": cmd_train_recognizer,
    "train-tts": cmd_train_tts,
    "transcribe": cmd_transcribe,
    "synthesize": cmd_synthesize,
    "transplant": cmd_transplant,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--output-root", help="parent directory for run directories")

    parser = argparse.ArgumentParser(prog="mri2speech", description="Silent articulatory video to speech.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--seed", type=int)
    p.add_argument("--speakers", type=int)
    p.add_argument("--utterances", type=int, help="utterances per speaker")
    p.add_argument("--out", help="corpus directory (default: <run dir>/corpus)")

    p = sub.add_parser("train-recognizer", parents=[common], help="train the video recognizer")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mask", default="full", choices=["full", "masked_lip", "lip_only"])
    p.add_argument("--speakers", help="comma-separated speaker subset")
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--stop-at-zero-cer", action="store_true")

    p = sub.add_parser("train-tts", parents=[common], help="train the TTS model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--speakers", help="comma-separated speaker subset")

    p = sub.add_parser("transcribe", parents=[common], help="transcribe one clip")
    p.add_argument("--clip", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--decoder", choices=["greedy", "beam"])

    p = sub.add_parser("synthesize", parents=[common], help="text to speech with one model")
    p.add_argument("--text", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--speaker")

    p = sub.add_parser("transplant", parents=[common], help="source-speaker timing in a target voice")
    p.add_argument("--text")
    p.add_argument("--clip")
    p.add_argument("--recognizer")
    p.add_argument("--multi", required=True, help="multi-speaker TTS checkpoint (duration model)")
    p.add_argument("--target", required=True, help="target-voice TTS checkpoint")
    p.add_argument("--source-speaker")
    p.add_argument("--target-speaker")

    p = sub.add_parser("ablate", parents=[common], help="articulator masking ablation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--modes", help="comma-separated subset of full,masked_lip,lip_only")

    p = sub.add_parser("eval", parents=[common], help="evaluate a recognizer")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split")
    p.add_argument("--decoder", choices=["greedy", "beam"])

    p = sub.add_parser("report", parents=[common], help="side-by-side mel-spectrogram figure")
    p.add_argument("--wav", action="append", required=True)
    p.add_argument("--labels", help="comma-separated panel labels")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        overrides = list(args.overrides)
        if args.output_root:
            overrides.append(f"run.output_root={args.output_root}")
        cfg = resolve_config(args.config, overrides)
    except (ValueError, FileNotFoundError) as exc:
        print(f"mri2speech: error: {exc}", file=sys.stderr)
        return 2
    handler = None
    try:
        run_dir = make_run_dir(cfg.output_root, args.command)
        (run_dir / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")
        handler = _setup_logging(run_dir)
        _seed_everything(cfg.run.seed)
        t0 = time.perf_counter()
        metrics = COMMANDS[args.command](args, cfg, run_dir)
        log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
        if metrics is not None:
            write_metrics(run_dir, metrics)
        return 0
    except Exception as exc:  # noqa: BLE001 - the CLI reports every failure as one line
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"mri2speech: error: {msg}", file=sys.stderr)
        log.debug("failure", exc_info=True)
        return 1
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
            handler.close()


if __name__ == "__main__":
    sys.exit(main())
