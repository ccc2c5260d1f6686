"""Command-line interface: synth, features, train-toy, infer, eval,
bench-scan, and count.

Conventions:
  * exit codes: 0 success, 1 input error, 2 numerical failure;
  * diagnostics go to stderr as ``error: <category>: <detail>`` lines;
  * reports are flat key=value lines for scriptability;
  * every command that writes files drops a ``*.run.txt`` manifest
    (command, seed, paths, wall time, version) next to its outputs;
  * paths are resolved relative to ``--workdir``; ``--threads 1``
    (the default) guarantees bit-reproducible runs.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import os
import sys
import time
from dataclasses import replace

import numpy as np
import torch

from . import __version__, codec, data, metrics, network, ssm, train
from .errors import InputError, NumericalError
from .frontend import extract_features, write_feature_file

NOMINAL_FULL_PARAMS = 76_000_000
NOMINAL_FULL_MACS = 4_630_000_000

_interop_configured = False


def _set_threads(n: int) -> None:
    """torch intra-op threads follow --threads; interop is pinned once
    (torch forbids reconfiguring it after parallel work has started)."""
    global _interop_configured
    torch.set_num_threads(max(1, n))
    if not _interop_configured:
        try:
            torch.set_num_interop_threads(max(1, n))
        except RuntimeError:
            pass
        _interop_configured = True


class _Parser(argparse.ArgumentParser):
    """argparse subclass whose usage failures follow the exit-code contract."""

    def error(self, message):
        print(f"error: input: {message}", file=sys.stderr)
        raise SystemExit(1)


def _resolve(workdir: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.join(workdir, path)


def _write_run_manifest(
    path: str,
    command: str,
    seed: int,
    inputs: list[str],
    outputs: list[str],
    wall_s: float,
    config: str | None = None,
) -> None:
    lines = [
        f"command={command}",
        f"tool_version={__version__}",
        f"seed={seed}",
        f"config={config or '-'}",
        f"inputs={';'.join(inputs) or '-'}",
        f"outputs={';'.join(outputs) or '-'}",
        f"wall_time_s={wall_s:.3f}",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _manifest_entries(manifest_path: str) -> list[tuple[str, str | None]]:
    """Read a manifest and resolve its entries relative to its own folder."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    entries = []
    for audio, label in data.read_manifest(manifest_path):
        audio = audio if os.path.isabs(audio) else os.path.join(base, audio)
        if label is not None and not os.path.isabs(label):
            label = os.path.join(base, label)
        entries.append((audio, label))
    return entries


def _feature_name(audio_path: str, used: set[str]) -> str:
    stem = os.path.splitext(os.path.basename(audio_path))[0]
    name = f"{stem}.feat"
    counter = 1
    while name in used:
        name = f"{stem}_{counter}.feat"
        counter += 1
    used.add(name)
    return name


def cmd_synth(args) -> int:
    t0 = time.perf_counter()
    out_dir = _resolve(args.workdir, args.out)
    os.makedirs(out_dir, exist_ok=True)
    records = data.synth_dataset(args.count, args.seed)
    entries = []
    merged: list[codec.Event] = []
    for i, record in enumerate(records):
        wav_name, csv_name = f"clip_{i:04d}.wav", f"clip_{i:04d}.csv"
        data.save_wav(os.path.join(out_dir, wav_name), record.audio,
                      sample_format=args.sample_format)
        codec.write_event_csv(os.path.join(out_dir, csv_name), record.labels)
        entries.append((wav_name, csv_name))
        merged.extend(codec.shift_frames(record.labels, i * codec.N_FRAMES))
    manifest_path = os.path.join(out_dir, "manifest.csv")
    reference_path = os.path.join(out_dir, "reference.csv")
    data.write_manifest(manifest_path, entries)
    codec.write_event_csv(reference_path, merged)
    _write_run_manifest(
        os.path.join(out_dir, "run.txt"), "synth", args.seed,
        inputs=[], outputs=[manifest_path, reference_path],
        wall_s=time.perf_counter() - t0,
    )
    print(f"clips={len(records)}")
    print(f"manifest={manifest_path}")
    print(f"reference={reference_path}")
    return 0


def cmd_features(args) -> int:
    t0 = time.perf_counter()
    manifest_path = _resolve(args.workdir, args.manifest)
    out_dir = _resolve(args.workdir, args.out)
    entries = _manifest_entries(manifest_path)
    if not entries:
        print("warning: empty manifest, nothing to do", file=sys.stderr)
        return 0
    os.makedirs(out_dir, exist_ok=True)
    used_names: set[str] = set()
    jobs = [
        (audio, os.path.join(out_dir, _feature_name(audio, used_names)))
        for audio, _ in entries
    ]

    def process(job: tuple[str, str]) -> str | None:
        audio_path, out_path = job
        try:
            clip = data.load_wav(audio_path)
            write_feature_file(out_path, extract_features(clip))
            return None
        except (InputError, OSError, ValueError) as exc:
            return f"error: file: {audio_path}: {exc}"

    if args.threads > 1:
        with concurrent.futures.ThreadPoolExecutor(args.threads) as pool:
            failures = [msg for msg in pool.map(process, jobs) if msg]
    else:
        failures = [msg for msg in map(process, jobs) if msg]
    for msg in failures:
        print(msg, file=sys.stderr)
    written = [path for (_, path) in jobs if os.path.exists(path)]
    _write_run_manifest(
        os.path.join(out_dir, "run.txt"), "features", args.seed,
        inputs=[manifest_path], outputs=written,
        wall_s=time.perf_counter() - t0,
    )
    print(f"written={len(written)}")
    print(f"failed={len(failures)}")
    return 1 if failures else 0


def cmd_train_toy(args) -> int:
    out_path = _resolve(args.workdir, args.out)
    if args.config:
        config_path = _resolve(args.workdir, args.config)
        with open(config_path) as fh:
            model_cfg = network.config_from_text(fh.read())
    else:
        config_path = None
        model_cfg = network.ModelConfig.tiny()
    if model_cfg.variant != "tiny":
        raise InputError("train-toy supports the tiny variant only")
    if args.unidirectional:
        model_cfg = replace(model_cfg, bidirectional=False)

    cfg = train.ToyTrainConfig(
        model=model_cfg,
        n_clips=args.clips,
        max_steps=args.steps,
        batch_size=args.batch,
        lr=args.lr,
        seed=args.seed,
        eval_every=args.eval_every,
        early_stop=not args.no_early_stop,
        f20_target=args.f20_target,
        loss_ratio_target=args.loss_ratio,
    )
    result = train.run_toy_training(cfg)
    parent = os.path.dirname(os.path.abspath(out_path))
    os.makedirs(parent, exist_ok=True)
    network.save_model(out_path, result.model)
    loss_path = out_path + ".loss.csv"
    train.write_loss_csv(loss_path, result.log)
    _write_run_manifest(
        out_path + ".run.txt", "train-toy", args.seed,
        inputs=[], outputs=[out_path, loss_path],
        wall_s=result.wall_s, config=config_path,
    )
    print(f"steps_run={result.steps_run}")
    print(f"initial_loss={result.initial_loss:.8f}")
    print(f"final_loss={result.final_loss:.8f}")
    print(f"f20={result.f20:.6f}")
    print(f"early_stopped={str(result.early_stopped).lower()}")
    print(f"wall_time_s={result.wall_s:.3f}")
    print(f"checkpoint={out_path}")
    return 0


def cmd_infer(args) -> int:
    t0 = time.perf_counter()
    ckpt_path = _resolve(args.workdir, args.ckpt)
    manifest_path = _resolve(args.workdir, args.manifest)
    out_path = _resolve(args.workdir, args.out)
    if not os.path.exists(ckpt_path):
        raise InputError(f"checkpoint not found: {ckpt_path}")
    model = network.load_model(ckpt_path)
    model.eval()
    entries = _manifest_entries(manifest_path)

    def process(job: tuple[int, str]) -> list[codec.Event]:
        index, audio_path = job
        clip = data.load_wav(audio_path)
        pred = model.forward_clip(clip)
        return codec.shift_frames(
            codec.decode(pred, activity_threshold=args.threshold),
            index * codec.N_FRAMES,
        )

    jobs = [(i, audio) for i, (audio, _) in enumerate(entries)]
    if args.threads > 1:
        with concurrent.futures.ThreadPoolExecutor(args.threads) as pool:
            per_clip = list(pool.map(process, jobs))
    else:
        per_clip = [process(job) for job in jobs]
    events = [event for clip_events in per_clip for event in clip_events]
    parent = os.path.dirname(os.path.abspath(out_path))
    os.makedirs(parent, exist_ok=True)
    codec.write_event_csv(out_path, events)
    _write_run_manifest(
        out_path + ".run.txt", "infer", args.seed,
        inputs=[ckpt_path, manifest_path], outputs=[out_path],
        wall_s=time.perf_counter() - t0,
    )
    print(f"clips={len(entries)}")
    print(f"events={len(events)}")
    print(f"output={out_path}")
    return 0


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    pred_path = _resolve(args.workdir, args.pred)
    ref_path = _resolve(args.workdir, args.ref)
    pred = codec.read_event_csv(pred_path)
    ref = codec.read_event_csv(ref_path)
    report = metrics.score(pred, ref, fold_frontback=args.fold_frontback)
    lines = metrics.report_lines(report)
    for line in lines:
        print(line)
    if args.per_class:
        metrics.write_per_class_csv(_resolve(args.workdir, args.per_class), report)
    if args.out:
        out_path = _resolve(args.workdir, args.out)
        with open(out_path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        _write_run_manifest(
            out_path + ".run.txt", "eval", args.seed,
            inputs=[pred_path, ref_path], outputs=[out_path],
            wall_s=time.perf_counter() - t0,
        )
    return 0


def cmd_bench_scan(args) -> int:
    t0 = time.perf_counter()
    lengths = [int(v) for v in args.lengths.split(",") if v.strip()]
    if not lengths or any(v < 1 for v in lengths):
        raise InputError(f"invalid --lengths: {args.lengths!r}")
    dtype = np.float32 if args.dtype == "float32" else np.float64
    rows = ssm.bench_scan(
        lengths, d_state=args.d_state, chunk_len=args.chunk,
        n_chan=args.n_chan, repeats=args.repeats, dtype=dtype, seed=args.seed,
    )
    lines = []
    for row in rows:
        lines.append(
            f"length={row['length']} chunk={row['chunk_len']} "
            f"median_s={row['median_s']:.6f} "
            f"ns_per_step={row['ns_per_step']:.1f} "
            f"steps_per_s={row['steps_per_s']:.0f} "
            f"macs_per_s={row['macs_per_s']:.3e} "
            f"max_abs_diff_vs_sequential={row['max_abs_diff_vs_sequential']:.3e}"
        )
    for prev, cur in zip(rows, rows[1:]):
        if cur["length"] == 2 * prev["length"]:
            ratio = cur["median_s"] / prev["median_s"]
            lines.append(
                f"doubling_ratio_{prev['length']}_to_{cur['length']}={ratio:.3f}"
            )
    for line in lines:
        print(line)
    if args.out:
        out_path = _resolve(args.workdir, args.out)
        with open(out_path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        _write_run_manifest(
            out_path + ".run.txt", "bench-scan", args.seed,
            inputs=[], outputs=[out_path],
            wall_s=time.perf_counter() - t0,
        )
    return 0


def cmd_count(args) -> int:
    if args.config:
        with open(_resolve(args.workdir, args.config)) as fh:
            config = network.config_from_text(fh.read())
    elif args.variant == "full":
        config = network.ModelConfig.full()
    else:
        config = network.ModelConfig.tiny()
    report = network.count_params_and_macs(config, frames=args.frames)
    print(f"variant={config.variant}")
    print(f"frames={args.frames}")
    print(f"params={report['params']}")
    print(f"macs={report['macs']}")
    if config.variant == "full":
        # Design targets for the full configuration, reported as a diagnostic
        # because head widths make exact reconciliation impossible.
        print(f"nominal_params={NOMINAL_FULL_PARAMS}")
        print(f"nominal_macs={NOMINAL_FULL_MACS}")
        print(f"params_to_nominal={report['params'] / NOMINAL_FULL_PARAMS:.4f}")
        print(f"macs_to_nominal={report['macs'] / NOMINAL_FULL_MACS:.4f}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="stereoseld", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--workdir", default=".", help="base for relative paths")
    parser.add_argument("--seed", type=int,
                        default=int(os.environ.get("SELD_SEED", "0")),
                        help="RNG seed (fallback: SELD_SEED env var, then 0)")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads; 1 = bit-reproducible")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic stereo dataset")
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--sample-format", choices=("float32", "pcm16"),
                   default="float32")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("features", help="extract feature files for a manifest")
    p.add_argument("--in", dest="manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train-toy", help="overfit the tiny model on synth data")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", help="model config file (tiny variant only)")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--clips", type=int, default=20)
    p.add_argument("--eval-every", type=int, default=25)
    p.add_argument("--f20-target", type=float, default=0.9)
    p.add_argument("--loss-ratio", type=float, default=0.1)
    p.add_argument("--unidirectional", action="store_true",
                   help="disable the backward scan branch")
    p.add_argument("--no-early-stop", action="store_true")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("infer", help="run a checkpoint over a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="manifest", required=True)
    p.add_argument("--out", required=True, help="merged event CSV")
    p.add_argument("--threshold", type=float, default=codec.ACTIVITY_THRESHOLD)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a prediction CSV against a reference")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--fold-frontback", action="store_true")
    p.add_argument("--per-class", help="also write a per-class CSV breakdown")
    p.add_argument("--out", help="also write the report to a file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-scan", help="time the chunked scan at rising lengths")
    p.add_argument("--lengths", default="1024,2048,4096,8192,16384,32768")
    p.add_argument("--d-state", type=int, default=64)
    p.add_argument("--chunk", type=int, default=64)
    p.add_argument("--n-chan", type=int, default=8)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--out", help="also write the table to a file")
    p.set_defaults(func=cmd_bench_scan)

    p = sub.add_parser("count", help="report parameters and MACs")
    p.add_argument("--variant", choices=("tiny", "full"), default="tiny")
    p.add_argument("--config", help="model config file (overrides --variant)")
    p.add_argument("--frames", type=int, default=251,
                   help="input frames for the MAC count (251 = 5 s)")
    p.set_defaults(func=cmd_count)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _set_threads(args.threads)
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except InputError as exc:
        print(f"error: input: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"error: numerical: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: input: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
