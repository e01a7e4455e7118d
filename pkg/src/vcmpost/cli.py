"""Command-line pipeline: prepare, train, postprocess, detect, evaluate,
report.

Exit codes are a stable contract: 0 on success, 2 for anything the
user can fix (bad flags, bad config, malformed or missing inputs), 1
for internal failures. Every command validates its configuration
before touching the filesystem.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import codec as codec_mod
from . import data as data_mod
from . import metrics as metrics_mod
from . import report as report_mod
from . import training as training_mod
from .checkpoint import load_network
from .detector import DEFAULT_CONF_THRESHOLD, detect, make_backend, write_detections
from .errors import USER_ERRORS, IngestionError, UsageError
from .frames import VideoSequence
from .net import NetConfig, forward

ENCODER_CMD_ENV = "VCM_ENCODER_CMD"


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0, help="global random seed")
    parser.add_argument("--jobs", type=int, default=1,
                        help="parallel worker count where a command supports it")
    parser.add_argument("--out", type=Path, default=Path("out"),
                        help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vcmpost",
        description="Post-process decoded video for object detection and "
                    "measure accuracy against bitrate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="encode/decode sequences at a QP sweep")
    _common_flags(p)
    p.add_argument("manifest", type=Path, help="dataset manifest (JSON)")
    p.add_argument("--qp", type=int, nargs="+", default=list(codec_mod.DEFAULT_QP_SWEEP),
                   help="QP values to code at")
    p.add_argument("--codec", choices=("mock", "external"), default="mock")
    p.add_argument("--encoder-cmd", default=None,
                   help="external encoder command template with {input} {output} "
                        f"{{bitstream}} {{qp}}; defaults to ${ENCODER_CMD_ENV}")
    p.add_argument("--dry-run", action="store_true", help="print the plan and stop")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train the restoration network")
    _common_flags(p)
    p.add_argument("manifest", type=Path, help="prepared manifest with decoded paths")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--patch-size", type=int, default=256)
    p.add_argument("--checkpoint-every", type=int, default=100)
    p.add_argument("--qp", type=int, nargs="+", default=None,
                   help="restrict training pairs to these QPs")
    p.add_argument("--resume", type=Path, default=None,
                   help="checkpoint to resume from")
    p.add_argument("--base-width", type=int, default=16)
    p.add_argument("--growth", type=int, default=8)
    p.add_argument("--num-rrdb", type=int, default=1)
    p.add_argument("--backend", default="toy")
    p.add_argument("--dry-run", action="store_true", help="print the plan and stop")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("postprocess", help="run a checkpoint over a sequence")
    _common_flags(p)
    p.add_argument("checkpoint", type=Path)
    p.add_argument("input", type=Path, help="decoded sequence (Y4M or PNG dir)")
    p.add_argument("--output", type=Path, default=None,
                   help="output path; defaults to <input>.post.y4m")
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("detect", help="dump per-frame detections for a sequence")
    _common_flags(p)
    p.add_argument("input", type=Path, help="sequence (Y4M or PNG dir)")
    p.add_argument("--backend", default="toy",
                   help="'toy' or 'external:<command template>'")
    p.add_argument("--conf", type=float, default=DEFAULT_CONF_THRESHOLD)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="score decoded and postprocessed sequences")
    _common_flags(p)
    p.add_argument("manifest", type=Path, help="prepared manifest with decoded paths")
    p.add_argument("--backend", default="toy")
    p.add_argument("--conf", type=float, default=DEFAULT_CONF_THRESHOLD)
    p.add_argument("--iou", type=float, default=metrics_mod.IOU_THRESHOLD)
    p.add_argument("--qp", type=int, nargs="+", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render rate-accuracy figures and gap table")
    _common_flags(p)
    p.add_argument("metrics", type=Path, nargs="+", help="metrics CSV file(s)")
    p.set_defaults(func=cmd_report)

    return parser


# -- prepare ----------------------------------------------------------


def _mock_job(entry, qp: int, out_dir: Path, raw_seq: VideoSequence):
    decoded_path = out_dir / "decoded" / f"{entry.id}_qp{qp}.y4m"
    log_path = out_dir / "logs" / f"{entry.id}_qp{qp}.json"
    input_sha = _sha256_file(entry.raw)
    if decoded_path.exists() and log_path.exists():
        try:
            log = json.loads(log_path.read_text())
        except json.JSONDecodeError:
            log = {}
        if (log.get("input_sha256") == input_sha
                and log.get("output_sha256") == _sha256_file(decoded_path)):
            return decoded_path, int(log["bitstream_bytes"]), True
    decoded, size = codec_mod.mock_codec_yuv(raw_seq, qp)
    codec_mod.write_y4m(decoded_path, decoded)
    log = {
        "command": "mock",
        "qp": qp,
        "input": str(entry.raw),
        "input_sha256": input_sha,
        "output": str(decoded_path),
        "output_sha256": _sha256_file(decoded_path),
        "bitstream_bytes": size,
    }
    log_path.parent.mkdir(parents=True, exist_ok=True)
    log_path.write_text(json.dumps(log, indent=2, sort_keys=True) + "\n")
    return decoded_path, size, False


def _external_job(entry, qp: int, out_dir: Path, raw_seq: VideoSequence, template: str):
    decoded_path = out_dir / "decoded" / f"{entry.id}_qp{qp}.y4m"
    workdir = out_dir / "jobs" / f"{entry.id}_qp{qp}"
    log_path = workdir / "job.json"
    if decoded_path.exists() and log_path.exists():
        try:
            log = json.loads(log_path.read_text())
        except json.JSONDecodeError:
            log = {}
        if log.get("output_sha256") == _sha256_file(decoded_path):
            return decoded_path, int(log["bitstream_bytes"]), True
    job = codec_mod.CodecJob(
        qp=qp, encoder_spec=template, input=raw_seq, workdir=workdir
    )
    decoded, bitstream = codec_mod.encode_decode_external(job)
    codec_mod.write_y4m(decoded_path, decoded)
    log = json.loads(log_path.read_text())
    log["output"] = str(decoded_path)
    log["output_sha256"] = _sha256_file(decoded_path)
    log_path.write_text(json.dumps(log, indent=2, sort_keys=True) + "\n")
    return decoded_path, bitstream.size_bytes, False


def cmd_prepare(args) -> int:
    manifest = data_mod.load_manifest(args.manifest)
    qps = sorted(set(args.qp))
    for qp in qps:
        if not 0 <= qp <= 63:
            raise UsageError(f"qp must lie in [0, 63], got {qp}")
    template = None
    if args.codec == "external":
        template = args.encoder_cmd or os.environ.get(ENCODER_CMD_ENV)
        if not template:
            raise UsageError(
                f"--codec external needs --encoder-cmd or ${ENCODER_CMD_ENV}"
            )
    if args.dry_run:
        for entry in manifest.entries:
            for qp in qps:
                target = args.out / "decoded" / f"{entry.id}_qp{qp}.y4m"
                print(f"plan: {args.codec} encode {entry.id} qp {qp} -> {target}")
        return 0
    args.out.mkdir(parents=True, exist_ok=True)

    def run_entry(entry):
        raw_seq = data_mod.load_sequence(entry.raw, fps=entry.fps)
        results = {}
        for qp in qps:
            if template is None:
                path, size, skipped = _mock_job(entry, qp, args.out, raw_seq)
            else:
                path, size, skipped = _external_job(entry, qp, args.out, raw_seq, template)
            results[qp] = (path, size, skipped)
        return entry, results

    if args.jobs > 1 and len(manifest.entries) > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            all_results = list(pool.map(run_entry, manifest.entries))
    else:
        all_results = [run_entry(entry) for entry in manifest.entries]

    for entry, results in all_results:
        for qp, (path, size, skipped) in sorted(results.items()):
            entry.decoded[qp] = {"path": path, "size_bytes": size}
            state = "skipped (up to date)" if skipped else "wrote"
            print(f"{state} {path} ({size} bytes coded)")
    out_manifest = data_mod.save_manifest(
        args.out / "manifest.json",
        data_mod.SequenceManifest(entries=[e for e, _ in all_results], root=args.out),
    )
    print(f"manifest: {out_manifest}")
    return 0


# -- train ------------------------------------------------------------


def cmd_train(args) -> int:
    manifest = data_mod.load_manifest(args.manifest)
    config = training_mod.TrainConfig(
        net=NetConfig(
            base_width=args.base_width,
            growth=args.growth,
            num_rrdb=args.num_rrdb,
        ),
        lr=args.lr,
        batch_size=args.batch_size,
        max_steps=args.steps,
        seed=args.seed,
        checkpoint_every=args.checkpoint_every,
        patch_size=args.patch_size,
        qps=tuple(args.qp) if args.qp else None,
        out_dir=args.out / "train",
        resume_from=args.resume,
        backend_spec=args.backend,
    )
    config.net.validate()
    if args.dry_run:
        n_pairs = sum(
            len([qp for qp in e.decoded if config.qps is None or qp in config.qps])
            for e in manifest.entries
        )
        print(f"plan: train {args.steps} steps, batch {args.batch_size}, "
              f"lr {args.lr:g}, {n_pairs} sequence pairs, out {config.out_dir}")
        return 0
    ckpt = training_mod.train(config, manifest)
    log_path = config.out_dir / "train_log.csv"
    last_loss = None
    with open(log_path) as fh:
        for line in fh:
            pass
        parts = line.strip().split(",")
        if parts and parts[0] != "step":
            last_loss = float(parts[1])
    if last_loss is not None:
        print(f"final loss {last_loss:.8f}")
    print(f"checkpoint: {ckpt}")
    return 0


# -- postprocess ------------------------------------------------------


def _default_post_path(input_path: Path) -> Path:
    if input_path.suffix.lower() == ".y4m":
        return input_path.with_suffix(".post.y4m")
    return input_path.parent / (input_path.name + ".post.y4m")


def cmd_postprocess(args) -> int:
    net = load_network(args.checkpoint)
    seq = data_mod.load_sequence(args.input)
    out_path = args.output or _default_post_path(args.input)
    restored = [forward(net, seq.frames[i]) for i in range(seq.frame_count)]
    out_seq = VideoSequence(np.stack(restored), fps=seq.fps, name=seq.name)
    codec_mod.write_y4m(out_path, out_seq)
    print(f"wrote {out_path} ({out_seq.frame_count} frames)")
    return 0


# -- detect -----------------------------------------------------------


def cmd_detect(args) -> int:
    backend = make_backend(args.backend)
    seq = data_mod.load_sequence(args.input)
    out_dir = args.out / "detections"
    out_dir.mkdir(parents=True, exist_ok=True)
    total = 0
    for i in range(seq.frame_count):
        dets = detect(backend, seq.frames[i], args.conf)
        write_detections(out_dir / f"{seq.name}_{i:06d}.txt", dets)
        total += len(dets)
    print(f"wrote {seq.frame_count} dump files to {out_dir} ({total} detections)")
    return 0


# -- evaluate ---------------------------------------------------------


def _score_sequence(backend, seq, per_frame_gts, conf, iou_thr):
    per_frame_dets = [detect(backend, seq.frames[i], conf_threshold=0.0)
                      for i in range(seq.frame_count)]
    return metrics_mod.evaluate_frames(per_frame_dets, per_frame_gts,
                                       conf_thr=conf, iou_thr=iou_thr)


def cmd_evaluate(args) -> int:
    manifest = data_mod.load_manifest(args.manifest)
    backend = make_backend(args.backend)
    if not 0.0 <= args.conf <= 1.0:
        raise UsageError(f"--conf must lie in [0, 1], got {args.conf}")
    if not 0.0 < args.iou <= 1.0:
        raise UsageError(f"--iou must lie in (0, 1], got {args.iou}")

    def eval_entry(entry):
        if entry.annotations is None:
            raise UsageError(f"manifest entry {entry.id!r} has no annotations")
        if not entry.decoded:
            raise UsageError(f"manifest entry {entry.id!r} has no decoded sequences; "
                             "run prepare first")
        records = []
        first = next(iter(sorted(entry.decoded)))
        probe = data_mod.load_sequence(entry.decoded[first]["path"], fps=entry.fps)
        gts = data_mod.load_annotations(entry.annotations, (probe.width, probe.height))
        per_frame_gts = data_mod.group_by_frame(gts, entry.frame_count)
        qps = sorted(entry.decoded)
        if args.qp:
            qps = [qp for qp in qps if qp in set(args.qp)]
        for qp in qps:
            rec = entry.decoded[qp]
            dec_seq = (probe if qp == first
                       else data_mod.load_sequence(rec["path"], fps=entry.fps))
            kbps = codec_mod.measure_bitrate(rec["size_bytes"], entry.frame_count, entry.fps)
            ap, map_value, f1 = _score_sequence(backend, dec_seq, per_frame_gts,
                                                args.conf, args.iou)
            records.append(report_mod.EvalRecord(
                sequence=entry.id, qp=qp,
                point=metrics_mod.RatePoint(
                    bitrate_kbps=kbps, map_value=map_value,
                    per_class_ap=ap, f1=f1, label="encoded",
                ),
            ))
            post_path = entry.postprocessed.get(qp)
            if post_path is None:
                sibling = _default_post_path(Path(rec["path"]))
                post_path = sibling if sibling.exists() else None
            if post_path is not None:
                post_seq = data_mod.load_sequence(post_path, fps=entry.fps)
                ap, map_value, f1 = _score_sequence(backend, post_seq, per_frame_gts,
                                                    args.conf, args.iou)
                records.append(report_mod.EvalRecord(
                    sequence=entry.id, qp=qp,
                    point=metrics_mod.RatePoint(
                        bitrate_kbps=kbps, map_value=map_value,
                        per_class_ap=ap, f1=f1, label="postprocessed",
                    ),
                ))
        return records

    if args.jobs > 1 and len(manifest.entries) > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            chunks = list(pool.map(eval_entry, manifest.entries))
    else:
        chunks = [eval_entry(entry) for entry in manifest.entries]
    records = [rec for chunk in chunks for rec in chunk]
    if not records:
        raise UsageError("nothing to evaluate; no decoded sequences matched")
    out_csv = report_mod.write_metrics_csv(args.out / "metrics.csv", records)
    print(f"metrics: {out_csv} ({len(records)} rows)")
    return 0


# -- report -----------------------------------------------------------


def cmd_report(args) -> int:
    records = []
    for path in args.metrics:
        records.extend(report_mod.read_metrics_csv(path))
    written = report_mod.render_reports(records, args.out / "report")
    for path in written:
        print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
