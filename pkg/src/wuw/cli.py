"""Command-line surface tying the toolkit together.

Exit codes: 0 success, 1 usage error, 2 data error, 3 model/protocol error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import audio, evaluation, features, fusion, nnet, wire
from .errors import DataError, ModelError, ProtocolError


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _parse_key(text: str | None) -> int | None:
    if text is None:
        return None
    return int(text, 0) & 0xFFFFFFFFFFFFFFFF


def _config_by_name(name: str) -> features.FeatureConfig:
    try:
        return {"device": features.DEVICE, "cloud": features.CLOUD}[name]
    except KeyError:
        raise DataError(f"unknown config name {name!r}") from None


def _load_scorer(path, member_id=None) -> nnet.Scorer:
    return nnet.make_scorer(nnet.load_weights(path), member_id)


def _load_members(paths) -> list[nnet.Scorer]:
    members = []
    for p in paths or []:
        members.append(_load_scorer(p, member_id=Path(p).stem))
    ids = [m.member_id for m in members]
    if len(set(ids)) != len(ids):
        raise ModelError(f"duplicate member ids {ids}; rename the weight files")
    return members


def _train_spec(args) -> nnet.TrainSpec:
    return nnet.TrainSpec(
        batch_size=args.batch_size,
        lr0=args.lr,
        max_epochs=args.epochs,
        plateau_patience=args.patience,
        seed=args.seed,
    )


def _pipeline_from_args(args) -> evaluation.ScoreFn:
    if args.fusion:
        if not args.device_weights:
            raise ModelError("ensemble evaluation needs --device-weights")
        device = _load_scorer(args.device_weights, member_id="device")
        members = _load_members(args.member)
        model = fusion.load_fusion(args.fusion)
        return evaluation.ensemble_pipeline(device, members, model)
    if not args.weights:
        raise ModelError("pass --weights, or --fusion with --device-weights/--member")
    return evaluation.scorer_pipeline(_load_scorer(args.weights))


# -- Subcommands -------------------------------------------------------------

def cmd_features(args) -> int:
    clip = audio.read_wav(args.wav)
    if args.normalize:
        clip = audio.peak_normalize(clip)
    fm = features.mfcc(clip, _config_by_name(args.config))
    features.save_features(fm, args.out)
    print(f"{args.out}: shape ({fm.n_frames}, {fm.n_coeffs}) config {fm.config_id}")
    return 0


def cmd_augment(args) -> int:
    entries = evaluation.load_manifest(args.manifest, require_alignments=not args.allow_unaligned)
    base = Path(args.manifest).parent
    dataset = evaluation.build_feature_dataset(
        entries,
        _config_by_name(args.config),
        split=args.split,
        seed=args.seed,
        copies=args.copies,
        base_dir=base,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (fm, label) in enumerate(dataset):
        name = f"{args.split}_{i:05d}.wuwf"
        features.save_features(fm, out_dir / name)
        lines.append(json.dumps({"path": name, "label": int(label)}, sort_keys=True))
    (out_dir / "features.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(dataset)} feature windows to {out_dir}")
    return 0


def cmd_train(args) -> int:
    entries = evaluation.load_manifest(args.manifest, require_alignments=not args.allow_unaligned)
    base = Path(args.manifest).parent
    config = _config_by_name(args.config)
    train = evaluation.build_feature_dataset(
        entries, config, split="train", seed=args.seed, copies=args.copies,
        base_dir=base,
    )
    valid = evaluation.build_feature_dataset(
        entries, config, split="valid", seed=args.seed + 1, copies=args.copies,
        base_dir=base,
    )
    ws = nnet.train_classifier(train, valid, _train_spec(args))
    nnet.save_weights(ws, args.out)
    print(f"saved {nnet.param_count(ws)} parameters to {args.out}")
    return 0


def cmd_fuse_train(args) -> int:
    entries = evaluation.load_manifest(args.manifest, require_alignments=not args.allow_unaligned)
    base = Path(args.manifest).parent
    device = _load_scorer(args.device_weights, member_id="device")
    members = _load_members(args.member)
    train = evaluation.build_score_dataset(
        entries, device, members, split="train", seed=args.seed,
        copies=args.copies, base_dir=base,
    )
    valid = evaluation.build_score_dataset(
        entries, device, members, split="valid", seed=args.seed + 1,
        copies=args.copies, base_dir=base,
    )
    model = fusion.train_fusion(train, _train_spec(args), valid=valid,
                                hidden=args.hidden)
    nnet.save_weights(model.weights, args.out)
    print(f"saved fusion over members {list(model.member_ids)} to {args.out}")
    return 0


def cmd_detect(args) -> int:
    device = _load_scorer(args.device_weights, member_id="device")
    key = _parse_key(args.key)
    agent = wire.DeviceAgent(
        device,
        theta_device=args.theta_device,
        refractory_s=args.refractory,
        key=key,
    )
    clip = audio.read_wav(args.wav)
    server_addr = None
    if args.server:
        host, _, port = args.server.rpartition(":")
        server_addr = (host, int(port))

    chunk = int(args.chunk_ms * clip.sample_rate_hz / 1000)
    emitted = 0
    for start in range(0, len(clip), chunk):
        for event, request in agent.feed(clip.samples[start : start + chunk]):
            emitted += 1
            record = {
                "window_start_sample": event.window_start_sample,
                "device_log_odds": event.device_log_odds,
                "threshold": event.threshold,
            }
            if server_addr is not None:
                resp = wire.request_verification(server_addr, request, key=key)
                record["verdict"] = resp.verdict.name.lower()
                record["fused_p_pos"] = resp.fused_p_pos
            if args.dump_requests:
                dump_dir = Path(args.dump_requests)
                dump_dir.mkdir(parents=True, exist_ok=True)
                frame = wire.encode_request(request, key=key)
                (dump_dir / f"req_{event.window_start_sample}.wuwp").write_bytes(frame)
            print(json.dumps(record, sort_keys=True))
    print(f"{emitted} events, {agent.dropped_windows} dropped windows", file=sys.stderr)
    return 0


def cmd_serve(args) -> int:
    members = _load_members(args.member)
    model = fusion.load_fusion(args.fusion)
    server = wire.VerificationServer(
        members, model, theta_cloud=args.theta_cloud, key=_parse_key(args.key)
    )
    server.serve_forever(args.host, args.port)
    return 0


def cmd_eval(args) -> int:
    entries = evaluation.load_manifest(args.manifest, require_alignments=not args.allow_unaligned)
    report = evaluation.evaluate(
        entries,
        _pipeline_from_args(args),
        theta=args.theta,
        buckets=evaluation.default_buckets(args.buckets),
        seed=args.seed,
        base_dir=Path(args.manifest).parent,
    )
    print(report.to_table())
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    else:
        print(report.to_json())
    return 0


def cmd_sweep(args) -> int:
    entries = evaluation.load_manifest(args.manifest, require_alignments=not args.allow_unaligned)
    thetas = np.linspace(args.theta_min, args.theta_max, args.steps)
    points = evaluation.threshold_sweep(
        entries,
        _pipeline_from_args(args),
        thetas,
        seed=args.seed,
        base_dir=Path(args.manifest).parent,
    )
    print(f"{'theta':>7}  {'prec':>6}  {'recall':>6}  {'F1':>6}")
    for p in points:
        flag = "  *best" if p.best else ""
        print(f"{p.theta:7.3f}  {p.precision:6.4f}  {p.recall:6.4f}  {p.f1:6.4f}{flag}")
    if args.out:
        payload = json.dumps([p.to_dict() for p in points], indent=2, sort_keys=True)
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
    return 0


def cmd_bench(args) -> int:
    if args.weights:
        scorer = _load_scorer(args.weights)
    else:
        config = _config_by_name(args.config)
        ws = nnet.init_gru_scorer(config, seed=args.seed)
        scorer = nnet.make_scorer(ws, member_id="sgru")
    report = evaluation.bench_rtf(scorer, n_runs=args.runs, seed=args.seed)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


# -- Parser wiring -----------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="wuw", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common_train(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--epochs", type=int, default=700)
        p.add_argument("--batch-size", type=int, default=128)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--patience", type=int, default=5)
        p.add_argument("--copies", type=int, default=1)
        p.add_argument("--allow-unaligned", action="store_true")

    p = sub.add_parser("features", help="wav -> feature dump")
    p.add_argument("wav")
    p.add_argument("out")
    p.add_argument("--config", choices=("device", "cloud"), default="device")
    p.add_argument("--no-normalize", dest="normalize", action="store_false")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("augment", help="manifest -> mixed feature windows")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", choices=("device", "cloud"), default="device")
    p.add_argument("--split", choices=evaluation.SPLITS, default="train")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--copies", type=int, default=1)
    p.add_argument("--allow-unaligned", action="store_true")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train the linear baseline scorer")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", choices=("device", "cloud"), default="device")
    common_train(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fuse-train", help="train the stacking fusion model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--device-weights", required=True)
    p.add_argument("--member", action="append", required=True,
                   help="member weight file (repeatable, order matters)")
    p.add_argument("--hidden", type=int, default=fusion.FUSION_HIDDEN)
    common_train(p)
    p.set_defaults(func=cmd_fuse_train)

    p = sub.add_parser("detect", help="stream a wav through the device agent")
    p.add_argument("wav")
    p.add_argument("--device-weights", required=True)
    p.add_argument("--theta-device", type=float, default=0.5)
    p.add_argument("--refractory", type=float, default=1.0)
    p.add_argument("--chunk-ms", type=int, default=100)
    p.add_argument("--server", help="host:port of a verification server")
    p.add_argument("--key", help="pre-shared obfuscation key (int)")
    p.add_argument("--dump-requests", help="directory for raw request frames")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("serve", help="run the verification server")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--member", action="append", required=True)
    p.add_argument("--fusion", required=True)
    p.add_argument("--theta-cloud", type=float, default=0.5)
    p.add_argument("--key", help="pre-shared obfuscation key (int)")
    p.set_defaults(func=cmd_serve)

    def common_eval(p):
        p.add_argument("--manifest", required=True)
        p.add_argument("--weights")
        p.add_argument("--device-weights")
        p.add_argument("--member", action="append")
        p.add_argument("--fusion")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out")
        p.add_argument("--allow-unaligned", action="store_true")

    p = sub.add_parser("eval", help="per-SNR-bucket F1 report")
    common_eval(p)
    p.add_argument("--theta", type=float, default=0.5)
    p.add_argument("--buckets", type=int, default=6)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="threshold sweep over cached scores")
    common_eval(p)
    p.add_argument("--theta-min", type=float, default=0.05)
    p.add_argument("--theta-max", type=float, default=0.95)
    p.add_argument("--steps", type=int, default=19)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="real-time-factor benchmark")
    p.add_argument("--weights")
    p.add_argument("--config", choices=("device", "cloud"), default="device")
    p.add_argument("--runs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (DataError, FileNotFoundError) as exc:
        print(f"wuw: data error: {exc}", file=sys.stderr)
        return 2
    except (ModelError, ProtocolError) as exc:
        print(f"wuw: model/protocol error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
