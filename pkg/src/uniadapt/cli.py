"""Command-line surface: synth, train, eval, label.

Every command is deterministic given its flags, its input files, and the
seed; each run directory gets a manifest recording the fully resolved
configuration plus SHA-256 digests of the inputs, which is enough to
reproduce the run byte for byte.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .core import (UNKNOWN, SourceDataset, Status, TargetDataset,
                   UniadaptError)
from .datasets import SyntheticConfig, generate_synthetic, load_features, save_features
from .evaluation import (confusion_tsv, evaluate, format_report, histogram,
                         histogram_tsv, predict_batch)
from .labeling import LabelingConfig, auto_threshold, label_batch
from .membank import init_bank
from .model import embed, load_checkpoint, pair_probs, save_checkpoint
from .train import (TrainConfig, fit, load_state, save_state, write_log)

_VERDICT_CHAR = {Status.KNOWN: "K", Status.UNKNOWN: "U", Status.UNCERTAIN: "?"}


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(path, command: str, config: dict, inputs: dict) -> None:
    """Flat key=value text: resolved config plus input digests."""
    lines = [f"command={command}", f"version={__version__}"]
    for key in sorted(config):
        lines.append(f"{key}={config[key]}")
    for key in sorted(inputs):
        p = inputs[key]
        lines.append(f"{key}={p}")
        lines.append(f"{key}_sha256={_sha256(p)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_synth(args) -> int:
    cfg = SyntheticConfig(
        n_common=args.common, n_src_private=args.src_private,
        n_tgt_private=args.tgt_private, dim=args.dim,
        per_class=args.per_class, shift=args.shift, spread=args.spread,
        seed=args.seed)
    source, target = generate_synthetic(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "source": out / "source.udaf",
        "target": out / "target.udaf",
        "truth": out / "target-truth.udaf",
    }
    save_features(paths["source"], source.features, source.labels)
    save_features(paths["target"], target.features)
    save_features(paths["truth"], target.features, target.truth)
    _write_manifest(out / "manifest.txt", "synth", asdict(cfg), {})
    n_unk = int((target.truth == UNKNOWN).sum())
    print(f"source: {paths['source']} ({len(source)} rows, "
          f"{source.n_classes} classes)")
    print(f"target: {paths['target']} ({len(target)} rows)")
    print(f"truth:  {paths['truth']} ({n_unk} unknown rows)")
    return 0


def _load_target(target_path, truth_path):
    feats, labels = load_features(target_path)
    if truth_path:
        tfeats, tlabels = load_features(truth_path)
        if tlabels is None:
            raise UniadaptError(f"{truth_path} carries no labels")
        if len(tlabels) != len(feats):
            raise UniadaptError("truth file row count does not match target")
        labels = tlabels
    return TargetDataset(feats, labels)


def cmd_train(args) -> int:
    cfg = TrainConfig(
        lr=args.lr, lr_backbone=args.adapter_lr,
        head_lr_scale=args.head_lr_scale, warmup_steps=args.warmup,
        momentum=args.momentum, weight_decay=args.weight_decay,
        batch=args.batch, alpha=args.alpha, n_neighbors=args.neighbors,
        k_tau=args.k_tau, cred_scale=args.cred_scale, lam=args.lam,
        max_steps=args.steps, sched_gamma=args.sched_gamma,
        sched_power=args.sched_power, seed=args.seed, hidden=args.hidden,
        use_adapter=not args.no_adapter, n_threads=args.threads)
    src_feats, src_labels = load_features(args.source)
    if src_labels is None:
        raise UniadaptError(f"{args.source} carries no labels")
    source = SourceDataset(src_feats, src_labels)
    target = _load_target(args.target, args.truth)

    state = load_state(args.resume) if args.resume else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state, reports = fit(source, target, cfg, state=state)

    log_path = out / "train_log.tsv"
    append = bool(args.resume) and log_path.exists()
    write_log(log_path, reports, append=append)
    save_checkpoint(out / "ckpt.udac", state.adapter, state.clf)
    save_state(out / "state.udas", state)
    inputs = {"source": args.source, "target": args.target}
    if args.truth:
        inputs["truth"] = args.truth
    if args.resume:
        inputs["resume"] = args.resume
    _write_manifest(out / "manifest.txt", "train", asdict(cfg), inputs)
    last = reports[-1] if reports else None
    if last is not None:
        print(f"trained to step {state.step}: loss_all={last.loss_all:.6f} "
              f"c_tau={last.c_tau:.4f}")
    print(f"checkpoint: {out / 'ckpt.udac'}")
    print(f"state:      {out / 'state.udas'}")
    print(f"log:        {log_path}")
    return 0


def cmd_eval(args) -> int:
    adapter, clf = load_checkpoint(args.ckpt)
    feats, labels = load_features(args.data)
    target = TargetDataset(feats, labels)
    report = evaluate(target, adapter, clf, micro=args.micro)
    text = format_report(report)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text, encoding="utf-8")
        (out / "confusion.tsv").write_text(confusion_tsv(report),
                                           encoding="utf-8")
    return 0


def cmd_label(args) -> int:
    adapter, clf = load_checkpoint(args.ckpt)
    src_feats, _ = load_features(args.source)
    tgt_feats, truth = load_features(args.target)
    # alpha is irrelevant for pure queries; banks here are never updated
    src_bank = init_bank(embed(src_feats, adapter), 0.9)
    tgt_bank = init_bank(embed(tgt_feats, adapter), 0.9)
    cfg = LabelingConfig(k_src=args.neighbors, k_tgt=args.neighbors,
                         k_tau=args.k_tau, cred_scale=args.cred_scale)
    cfg.validate()
    # threshold over the whole source set: there is no batch offline
    c_tau = auto_threshold(pair_probs(
        src_bank.features.astype(np.float64), clf))
    zt = embed(tgt_feats, adapter)
    verdicts = label_batch(zt, src_bank, tgt_bank, clf, c_tau, cfg,
                           tgt_slots=np.arange(len(zt)),
                           n_threads=args.threads)
    _, rejects = predict_batch(tgt_feats, adapter, clf)

    lines = ["index\tknowability\tcredibility\tverdict\treject_score"]
    for i, v in enumerate(verdicts):
        cred = "" if v.credibility is None else format(v.credibility, ".10g")
        lines.append(f"{i}\t{v.knowability:.10g}\t{cred}"
                     f"\t{_VERDICT_CHAR[v.status]}\t{rejects[i]:.10g}")
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"labeled {len(verdicts)} rows "
          f"(c_tau={c_tau:.4f}): {args.out}")

    if args.hist_dir:
        hist_dir = Path(args.hist_dir)
        hist_dir.mkdir(parents=True, exist_ok=True)
        know = np.array([v.knowability for v in verdicts])
        groups = {"": np.ones(len(verdicts), dtype=bool)}
        if truth is not None:
            groups["_known"] = truth != UNKNOWN
            groups["_unknown"] = truth == UNKNOWN
        for suffix, mask in groups.items():
            kh = histogram(know[mask], args.bins, -1.0, 1.0)
            rh = histogram(rejects[mask], args.bins, 0.0, 1.0)
            (hist_dir / f"knowability{suffix}.tsv").write_text(
                histogram_tsv(kh, -1.0, 1.0), encoding="utf-8")
            (hist_dir / f"reject{suffix}.tsv").write_text(
                histogram_tsv(rh, 0.0, 1.0), encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uniadapt",
        description="Universal domain adaptation on embedding features")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="generate a synthetic two-domain benchmark")
    p.add_argument("--common", type=int, default=10)
    p.add_argument("--src-private", type=int, default=10)
    p.add_argument("--tgt-private", type=int, default=11)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--per-class", type=int, default=40)
    p.add_argument("--shift", type=float, default=2.0)
    p.add_argument("--spread", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on source/target feature files")
    p.add_argument("--source", required=True, help="labeled source UDAF file")
    p.add_argument("--target", required=True, help="target UDAF file")
    p.add_argument("--truth", default=None,
                   help="optional labeled UDAF aligned with the target rows, "
                        "used only for per-step accuracy logging")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--adapter-lr", type=float, default=0.01)
    p.add_argument("--head-lr-scale", type=float, default=9.0)
    p.add_argument("--warmup", type=int, default=500,
                   help="steps before the lam-weighted terms activate")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--batch", type=int, default=36)
    p.add_argument("--alpha", type=float, default=0.9,
                   help="memory bank momentum")
    p.add_argument("--neighbors", type=int, default=10)
    p.add_argument("--k-tau", type=float, default=0.5)
    p.add_argument("--cred-scale", type=float, default=0.8)
    p.add_argument("--lam", type=float, default=0.1,
                   help="weight of the target-domain losses")
    p.add_argument("--sched-gamma", type=float, default=10.0)
    p.add_argument("--sched-power", type=float, default=0.75)
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--no-adapter", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--resume", default=None, help="state file to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint against labeled data")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="labeled UDAF file")
    p.add_argument("--micro", action="store_true",
                   help="sample-weighted common-class accuracy")
    p.add_argument("--out", default=None, help="directory for report files")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("label", help="per-sample verdicts and diagnostics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--source", required=True, help="source UDAF file")
    p.add_argument("--target", required=True, help="target UDAF file")
    p.add_argument("--out", required=True, help="output TSV path")
    p.add_argument("--neighbors", type=int, default=10)
    p.add_argument("--k-tau", type=float, default=0.5)
    p.add_argument("--cred-scale", type=float, default=0.8)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--hist-dir", default=None,
                   help="also write histogram TSVs here")
    p.add_argument("--bins", type=int, default=20)
    p.set_defaults(func=cmd_label)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UniadaptError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
