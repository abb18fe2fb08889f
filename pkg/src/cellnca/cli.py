"""Command-line entry point: ``cellnca <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data
from .checkpoint import load_checkpoint, save_checkpoint
from .config import read_config
from .errors import CheckpointError, ConfigError, DataError, NcaError
from .evaluation import EVAL_SEED, crossdomain, evaluate, sweep_channels
from .explain import export_heatmaps, lrp_epsilon, route_to_cells
from .model import NcaConfig, classify, rollout
from .train import TrainPlan, fit

log = logging.getLogger("cellnca")


class UsageError(NcaError):
    pass


def _config(args):
    if args.config is None:
        return NcaConfig(), TrainPlan(), {}
    return read_config(args.config)


def _manifest(path):
    if not Path(path).is_file():
        raise UsageError(f"manifest not found: {path}")
    return data.DatasetManifest.read(path)


def _select(manifest, split):
    chosen = manifest if split == "all" else manifest.split(split)
    if len(chosen) == 0:
        raise UsageError(f"manifest has no entries in split {split!r}")
    return chosen


def _checkpoint(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _write_lines(path, records):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records), encoding="utf-8")


def _pairs(items, what):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"{what} must look like DOMAIN=PATH, got {item!r}")
        domain, path = item.split("=", 1)
        out.setdefault(domain, []).extend(p for p in path.split(",") if p)
    return out


def cmd_synth(args):
    fractions = {}
    for part in args.split.split(","):
        name, share = part.split("=")
        fractions[name] = float(share)
    dataset = data.synth_blobs(args.seed, args.per_class, args.num_classes,
                               hue_shift=args.hue_shift, domain=args.domain)
    out = Path(args.out)
    manifest = data.write_image_set(dataset, out / "images", fractions, seed=args.seed)
    manifest.write(out / "manifest.tsv")
    data.HarmonizationMap.identity(args.domain, range(args.num_classes)).write(out / "harmonization.tsv")
    print(f"wrote {len(manifest)} images to {out}")
    return 0


def cmd_train(args):
    config, plan, _ = _config(args)
    manifest = _manifest(args.manifest)
    train_set = _select(manifest, "train").load()
    val_entries = manifest.split("val")
    val_set = val_entries.load() if len(val_entries) else None
    metrics = Path(args.metrics) if args.metrics else Path(str(args.out) + ".metrics.jsonl")
    metrics.parent.mkdir(parents=True, exist_ok=True)
    with metrics.open("w", encoding="utf-8") as fh:
        def progress(record):
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            print(json.dumps(record, sort_keys=True))
        result = fit(train_set, config, plan, args.seed, val_set=val_set, progress=progress)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.params, config, args.out)
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_eval(args):
    ckpt = _checkpoint(args.checkpoint)
    test_set = _select(_manifest(args.manifest), args.split).load()
    report = evaluate(ckpt.params, ckpt.config, test_set, seed=args.eval_seed, mc=args.mc,
                      trained_on=args.trained_on or "")
    print(report.format_table())
    if args.out:
        _write_lines(args.out, [report.to_record()])
    return 0


def cmd_crossdomain(args):
    checkpoints = _pairs(args.checkpoint, "--checkpoint")
    manifests = _pairs(args.manifest, "--manifest")
    models, tests, problems = {}, {}, []
    for domain, paths in checkpoints.items():
        for p in paths:
            try:
                ck = load_checkpoint(p)
                models.setdefault(domain, []).append((ck.params, ck.config))
            except (CheckpointError, OSError) as exc:
                problems.append(f"checkpoint {p} for {domain}: {exc}")
    for domain, paths in manifests.items():
        try:
            tests[domain] = _select(data.DatasetManifest.read(paths[0]), args.split).load()
        except (DataError, UsageError) as exc:
            problems.append(f"manifest for {domain}: {exc}")
    if len(set(models) | set(tests)) < 1:
        raise UsageError("crossdomain needs at least one domain")
    result = crossdomain(models, tests, seed=args.eval_seed, mc=args.mc, jobs=args.jobs)
    result.missing.extend(problems)
    print(result.format_table())
    if args.out:
        _write_lines(args.out, result.records())
    return 1 if problems else 0


def cmd_sweep(args):
    try:
        channels = [int(c) for c in args.channels.split(",") if c]
    except ValueError:
        raise UsageError(f"--channels must be a comma-separated list of integers: {args.channels!r}") from None
    bad = [n for n in channels if n < 3]
    if bad:
        raise UsageError(f"channel counts must be >= 3, got {bad}")
    config, plan, _ = _config(args)
    manifest = _manifest(args.manifest)
    train_set = _select(manifest, "train").load()
    test_set = _select(manifest, "test").load()
    rows = sweep_channels(train_set, test_set, config, plan, channels, args.seed,
                          progress=lambda row: print(f"{row[0]}\t{row[1]:.4f}", flush=True))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text("channels\taccuracy\n" + "".join(f"{n}\t{a!r}\n" for n, a in rows),
                                  encoding="utf-8")
    return 0


def cmd_explain(args):
    ckpt = _checkpoint(args.checkpoint)
    if not Path(args.image).is_file():
        raise UsageError(f"image not found: {args.image}")
    image = data.load_image_64(args.image)
    ro = rollout(image, ckpt.params, ckpt.config, rng=np.random.default_rng(args.seed))
    predicted = classify(ro.features, ckpt.params).predicted
    relevance = lrp_epsilon(ro.features, ckpt.params, predicted, epsilon=args.epsilon)
    rmap = route_to_cells(relevance, ro.final_state, ro.argmax_pos)
    export_heatmaps(rmap, args.top_k, args.out)
    print(f"predicted class {predicted}")
    for ch in rmap.top(args.top_k):
        print(f"channel {ch.channel}\trelevance {ch.relevance:.6g}\tcell {ch.cell}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="cellnca", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic blob dataset to disk")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=250)
    p.add_argument("--num-classes", type=int, default=3)
    p.add_argument("--hue-shift", type=float, default=0.0)
    p.add_argument("--domain", default="synth")
    p.add_argument("--split", default="train=0.8,test=0.2", help="e.g. train=0.7,val=0.1,test=0.2")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit a model and write a checkpoint")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", help="train, val, test or all")
    p.add_argument("--seed", "--eval-seed", dest="eval_seed", type=int, default=EVAL_SEED)
    p.add_argument("--mc", type=int, default=1, help="average logits over N mask draws")
    p.add_argument("--trained-on")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crossdomain", help="train-on/test-on accuracy matrix")
    p.add_argument("--checkpoint", action="append", help="DOMAIN=PATH[,PATH...]; repeatable")
    p.add_argument("--manifest", action="append", help="DOMAIN=PATH; repeatable")
    p.add_argument("--split", default="test")
    p.add_argument("--seed", "--eval-seed", dest="eval_seed", type=int, default=EVAL_SEED)
    p.add_argument("--mc", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1, help="evaluate cells in N worker processes")
    p.add_argument("--out")
    p.set_defaults(func=cmd_crossdomain)

    p = sub.add_parser("sweep-channels", help="accuracy as a function of channel count")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--channels", required=True, help="comma-separated, e.g. 8,16,32")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("explain", help="relevance heatmaps for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--seed", type=int, default=EVAL_SEED)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"cellnca {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except NcaError as exc:
        print(f"cellnca {args.command}: {exc.__class__.__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
