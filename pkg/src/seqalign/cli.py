"""Command-line entry point.

Configuration precedence, lowest to highest: built-in defaults, the
``--config`` file, then ``--set KEY=VALUE`` flags in the order given.
The resolved configuration is echoed to stderr before any work starts.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import numcore as nc
from .align import expand_split_labels, pseudo_viterbi, split_sizes
from .config import FINE_METHODS, RunConfig, parse_pairs
from .data import gen_dataset, make_pairs, read_dataset, write_dataset
from .errors import ConfigError, DataError, NumericalError, SeqAlignError
from .evalkit import build_match_instances, format_metrics, match_eval, pair_scores, roc_auc
from .losses import cosine_sim_matrix
from .model import encode_frames, init_params, load_checkpoint, load_params_into
from .numcore import Rng
from .report import parse_metrics_log, plot_alignment, plot_training
from .train import (CHECKPOINT_NAME, GRADCHECK_DIMS, METRICS_NAME, fit, load_state,
                    loss_gradcheck)

log = logging.getLogger("seqalign")

GRADCHECK_TOL = 1e-3


def resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    pairs = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        pairs.update(parse_pairs(path.read_text(encoding="utf-8").splitlines(), str(path)))
    pairs.update(parse_pairs(args.set or [], "--set"))
    cfg = (base or RunConfig()).with_overrides(pairs)
    sys.stderr.write("# resolved config\n" + "".join(f"# {l}\n" for l in cfg.dumps().splitlines()))
    return cfg


def load_model(cfg: RunConfig, checkpoint):
    params = init_params(cfg, Rng(cfg.seed).child("init"))
    if checkpoint is not None:
        load_params_into(params, load_checkpoint(checkpoint))
    return params


def emit(metrics: dict, args) -> None:
    text = format_metrics(metrics, args.json)
    sys.stdout.write(text)
    if getattr(args, "out", None):
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    ds = gen_dataset(cfg, Rng(cfg.seed, "data"))
    out = Path(args.out)
    write_dataset(out, ds)
    (out / "config.txt").write_text(cfg.dumps())
    emit({"train_videos": len(ds.train), "eval_videos": len(ds.eval), "tasks": len(ds.tasks)},
         argparse.Namespace(json=args.json))
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    ds = read_dataset(args.data)
    out = Path(args.out)
    state = None
    if args.resume:
        ckpt = out / CHECKPOINT_NAME
        if not ckpt.exists():
            raise DataError(f"--resume given but no checkpoint at {ckpt}")
        state = load_state(ckpt, cfg, ds.train)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dumps())
    result = fit(ds, cfg, Rng(cfg.seed), out_dir=out, state=state, until_epoch=args.until_epoch)
    for line in result.log_lines:
        sys.stdout.write(line + "\n")
    history = parse_metrics_log((out / METRICS_NAME).read_text())
    if len(history["epoch"]):
        plot_training(history, out / "training.png")
    return 0


def cmd_eval_verify(args) -> int:
    cfg = resolve_config(args)
    ds = read_dataset(args.data)
    pairs = make_pairs(ds.eval, Rng(cfg.seed).child("pairs"))
    if not pairs:
        raise DataError("no verification pairs: every task has a single order")
    scores, labels = pair_scores(pairs, load_model(cfg, args.checkpoint))
    decided = -scores <= cfg.tau_threshold
    emit({"verify_auc": roc_auc(scores, labels),
          "n_pairs": len(pairs),
          "n_positive": int(labels.sum()),
          "threshold": cfg.tau_threshold,
          "threshold_accuracy": float(np.mean(decided == labels))}, args)
    return 0


def cmd_eval_match(args) -> int:
    cfg = resolve_config(args)
    ds = read_dataset(args.data)
    instances = build_match_instances(ds.eval, load_model(cfg, args.checkpoint),
                                      Rng(cfg.seed, "match"), cfg.match_candidates)
    if not instances:
        raise DataError("no matching instances: every task has a single order")
    acc, auc = match_eval(instances)
    emit({"match_top1": acc, "match_auc": auc, "n_instances": len(instances)}, args)
    return 0


def alignment_for(sim: np.ndarray, method: str, tau_v: float) -> np.ndarray:
    """Per-frame labels for a dump; noise-free so the output is reproducible."""
    n, k = sim.shape
    if method == "sort":
        return np.sort(np.argmax(sim, axis=1))
    if method == "viterbi":
        return pseudo_viterbi(sim, tau_v)
    return expand_split_labels(n, k)


def _csv(rows) -> str:
    return "".join(",".join(str(x) for x in row) + "\n" for row in rows)


def cmd_align_dump(args) -> int:
    cfg = resolve_config(args)
    ds = read_dataset(args.data)
    found = {s.video_id: s for s in ds.train + ds.eval}
    if args.video_id not in found:
        raise DataError(f"unknown video id {args.video_id!r}")
    sample = found[args.video_id]
    if args.checkpoint is not None:
        with nc.no_grad():
            H, _ = encode_frames(sample.frames, load_model(cfg, args.checkpoint))
        sim = cosine_sim_matrix(H, sample.sentences).value
    else:
        # no encoder: frames go through the generator's own text map
        sim = cosine_sim_matrix(sample.frames @ ds.text_map.T, sample.sentences).value
    method = args.method or cfg.fine_method
    labels = alignment_for(sim, method, cfg.tau_v)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sim.csv").write_text(_csv(np.char.mod("%.8f", sim)))
    table = _csv([("frame", "label", "gt")] + [(i, int(l), int(g)) for i, (l, g) in
                                                enumerate(zip(labels, sample.gt_labels))])
    (out / "labels.csv").write_text(table)
    if method == "viterbi":
        (out / "path.csv").write_text(_csv([(i, int(l)) for i, l in enumerate(labels)]))
    if method == "split":
        (out / "split.csv").write_text(_csv([(j, size) for j, size in
                                             enumerate(split_sizes(*sim.shape))]))
    plot_alignment(sim, labels, out / "alignment.png", gt=sample.gt_labels,
                   title=f"{sample.video_id} ({method})")
    sys.stdout.write(table)
    return 0


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args, RunConfig(**GRADCHECK_DIMS))
    methods = FINE_METHODS if args.method == "all" else (args.method or cfg.fine_method,)
    worst_name, worst = "", 0.0
    for method in methods:
        report = loss_gradcheck(cfg.replace(fine_method=method))
        for name, err in report.items():
            sys.stdout.write(f"{method}\t{name}\t{err:.3e}\n")
            if err >= worst:
                worst_name, worst = f"{method}:{name}", err
    ok = worst <= GRADCHECK_TOL
    sys.stdout.write(f"max\t{worst_name}\t{worst:.3e}\n")
    sys.stdout.write(f"status\t{'pass' if ok else 'fail'}\t{GRADCHECK_TOL:.0e}\n")
    return 0 if ok else NumericalError.exit_code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqalign", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config value (repeatable, wins over --config)")
        p.add_argument("--json", action="store_true", help="emit metrics as one JSON object")
        p.set_defaults(fn=fn)
        return p

    p = command("gen-data", cmd_gen_data, "generate a synthetic train/eval dataset")
    p.add_argument("--out", required=True)

    p = command("train", cmd_train, "train an encoder; writes metrics.tsv, checkpoint, figure")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.svrc")
    p.add_argument("--until-epoch", type=int, help="stop after this epoch")

    for name, fn, text in (("eval-verify", cmd_eval_verify, "sequence verification AUC"),
                           ("eval-match", cmd_eval_match, "paragraph to video matching")):
        p = command(name, fn, text)
        p.add_argument("--data", required=True)
        p.add_argument("--checkpoint", help="trained checkpoint; omitted means untrained")
        p.add_argument("--out", help="also write the metrics here")

    p = command("align-dump", cmd_align_dump, "similarity map and pseudo-labels for one video")
    p.add_argument("--data", required=True)
    p.add_argument("--video-id", required=True)
    p.add_argument("--method", choices=FINE_METHODS)
    p.add_argument("--checkpoint", help="omitted means frames are mapped by the data's text map")
    p.add_argument("--out", required=True, help="directory for CSV files and alignment.png")

    p = command("gradcheck", cmd_gradcheck, "central-difference check of the full loss")
    p.add_argument("--method", choices=FINE_METHODS + ("all",))
    return parser


def _thread_limit():
    raw = os.environ.get("SEQALIGN_THREADS")
    if not raw:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    try:
        return threadpool_limits(limits=max(1, int(raw)))
    except ValueError:
        raise ConfigError(f"SEQALIGN_THREADS must be an integer, got {raw!r}") from None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.fn(args)
    except SeqAlignError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return exc.exit_code
    except FileNotFoundError as exc:
        sys.stderr.write(f"error: {exc.strerror}: {exc.filename}\n")
        return DataError.exit_code
    except ValueError as exc:
        # contract and dimension violations surfacing from the library
        sys.stderr.write(f"error: {exc}\n")
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
