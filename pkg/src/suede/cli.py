"""``suede`` command line.

Verbs: ``train``, ``eval``, ``ablate``, ``export-embeddings``, ``gen-data``.
On failure the last line on stderr is a JSON object
``{"error": <class>, "code": <exit status>, "message": ...}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .ablation import KINDS, run_ablation
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .data import PROTOCOLS, export_split
from .errors import ConfigError, SuedeError
from .export import export_embeddings
from .metrics import MetricReport, write_records
from .train import evaluate_split, load_bank, make_split, train

IO_ERROR_CODE = 30


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _u64(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed out of u64 range: {text}")
    return value


def format_reports(rows: list[tuple[str, MetricReport]]) -> str:
    fields = ("acer", "apcer", "bpcer", "acc", "auc", "eer")
    head = f"{'':<12}" + "".join(f"{f.upper():>9}" for f in fields) + f"{'TPR@1%':>9}"
    lines = [head]
    for name, rep in rows:
        rec = rep.record()
        lines.append(
            f"{name:<12}" + "".join(f"{rec[f]:>9.4f}" for f in fields) + f"{rep.tpr_at_fpr.get(0.01, float('nan')):>9.4f}"
        )
    return "\n".join(lines)


def _config(args):
    return load_config(
        args.config,
        seed=getattr(args, "seed", None),
        protocol=getattr(args, "protocol", None),
        out_dir=getattr(args, "out", None),
    )


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dumps())
    history_path = out / "history.jsonl"
    history_path.write_text("")
    result = train(cfg, out_dir=out, on_epoch=lambda rec: write_records(history_path, [rec]))
    ckpt = save_checkpoint(
        out / "checkpoint.ckpt",
        result.model,
        cfg,
        result.optimizer,
        epoch=result.epoch,
        prng_state=result.prng_state,
        extra={"best_epoch": result.best_epoch},
    )
    rows = [(which, evaluate_split(result.model, cfg, result.split, which, result.bank)) for which in ("dev", "test")]
    write_records(out / "metrics.jsonl", [r.record() for _, r in rows], append=False)
    print(format_reports(rows))
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_eval(args) -> int:
    model, cfg, _, _ = load_checkpoint(args.checkpoint)
    overrides = {k: v for k, v in (("seed", args.seed), ("protocol", args.protocol)) if v is not None}
    if overrides:
        cfg = cfg.replace(**overrides)
    if args.config:
        cfg = load_config(args.config, **{**cfg.to_dict(), **overrides})
    split = make_split(cfg)
    report = evaluate_split(model, cfg, split, args.split, load_bank(cfg))
    if args.out:
        write_records(Path(args.out) / "metrics.jsonl", [report.record()])
    print(format_reports([(f"{split.name}/{args.split}", report)]))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    result = run_ablation(
        args.kind,
        cfg,
        n_seeds=args.seeds,
        on_run=lambda name, seed, rep: print(f"  {name} seed={seed} auc={rep.auc:.4f}", file=sys.stderr),
    )
    write_records(out / f"ablation_{args.kind}.jsonl", result.records(), append=False)
    table = result.table()
    (out / f"ablation_{args.kind}.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_export_embeddings(args) -> int:
    model, cfg, _, _ = load_checkpoint(args.checkpoint)
    overrides = {k: v for k, v in (("seed", args.seed), ("protocol", args.protocol)) if v is not None}
    cfg = cfg.replace(**overrides) if overrides else cfg
    split = make_split(cfg)
    path = Path(args.out)
    if path.suffix != ".jsonl":
        path = path / f"embeddings_{split.name}_{args.split}.jsonl"
    export_embeddings(model, split.split(args.split), path)
    print(path)
    return 0


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    export_split(make_split(cfg), out)
    (out / "prompts.txt").write_text(load_bank(cfg).dumps())
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="suede", description="Shared-expert MoE dual encoder for unified attack detection.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(sp, checkpoint=False, config=True):
        if config:
            sp.add_argument("--config", type=Path, help="key = value config file")
        sp.add_argument("--seed", type=_u64, help="master seed (u64)")
        sp.add_argument("--protocol", choices=PROTOCOLS)
        if checkpoint:
            sp.add_argument("--checkpoint", type=Path, required=True)

    sp = sub.add_parser("train", help="warm up, convert to SUE, train; write checkpoint and metrics")
    common(sp)
    sp.add_argument("--out", help="output directory")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a protocol split")
    common(sp, checkpoint=True)
    sp.add_argument("--split", choices=("train", "dev", "test"), default="test")
    sp.add_argument("--out", help="directory for metrics.jsonl")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="run an ablation sweep over seeds")
    sp.add_argument("kind", choices=KINDS)
    common(sp)
    sp.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds")
    sp.add_argument("--out", help="output directory")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("export-embeddings", help="write image embeddings of a split as JSONL")
    common(sp, checkpoint=True, config=False)
    sp.add_argument("--split", choices=("train", "dev", "test"), default="test")
    sp.add_argument("--out", required=True, help="output .jsonl file or directory")
    sp.set_defaults(func=cmd_export_embeddings)

    sp = sub.add_parser("gen-data", help="export a protocol split as image files plus manifests")
    common(sp)
    sp.add_argument("--out", help="output directory")
    sp.set_defaults(func=cmd_gen_data)
    return p


def error_line(exc: BaseException) -> tuple[int, str]:
    if isinstance(exc, SuedeError):
        code = exc.code
    elif isinstance(exc, OSError):
        code = IO_ERROR_CODE
    else:
        code = 1
    return code, json.dumps({"error": type(exc).__name__, "code": code, "message": str(exc)})


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except (SuedeError, OSError) as exc:
        code, line = error_line(exc)
        print(line, file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
