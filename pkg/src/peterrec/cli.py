"""Command-line surface: synth, pretrain, finetune, eval, export, plot.

Every failure path prints a single machine-parsable line to stderr,
``error <CODE>: <message>``, and exits nonzero.
"""

from __future__ import annotations

import argparse
import json
import math
import sys

from .backbone import SequenceModel
from .checkpoint import load_checkpoint, save_checkpoint, tensor_digest
from .config import _FIELD_TYPES, load_config
from .corpus import (
    SyntheticSpec,
    generate_synthetic,
    load_source,
    load_target,
    majority_vote_accuracy,
    save_source,
    save_target,
    split_target,
)
from .errors import ConfigError, ContractViolation, DataError, PeterRecError
from .evalbench import AblationMode, evaluate_accuracy, evaluate_ranking, pretrain, run_experiment
from .adapters import count_parameters
from . import plots


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int, help="hidden width")
    p.add_argument("--kernel", type=int)
    p.add_argument("--dilations", help="comma-separated, e.g. 1,2,4,8,1,2,4,8")
    p.add_argument("--causal", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--layer-order", dest="layer_order")
    p.add_argument("--dropout", type=float)
    p.add_argument("--objective", choices=["auto", "next_item", "masked"])
    p.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=int)
    p.add_argument("--pretrain-batch", dest="pretrain_batch", type=int)
    p.add_argument("--mask-rate", dest="mask_rate", type=float)
    p.add_argument("--valid-fraction", dest="valid_fraction", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--mode", choices=[m.value for m in AblationMode])
    p.add_argument("--insertion")
    p.add_argument("--head")
    p.add_argument("--bottleneck", type=int)
    p.add_argument("--loss", choices=["auto", "ce", "bpr"])
    p.add_argument("--task", choices=["classification", "item_rec"])
    p.add_argument("--finetune-epochs", dest="finetune_epochs", type=int)
    p.add_argument("--finetune-batch", dest="finetune_batch", type=int)
    p.add_argument("--finetune-lr", dest="finetune_lr", type=float)
    p.add_argument("--data-fraction", dest="data_fraction", type=float)
    p.add_argument("--tune-layernorm", dest="tune_layernorm", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--eval-negatives", dest="eval_negatives", type=int)
    p.add_argument("--ranking-k", dest="ranking_k", type=int)


def _config_from(args) -> "RunConfig":
    overrides = {k: v for k, v in vars(args).items() if k in _FIELD_TYPES and v is not None}
    return load_config(getattr(args, "config", None), overrides)


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        clusters=args.clusters,
        items_per_cluster=args.items_per_cluster,
        noise=args.noise,
        seq_len=args.seq_len,
        users=args.users,
        target_users=args.target_users,
        task=args.task,
        labels_per_user=args.labels_per_user,
    )
    seed = args.seed if args.seed is not None else _config_from(args).seed
    source, target = generate_synthetic(spec, seed)
    save_source(source, args.source_out)
    save_target(target, args.target_out)
    payload = {
        "source": args.source_out,
        "target": args.target_out,
        "users": spec.users,
        "vocab_size": spec.vocab_size,
        "num_labels": spec.num_labels,
        "task": spec.task,
    }
    if spec.task == "classification":
        payload["vote_ceiling_acc"] = round(majority_vote_accuracy(source, target, spec), 4)
    _emit(payload)
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config_from(args)
    source = load_source(args.source, seq_len=cfg.max_len)
    model = SequenceModel(cfg.backbone_config(source.vocab_size), seed=cfg.seed)
    plan = cfg.pretrain_plan()
    report = pretrain(model, source, plan)
    n_train = len(source) - max(1, round(plan.valid_fraction * len(source)))
    steps = plan.epochs * math.ceil(n_train / plan.batch_size)
    save_checkpoint(args.out, model, step=steps, rng_state={"seed": cfg.seed})
    report_path = args.report or args.out + ".report.jsonl"
    report.write(report_path)
    _emit({"checkpoint": args.out, "report": report_path, **report.summary})
    return 0


def cmd_finetune(args) -> int:
    cfg = _config_from(args)
    mode = AblationMode(cfg.mode)
    pretrained = None
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        if ckpt.config.kind != "backbone":
            raise ConfigError("fine-tuning starts from a pre-trained backbone checkpoint")
        backbone_cfg = ckpt.config.backbone
        pretrained = ckpt.params
        source = load_source(args.source, seq_len=backbone_cfg.max_len, vocab_size=backbone_cfg.vocab_size)
    else:
        ckpt = None
        source = load_source(args.source, seq_len=cfg.max_len)
        backbone_cfg = cfg.backbone_config(source.vocab_size)
    target = load_target(args.target, task_kind=cfg.task, source=source)
    train, valid, test = split_target(target, cfg.seed)
    plan = cfg.experiment_plan()
    report = run_experiment(plan, backbone_cfg, source, train, test, pretrained=pretrained)

    if report.model is not None and ckpt is not None:
        moved = [
            n
            for n in report.partition.frozen
            if n in ckpt.digests and tensor_digest(report.model.params[n].data) != ckpt.digests[n]
        ]
        if moved:
            raise ContractViolation(f"frozen tensors changed during fine-tuning: {moved[:3]}")

    report_path = args.report or ((args.out or "finetune") + ".report.jsonl")
    report.write(report_path)
    if report.model is not None and args.out:
        save_checkpoint(args.out, report.model, partition=report.partition,
                        step=plan.epochs, rng_state={"seed": cfg.seed})
    _emit({"checkpoint": args.out, "report": report_path, **report.summary})
    return 0


def cmd_eval(args) -> int:
    cfg = _config_from(args)
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.config.kind != "finetune":
        raise ConfigError("eval needs a fine-tuned checkpoint; export inspects backbones")
    model = ckpt.build()
    bb = ckpt.config.backbone
    source = load_source(args.source, seq_len=bb.max_len, vocab_size=bb.vocab_size)
    target = load_target(args.target, task_kind=cfg.task, num_labels=ckpt.config.num_labels, source=source)
    if args.split != "all":
        train, valid, test = split_target(target, cfg.seed)
        target = {"train": train, "valid": valid, "test": test}[args.split]
    protocol = args.protocol
    if protocol == "auto":
        protocol = "acc" if cfg.task == "classification" else "ranking"
    if protocol == "acc":
        payload = {"acc": evaluate_accuracy(model, source, target, batch_size=cfg.finetune_batch)}
    else:
        payload = evaluate_ranking(
            model, source, target, seed=cfg.seed, k=cfg.ranking_k,
            negatives=cfg.eval_negatives, batch_size=cfg.finetune_batch,
        )
    _emit({"split": args.split, "protocol": protocol, "instances": len(target), **payload})
    return 0


def cmd_export(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    report = count_parameters(ckpt.params, ckpt.partition())
    print(f"checkpoint: {args.checkpoint}")
    print(f"kind: {ckpt.config.kind}   step: {ckpt.step}")
    print(f"{'name':<28} {'shape':<18} {'count':>12}  partition")
    for row in report.rows:
        print(f"{row.name:<28} {str(row.shape):<18} {row.size:>12,}  {row.tag}")
    print(f"total {report.total:,} | frozen {report.frozen:,} | tunable {report.tunable:,} "
          f"| tunable fraction {report.tunable_fraction:.4%}")
    return 0


def cmd_plot(args) -> int:
    plots.render_curves(args.report, args.metric, args.out, title=args.title)
    _emit({"svg": args.out, "metric": args.metric, "reports": len(args.report)})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="peterrec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a clustered synthetic source/target pair")
    p.add_argument("--source-out", required=True)
    p.add_argument("--target-out", required=True)
    p.add_argument("--clusters", type=int, default=8)
    p.add_argument("--items-per-cluster", type=int, default=50)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--seq-len", type=int, default=50)
    p.add_argument("--users", type=int, default=4000)
    p.add_argument("--target-users", type=int, default=800)
    p.add_argument("--task", choices=["classification", "item_rec"], default="classification")
    p.add_argument("--labels-per-user", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="self-supervised training of the backbone")
    p.add_argument("--source", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    _add_config_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="adapt a backbone to a labeled target task")
    p.add_argument("--checkpoint", help="pre-trained backbone; omit for *zero / labelcs modes")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out")
    p.add_argument("--report")
    _add_config_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a fine-tuned checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--split", choices=["train", "valid", "test", "all"], default="test")
    p.add_argument("--protocol", choices=["auto", "acc", "ranking"], default="auto")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="print a checkpoint's parameter accounting")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("plot", help="render metric curves from reports to SVG")
    p.add_argument("--report", nargs="+", required=True)
    p.add_argument("--metric", default="acc")
    p.add_argument("--out", required=True)
    p.add_argument("--title")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PeterRecError as e:
        print(f"error {e.code}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error IO: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
