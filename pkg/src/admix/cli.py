"""Command-line entry point: ``admix {gen-data,train,attack,sweep,report}``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness as H
from .attacks import ATTACKS, attack_config
from .data import Dataset, generate_synthetic_dataset
from .errors import AdmixError
from .models import BUILTINS, Model, accuracy, builtin_spec, init_weights, save_checkpoint, train
from .transforms import TransformConfig

# default training recipe for the built-in nets on the synthetic shapes
TRAIN_EPOCHS = 20
TRAIN_LR = 0.05
TRAIN_BATCH = 8


def _add_attack_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--surrogate", action="append", required=True, metavar="PATH",
                   help="surrogate checkpoint; repeat for an equal-weight logit ensemble")
    p.add_argument("--target", action="append", required=True, metavar="PATH",
                   help="target checkpoint (repeatable)")
    p.add_argument("--data", required=True, metavar="PATH", help="dataset file to attack")
    p.add_argument("--pool", metavar="PATH", help="dataset to sample mixing images from (default: --data)")
    p.add_argument("--limit", type=int, help="attack only the first N images")
    p.add_argument("--attack", choices=ATTACKS, default="admix")
    p.add_argument("--use-dim", action="store_true", help="random resize-and-pad each copy")
    p.add_argument("--use-tim", action="store_true", help="Gaussian-smooth the averaged gradient")
    p.add_argument("--eps-255", type=float, default=16.0, help="L-inf budget in 0-255 pixel units")
    p.add_argument("--alpha-255", type=float, help="step size in 0-255 units (default eps/iters)")
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--m1", type=int, default=5)
    p.add_argument("--m2", type=int, default=3)
    p.add_argument("--eta", type=float, default=0.2)
    p.add_argument("--dim-prob", type=float, default=0.5)
    p.add_argument("--tim-kernel", type=int, default=7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--restrict-to-correct", action="store_true",
                   help="drop images a target misclassifies before the attack from its denominator")
    p.add_argument("--out", metavar="PATH", help="report path (default: print to stdout)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")


def _run_config(args) -> H.RunConfig:
    tcfg = TransformConfig(m1=args.m1, m2=args.m2, eta=args.eta,
                           dim_prob=args.dim_prob, tim_kernel_size=args.tim_kernel)
    cfg = attack_config(
        args.attack,
        epsilon=args.eps_255 / 255.0,
        iters=args.iters,
        alpha=None if args.alpha_255 is None else args.alpha_255 / 255.0,
        mu=args.mu,
        use_dim=args.use_dim,
        use_tim=args.use_tim,
        tcfg=tcfg,
        seed=args.seed,
    )
    return H.RunConfig(
        surrogates=tuple(args.surrogate), targets=tuple(args.target), dataset=args.data,
        attack=args.attack, cfg=cfg, restrict_to_correct=args.restrict_to_correct,
        out=args.out, pool=args.pool, limit=args.limit,
    )


def _emit(rows, run: H.RunConfig, fmt: str) -> None:
    if run.out:
        H.write_report(rows, fmt, run.out)
        data = Dataset.load(run.dataset)
        n = len(data) if run.limit is None else min(run.limit, len(data))
        H.write_metadata(run.out, run, n, len(set(data.labels.tolist())))
    else:
        sys.stdout.write(H.format_report(rows, fmt))


def cmd_gen_data(args) -> None:
    ds = generate_synthetic_dataset(args.classes, args.per_class, args.size, args.seed)
    ds.save(args.out)
    print(f"wrote {len(ds)} images of shape {list(ds.image_shape)} to {args.out}")


def cmd_train(args) -> None:
    data = Dataset.load(args.data)
    train_part, held_out = data.split(args.train_count) if args.train_count else (data, None)
    spec = builtin_spec(args.arch, input_shape=data.image_shape, num_classes=args.classes)
    model = Model(spec, init_weights(spec, args.seed))
    weights = train(model, train_part, args.epochs, args.lr, args.batch, args.seed)
    save_checkpoint(spec, weights, args.out)
    trained = Model(spec, weights)
    msg = f"{args.arch}: train accuracy {accuracy(trained, train_part):.4f}"
    if held_out is not None and len(held_out):
        msg += f", held-out accuracy {accuracy(trained, held_out):.4f}"
    print(msg)


def cmd_attack(args) -> None:
    run = _run_config(args)
    _emit(H.evaluate_attack(run), run, args.format)


def cmd_sweep(args) -> None:
    run = _run_config(args)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise AdmixError(f"--values must be a comma-separated list of numbers, got {args.values!r}") from None
    _emit(H.sweep_ablation(run, args.axis, values), run, args.format)


def cmd_report(args) -> None:
    rows = H.read_report(args.input)
    if args.out:
        H.write_report(rows, args.format, args.out)
        return
    if args.format != "table":
        sys.stdout.write(H.format_report(rows, args.format))
        return
    cols = ("surrogate", "target", "attack", "n", "success", "whitebox")
    table = [cols] + [(r.surrogate, r.target, r.attack, str(r.n), f"{100 * r.success_rate:.1f}%",
                       "*" if r.is_whitebox else "") for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(cols))]
    for row in table:
        print("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="admix", description="Transfer attacks on small CNNs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic shapes dataset")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=120)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a built-in architecture")
    p.add_argument("--data", required=True)
    p.add_argument("--arch", choices=sorted(BUILTINS), default="net-a")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--train-count", type=int, default=1000,
                   help="train on the first N records and report accuracy on the rest (0: use all)")
    p.add_argument("--epochs", type=int, default=TRAIN_EPOCHS)
    p.add_argument("--lr", type=float, default=TRAIN_LR)
    p.add_argument("--batch", type=int, default=TRAIN_BATCH)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="craft adversaries and report success rates")
    _add_attack_flags(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("sweep", help="repeat an attack over values of m2 or eta")
    _add_attack_flags(p)
    p.add_argument("--axis", choices=H.SWEEP_AXES, required=True)
    p.add_argument("--values", required=True, help="comma-separated, e.g. 0,0.1,0.2,0.3")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="print or convert a report file")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--format", choices=("table", "csv", "json"), default="table")
    p.add_argument("--out", help="write converted report (csv or json) here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "report" and args.out and args.format == "table":
        args.format = "json" if Path(args.out).suffix == ".json" else "csv"
    try:
        args.func(args)
    except AdmixError as e:
        print(f"admix: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
