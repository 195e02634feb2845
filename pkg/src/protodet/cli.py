"""Command-line interface.

Subcommands: gen-data, train, eval, inspect-bank, ablate, plot. Exit codes:
0 success, 1 usage/configuration error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .ablation import run_ablation
from .bank import PrototypeBank
from .config import load_config, serialize_config
from .dataset import GenParams, generate, load as load_dataset
from .errors import ConfigurationError, DataError, NumericalError
from .evaluation import evaluate_dataset, format_report, write_report
from .npa import NpaError
from .training import load_checkpoint, run_training


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit with code 1
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _split_dir(data: Path, split: str) -> Path:
    candidate = data / split
    return candidate if (candidate / "manifest.json").exists() else data


def _cmd_gen_data(args) -> int:
    params = GenParams(num_proposals=args.proposals, image_size=args.image_size)
    manifest = generate(args.seed, args.images, args.classes, args.out, params)
    print(f"wrote {manifest.num_images} records to {args.out}")
    return 0


def _cmd_train(args) -> int:
    config = load_config(args.config, args.override)
    data = _split_dir(Path(args.data), "train")
    print(serialize_config(config), end="")
    run_training(data, args.out, config, resume=args.resume)
    print(f"finished {config.iterations} iterations -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    run = Path(args.run)
    ckpt = run / "checkpoint_final.npb"
    if not ckpt.exists():
        raise DataError(f"no final checkpoint in {run}")
    state = load_checkpoint(ckpt)
    dataset = load_dataset(_split_dir(Path(args.data), args.split))
    result = evaluate_dataset(state.net, dataset, state.config.nms_threshold)
    write_report(result, dataset.class_names, run)
    print(format_report(result, dataset.class_names), end="")
    return 0


def _cmd_inspect_bank(args) -> int:
    run = Path(args.run)
    path = run / "bank_final.npb"
    if not path.exists():
        raise DataError(f"no bank snapshot in {run}")
    bank = PrototypeBank.load(path)
    print(f"classes: {bank.num_classes}  capacity: {bank.capacity}  momentum: {bank.momentum}")
    for c in range(bank.num_classes):
        for polarity, mat in (("pos", bank.pos_matrix(c)), ("neg", bank.neg_matrix(c))):
            line = f"class {c} {polarity}: {mat.shape[0]}/{bank.capacity}"
            if mat.shape[0] >= 2:
                sims = mat @ mat.T
                off = sims[~np.eye(mat.shape[0], dtype=bool)]
                line += f"  pairwise cos min/mean/max {off.min():.3f}/{off.mean():.3f}/{off.max():.3f}"
            print(line)
            if mat.shape[0] >= 2:
                with np.printoptions(precision=3, suppress=True):
                    print(np.asarray(mat @ mat.T))
    return 0


def _cmd_ablate(args) -> int:
    base = load_config(args.config, args.override)
    data = Path(args.data)
    report = run_ablation(
        _split_dir(data, "train"),
        _split_dir(data, "test"),
        args.out,
        base,
        seeds=tuple(range(args.seeds)),
        bank_sizes=tuple(args.bank_sizes),
        parallel=args.parallel,
    )
    print((Path(args.out) / "ablation.txt").read_text(), end="")
    del report
    return 0


def _cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run = Path(args.run)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = run / "metrics.jsonl"
    if not metrics_path.exists():
        raise DataError(f"no metrics log in {run}")
    rows = [json.loads(line) for line in metrics_path.read_text().splitlines()]
    iters = [r["iter"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for key in ("L_total", "L_mil", "L_cont"):
        ax.plot(iters, [r.get(key, 0.0) for r in rows], label=key, linewidth=0.8)
    ref_keys = sorted(k for k in rows[0] if k.startswith("L_ref_"))
    for key in ref_keys:
        ax.plot(iters, [r[key] for r in rows], label=key, linewidth=0.6, alpha=0.7)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "loss_curves.png", dpi=130)
    plt.close(fig)
    print(f"wrote {out / 'loss_curves.png'}")

    if args.data:
        from .evaluation import infer

        state = load_checkpoint(run / "checkpoint_final.npb")
        dataset = load_dataset(_split_dir(Path(args.data), "test"))
        for rec in dataset.records[: args.overlay_count]:
            dets = infer(
                state.net, rec.image, rec.proposals.array, rec.image_id,
                state.config.nms_threshold,
            )
            dets = [d for d in dets if d.confidence >= args.min_confidence]
            fig, ax = plt.subplots(figsize=(4, 4))
            ax.imshow(rec.image)
            for obj in rec.gt_objects:
                b = obj.box
                ax.add_patch(
                    plt.Rectangle((b.x1, b.y1), b.width, b.height, fill=False,
                                  edgecolor="lime", linewidth=1.5)
                )
            for d in sorted(dets, key=lambda d: -d.confidence)[:12]:
                b = d.box
                ax.add_patch(
                    plt.Rectangle((b.x1, b.y1), b.width, b.height, fill=False,
                                  edgecolor="red", linewidth=1.0)
                )
                ax.text(b.x1, b.y1 - 1, f"{dataset.class_names[d.class_index]} {d.confidence:.2f}",
                        color="red", fontsize=6)
            ax.axis("off")
            fig.tight_layout()
            fig.savefig(out / f"overlay_{rec.image_id}.png", dpi=130)
            plt.close(fig)
        print(f"wrote {args.overlay_count} overlays to {out}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="protodet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[], help="generate a synthetic shapes dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, required=True)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--proposals", type=int, default=150)
    p.add_argument("--image-size", type=int, default=96)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a finished run")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("inspect-bank", help="print prototype bank statistics")
    p.add_argument("--run", required=True)
    p.set_defaults(func=_cmd_inspect_bank)

    p = sub.add_parser("ablate", help="run the component ablation and bank-size sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--config", default=None)
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--bank-sizes", type=int, nargs="*", default=[2, 4, 6, 8])
    p.add_argument("--parallel", type=int, default=2)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("plot", help="export loss curves and detection overlays")
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--overlay-count", type=int, default=6)
    p.add_argument("--min-confidence", type=float, default=0.05)
    p.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 1
    except (DataError, NpaError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
