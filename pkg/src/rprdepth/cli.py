"""Command-line entry point ``rprdepth``.

Exit codes: 0 success, 1 validation or config error, 2 I/O or format
error, 3 numeric failure.
"""
import argparse
import logging
import os
import sys

from .errors import ConfigError, DataIOError, RPrDepthError

log = logging.getLogger("rprdepth")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    # usage mistakes are configuration errors, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _size(text):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from e
    return w, h


def _config(path):
    from .train import TrainConfig

    return TrainConfig.from_file(path)


def _train_split(config, with_pseudo):
    from .data import PseudoLabelStore, load_dataset

    if not config.data_dir:
        raise ConfigError("this command reads data_dir from the config; set it")
    train = list(load_dataset(config.data_dir, "train"))
    pseudo = PseudoLabelStore.load(config.data_dir) if with_pseudo else None
    return train, pseudo


def _load_optional_pose(path):
    from .networks import PoseNet, load_model

    if not os.path.exists(path):
        return None
    model = load_model(path)
    if not isinstance(model, PoseNet):
        raise ConfigError(f"{path} does not hold a pose network")
    return model


def _load_kind(path, cls, what):
    from .networks import load_model

    model = load_model(path)
    if not isinstance(model, cls):
        raise ConfigError(f"{path} does not hold a {what} network")
    return model


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    from .data import generate_synthetic_scene, split_counts, write_dataset

    counts = split_counts(args.n, args.ref, args.val, args.test)
    triplets = generate_synthetic_scene(args.seed, args.n, args.lr, args.rr_scale)
    write_dataset(args.out, triplets, counts=counts)
    print(" ".join(f"{k}={v}" for k, v in counts.items()))


def cmd_train_teacher(args):
    from .networks import save_model
    from .train import make_splits, train_teacher

    config = _config(args.config)
    splits = make_splits(config)
    teacher, pose_net = train_teacher(config, splits["train"], return_pose_net=True)
    os.makedirs(config.output_dir, exist_ok=True)
    path = os.path.join(config.output_dir, "teacher.ckpt")
    save_model(teacher, path, teacher.step)
    save_model(pose_net, os.path.join(config.output_dir, "teacher_pose.ckpt"))
    print(path)


def cmd_pseudo_labels(args):
    from .data import build_pseudo_labels, load_dataset

    store = build_pseudo_labels(args.teacher, load_dataset(args.data, "train"))
    store.save(args.data)
    print(f"{len(store)} pseudo labels under {os.path.join(args.data, 'pseudo')}")


def cmd_build_bank(args):
    from .data import load_dataset
    from .networks import TeacherNet
    from .refbank import sample_reference_bank, save_bank

    teacher = _load_kind(args.teacher, TeacherNet, "teacher")
    bank = sample_reference_bank(teacher, load_dataset(args.data, "ref"), args.fraction, args.seed)
    save_bank(bank, args.out)
    print(f"{len(bank)} rows -> {args.out}")


def cmd_train_student(args):
    from .networks import save_model
    from .refbank import load_bank, save_bank
    from .train import train_student

    config = _config(args.config)
    bank = load_bank(args.bank) if args.bank else None
    if config.use_bank and bank is None:
        raise ConfigError("use_bank is set; pass --bank")
    train, pseudo = _train_split(config, config.use_bank or config.rich_loss)
    pose = _load_optional_pose(os.path.join(config.output_dir, "teacher_pose.ckpt"))
    student, pose_net, bank = train_student(config, train, None, bank, pseudo, pose_net=pose)
    os.makedirs(config.output_dir, exist_ok=True)
    path = os.path.join(config.output_dir, "student.ckpt")
    save_model(student, path, student.step)
    save_model(pose_net, os.path.join(config.output_dir, "pose.ckpt"))
    if config.use_bank:
        save_bank(bank, os.path.join(config.output_dir, "bank_full.rprb"))
    print(path)


def cmd_select_features(args):
    from .data import load_dataset
    from .networks import StudentNet
    from .refbank import load_bank, refresh_matched, save_bank
    from .train import select_features

    student = _load_kind(args.student, StudentNet, "student")
    bank = refresh_matched(load_bank(args.bank), student.conv_m) if student.use_bank \
        else load_bank(args.bank)
    selected, _ = select_features(student, bank, load_dataset(args.val, "val"), args.k or None,
                                  args.ratio)
    save_bank(selected, args.out)
    print(f"{len(selected)} of {len(bank)} rows -> {args.out}")


def cmd_finetune(args):
    from .networks import StudentNet, save_model
    from .refbank import load_bank, save_bank
    from .train import finetune_with_selected_bank

    config = _config(args.config)
    student = _load_kind(args.student, StudentNet, "student")
    train, pseudo = _train_split(config, True)
    pose = _load_optional_pose(os.path.join(config.output_dir, "pose.ckpt"))
    student, pose_net, bank = finetune_with_selected_bank(student, load_bank(args.bank), config,
                                                          train, pseudo, pose)
    os.makedirs(config.output_dir, exist_ok=True)
    path = os.path.join(config.output_dir, "student_finetuned.ckpt")
    save_model(student, path, student.step)
    save_bank(bank, os.path.join(config.output_dir, "bank_selected.rprb"))
    print(path)


def cmd_infer(args):
    from .data import _load_png
    from .evaluate import InferenceEngine, export_depth, predict

    engine = InferenceEngine.load(args.engine, args.bank, args.postprocess)
    depth = predict(engine, _load_png(args.image))[0, 0].numpy()
    png = export_depth(depth, args.out)
    print(f"{args.out} {png}")


def cmd_eval(args):
    from .data import load_dataset
    from .evaluate import InferenceEngine, MetricsRecord, evaluate_split

    engine = InferenceEngine.load(args.engine, args.bank, args.postprocess)
    scaling = "none" if args.no_median_scaling else "median"
    record = evaluate_split(engine, load_dataset(args.data, args.split), args.cap, scaling)
    print(MetricsRecord.header())
    print(record.row())


def cmd_ablate(args):
    from .evaluate import VARIANTS, ablation_report, run_ablation

    config = _config(args.config)
    out = args.out or os.path.join(config.output_dir, "ablation")
    variants = tuple(args.variants.split(",")) if args.variants else VARIANTS
    if args.report_only:
        text, missing = ablation_report(out, variants)
    else:
        text, missing, _, _ = run_ablation(config, out, variants)
    print(text)
    if missing:
        raise DataIOError(f"no stored metrics for {missing}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="rprdepth", description="Rich-resource prior depth estimation")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", help="render a synthetic dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=260)
    s.add_argument("--lr", type=_size, default=(64, 32), help="LR size as WxH")
    s.add_argument("--rr-scale", type=int, default=2)
    s.add_argument("--ref", type=float, default=0.1, help="ref split fraction")
    s.add_argument("--val", type=float, default=0.1, help="val split fraction")
    s.add_argument("--test", type=float, default=0.1, help="test split fraction")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train-teacher", help="train the rich-resource teacher")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("pseudo-labels", help="write teacher depth for the train split")
    s.add_argument("--teacher", required=True)
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_pseudo_labels)

    s = sub.add_parser("build-bank", help="sample the reference bank from the ref split")
    s.add_argument("--teacher", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--fraction", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_bank)

    s = sub.add_parser("train-student", help="train the LR student")
    s.add_argument("--config", required=True)
    s.add_argument("--bank")
    s.set_defaults(func=cmd_train_student)

    s = sub.add_parser("select-features", help="compress a bank by attention weight")
    s.add_argument("--student", required=True)
    s.add_argument("--bank", required=True)
    s.add_argument("--val", required=True, help="dataset root holding the val split")
    s.add_argument("--k", type=int, default=0, help="rows to keep; 0 keeps 1%%")
    s.add_argument("--ratio", type=float, default=0.01)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_select_features)

    s = sub.add_parser("finetune", help="fine-tune the student on a selected bank")
    s.add_argument("--student", required=True)
    s.add_argument("--bank", required=True)
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("infer", help="predict depth for one LR image")
    s.add_argument("--engine", required=True)
    s.add_argument("--bank")
    s.add_argument("--postprocess", action="store_true")
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True, help="depth file; a PNG is written beside it")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="seven-metric evaluation of a split")
    s.add_argument("--engine", required=True)
    s.add_argument("--bank")
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--cap", type=float, default=80.0)
    s.add_argument("--no-median-scaling", action="store_true")
    s.add_argument("--postprocess", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="train and compare the ablation variants")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--variants", help="comma-separated subset, e.g. Baseline,+PDF")
    s.add_argument("--report-only", action="store_true",
                   help="print stored metrics without training")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except RPrDepthError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (OSError, EOFError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ArithmeticError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
