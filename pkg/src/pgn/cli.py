"""Command-line front end: ``pgn <command> [options]``."""

import argparse
import os
import sys
import time
import traceback

from pgn import _kernels, checkpoint, config, data, metrics, theory, train
from pgn import diffcore as dc
from pgn.models import BLACK_BOX, FROM_CLASSIFIER, WHITE_BOX, build_discriminator, build_generator

COMMANDS = (
    "train-classifier",
    "train-pgn",
    "evaluate",
    "verify-theory",
    "export-curves",
    "gen-synthetic-data",
)


def _log(msg):
    print(msg, flush=True)


# ---------------------------------------------------------------- shared plumbing


def _run_config(args, require_mode):
    overrides = list(args.set or [])
    for flag, key in (("mode", "mode"), ("loss", "loss_variant"), ("gamma", "gamma"), ("lam", "lambda"), ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"train.{key}={value}")
    if getattr(args, "black_box", False):
        overrides.append(f"train.access_policy={BLACK_BOX}")
    return config.parse_config(args.config, overrides, require_mode=require_mode)


def _write_run_txt(out, command, run):
    lines = [
        f"# pgn {command}",
        f"# seed {run.values['train']['seed']}  data seed {run.values['data']['seed']}",
        f"# backend {_kernels.backend()}",
        "",
        config.dump_config(run),
    ]
    with open(os.path.join(out, "run.txt"), "w") as fh:
        fh.write("\n".join(lines))


def load_data(run):
    d = run.section("data")
    if d["source"] == "synthetic":
        ds = data.make_synthetic(d["n_train"], d["n_test"], seed=d["seed"], contrast=d["contrast"])
    else:
        ds = data.load_dataset(d["source"], d["format"])
    return data.normalize(ds, d["normalization"])


def obtain_classifier(run, ds, out=None):
    c = run.section("classifier")
    if c["checkpoint"]:
        return checkpoint.load_classifier(c["checkpoint"])
    f = train.train_classifier(
        ds.train_images,
        ds.train_labels,
        run.specs["classifier"],
        lr=c["lr"],
        epochs=c["epochs"],
        batch_size=c["batch_size"],
        seed=c["seed"],
        val_images=ds.test_images,
        val_labels=ds.test_labels,
        target_accuracy=c["target_accuracy"],
        check_every=c["check_every"],
        log=_log,
    )
    if out is not None:
        checkpoint.save_classifier(f, os.path.join(out, "classifier.ckpt"))
    return f


def build_pair(run, f, rng):
    """Generator and discriminator for ``run.train``."""
    cfg = run.train
    G = build_generator(run.specs["generator"], rng)
    if cfg.discriminator_init == FROM_CLASSIFIER:
        D = build_discriminator(
            init=FROM_CLASSIFIER, classifier=f, rng=rng, train_trunk=run.section("discriminator")["train_trunk"]
        )
    else:
        D = build_discriminator(run.specs["discriminator"], init="fresh", rng=rng)
    return G, D


def _summary(f, G, ds, lam, epsilon):
    white = f.access_policy == WHITE_BOX
    van_acc, van_map = metrics.vanilla_scores(f, ds.test_images, ds.test_labels)
    ev = metrics.evaluate_perturbation(G, f, ds.test_images, ds.test_labels, lam)
    entry = {"dataset": "synthetic-test", "classifier": f.network.spec.name, "Vanilla": (van_acc, van_map)}
    entry["Proposed" if white else "Proposed-B"] = (ev["top1"], ev["mAP"])
    if white:
        entry["EHA"] = (metrics.fgsm_baseline(f, ds.test_images, ds.test_labels, epsilon), None)
    columns = ("Vanilla", "Proposed", "EHA") if white else ("Vanilla", "Proposed-B")
    return metrics.summary_table([entry], columns), ev


# ---------------------------------------------------------------- commands


def cmd_gen_synthetic_data(args):
    run = _run_config(args, require_mode=False)
    d = run.section("data")
    ds = data.make_synthetic(d["n_train"], d["n_test"], seed=d["seed"], contrast=d["contrast"])
    data.save_dataset(ds, args.out, args.format)
    _write_run_txt(args.out, "gen-synthetic-data", run)
    _log(f"wrote {len(ds.train_labels)} train / {len(ds.test_labels)} test images to {args.out} ({args.format})")
    return 0


def cmd_train_classifier(args):
    run = _run_config(args, require_mode=False)
    _write_run_txt(args.out, "train-classifier", run)
    ds = load_data(run)
    f = obtain_classifier(run, ds, args.out)
    acc, _ = metrics.vanilla_scores(f, ds.test_images, ds.test_labels)
    _log(f"classifier: train top-1 {f.vanilla_accuracy:.4f}, test top-1 {acc:.4f}, checksum {f.checksum()[:16]}")
    return 0


def cmd_train_pgn(args):
    run = _run_config(args, require_mode=True)
    if run.values["train"]["loss_variant"] is None:
        raise config.MissingFieldError("train-pgn needs a loss variant: pass --loss ls|ce or set loss_variant")
    cfg = run.train
    ckpt_path = os.path.join(args.out, "pgn.ckpt")
    ds = load_data(run)
    if args.resume:
        ck = checkpoint.load_checkpoint(ckpt_path)
        if ck.cfg != cfg:
            raise checkpoint.CheckpointError("resume: checkpoint config differs from the requested run")
        G, D, f, state = ck.G, ck.D, ck.f, ck.state()
        _log(f"resuming {ckpt_path} after epoch {ck.epoch}")
    else:
        _write_run_txt(args.out, "train-pgn", run)
        f = obtain_classifier(run, ds, args.out).with_policy(cfg.access_policy)
        G, D = build_pair(run, f, dc.make_rng(cfg.seed + 1))
        state = None
    before = f.checksum()
    t0 = time.time()

    def on_epoch_end(epoch, row, st):
        checkpoint.save_checkpoint(G, D, f, cfg, st.rng, ckpt_path, epoch=epoch, rows=st.rows)
        _log(
            f"epoch {epoch:2d}  L_d {row.L_d:.4f}  L_g {row.L_g:.4f}  L_r {row.L_r:.4f}  "
            f"top1 {row.top1:.4f}  pos {row.pos_transitions}  neg {row.neg_transitions}  ({time.time() - t0:.0f}s)"
        )

    G, D, rows, _ = train.train_pgn(
        ds.train_images,
        ds.train_labels,
        G,
        D,
        f,
        cfg,
        eval_images=ds.test_images,
        eval_labels=ds.test_labels,
        state=state,
        stop_after=args.stop_after,
        on_epoch_end=on_epoch_end,
    )
    if f.checksum() != before:
        raise train.TrainingError("classifier parameters changed during PGN training")
    metrics.export_curves(rows, os.path.join(args.out, "curves.csv"))
    table, _ = _summary(f, G, ds, cfg.lam, run.section("eval")["fgsm_epsilon"])
    with open(os.path.join(args.out, "summary.txt"), "w") as fh:
        fh.write(table)
    print(table, end="")
    return 0


def cmd_evaluate(args):
    ck = checkpoint.load_checkpoint(args.checkpoint or os.path.join(args.out, "pgn.ckpt"))
    run = _run_config(args, require_mode=False)
    ds = load_data(run)
    table, ev = _summary(ck.f, ck.G, ds, ck.cfg.lam, run.section("eval")["fgsm_epsilon"])
    with open(os.path.join(args.out, "summary.txt"), "w") as fh:
        fh.write(table)
    print(table, end="")
    _log(f"transitions: {ev['pos']} false->correct, {ev['neg']} correct->false; mean L1 {ev['mean_l1']:.4f}")
    return 0


def cmd_verify_theory(args):
    seed = args.seed if args.seed is not None else 0
    results = theory.verify_theory(seed=seed, include_training=not args.quick)
    report = theory.format_report(results)
    with open(os.path.join(args.out, "theory.txt"), "w") as fh:
        fh.write(report)
    print(report, end="")
    return 0 if all(r.passed for r in results) else 1


def cmd_export_curves(args):
    ck = checkpoint.load_checkpoint(args.checkpoint or os.path.join(args.out, "pgn.ckpt"))
    path = args.csv or os.path.join(args.out, "curves.csv")
    metrics.export_curves(ck.rows, path)
    _log(f"wrote {len(ck.rows)} rows to {path}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser():
    parser = argparse.ArgumentParser(prog="pgn", description="Perturbation generative networks at desk scale.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("--out", default="pgn-out", help="output directory (default: pgn-out)")
        p.add_argument("--seed", type=int, help="training seed")
        p.set_defaults(func=fn)
        return p

    add("gen-synthetic-data", cmd_gen_synthetic_data, "write the synthetic dataset to disk").add_argument(
        "--format", choices=data.FORMATS, default="idx_binary"
    )
    add("train-classifier", cmd_train_classifier, "train and save the target classifier")

    p = add("train-pgn", cmd_train_pgn, "train a perturbation generator against a frozen classifier")
    p.add_argument("--mode", choices=train.MODES)
    p.add_argument("--loss", choices=("ls", "ce"))
    p.add_argument("--gamma", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--black-box", action="store_true", help="label-only classifier access")
    p.add_argument("--resume", action="store_true", help="continue from OUT/pgn.ckpt")
    p.add_argument("--stop-after", type=int, metavar="EPOCH", help="stop after this epoch")

    p = add("evaluate", cmd_evaluate, "score a trained generator on the test split")
    p.add_argument("--checkpoint", help="PGN checkpoint (default: OUT/pgn.ckpt)")

    p = add("verify-theory", cmd_verify_theory, "numerical checks of the optimality and convergence results")
    p.add_argument("--quick", action="store_true", help="skip the discriminator training checks")

    p = add("export-curves", cmd_export_curves, "write per-epoch metrics from a checkpoint as CSV")
    p.add_argument("--checkpoint", help="PGN checkpoint (default: OUT/pgn.ckpt)")
    p.add_argument("--csv", help="output CSV path (default: OUT/curves.csv)")
    return parser


def _origin(exc):
    """Dotted name of the pgn module an exception came from."""
    mod = type(exc).__module__
    if mod.startswith("pgn."):
        return mod
    for frame in reversed(traceback.extract_tb(exc.__traceback__)):
        parts = os.path.normpath(frame.filename).split(os.sep)
        if "pgn" in parts:
            tail = parts[len(parts) - 1 - parts[::-1].index("pgn") :]
            return ".".join(tail)[: -len(".py")]
    return "pgn"


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        os.makedirs(args.out, exist_ok=True)
        return args.func(args)
    except KeyboardInterrupt:
        print("pgn: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # every failure becomes one parsable line
        msg = " ".join(str(exc).split())
        print(f"error: {_origin(exc)}: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
