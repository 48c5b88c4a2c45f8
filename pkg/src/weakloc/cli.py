"""Command-line entry point: generate-data, train, evaluate, visualize."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import data as D
from . import synthetic
from .config import DEVICE_ENV, PROFILES, ConfigError, parse_assignments, resolve
from .evaluation import evaluate_models
from .networks import ConfigError as NetworkConfigError
from .training import NumericalDivergence, VersionMismatch, load_models, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

log = logging.getLogger("weakloc")

DATA_ERRORS = (
    D.ManifestError,
    D.MissingFile,
    D.DecodeError,
    D.EmptyDataset,
    synthetic.RejectionBudgetExceeded,
    VersionMismatch,
    OSError,
)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _overrides(args, names) -> dict:
    out = parse_assignments(getattr(args, "set", None))
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            out[name] = value
    return out


def _load_split(data_dir: Path, split: str, labels=None, size=None) -> D.DatasetHandle:
    """Synthetic manifest split, or an external folder when ``labels`` is given."""
    if labels is not None:
        resize = (size, size) if size else (256, 256)
        return D.load_external(data_dir, labels, resize_to=resize, split=split)
    return D.load_synthetic(data_dir / "manifest.csv", split)


def _checkpoint(run: Path) -> Path:
    path = run / "best.ckpt"
    if not path.exists():
        raise D.MissingFile(f"no checkpoint at {path}")
    return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate_data(args) -> int:
    cfg = resolve(args.config, _overrides(args, ("n_train", "n_val", "n_test", "image_size", "peak_displacement", "workers")),
                  profile=args.profile)
    seed = args.seed if args.seed is not None else cfg.data_seed
    t0 = time.time()
    manifest = synthetic.generate_dataset(
        cfg.n_train, cfg.n_val, cfg.n_test, seed=seed, out_dir=args.out,
        size=cfg.image_size, peak_displacement=cfg.peak_displacement, workers=cfg.workers,
    )
    counts = manifest.counts()
    print(f"wrote {len(manifest.rows)} images to {args.out} in {time.time() - t0:.1f}s")
    for split in synthetic.SPLITS:
        print(f"  {split:5s}  h {counts.get((split, 'h'), 0):6d}  p {counts.get((split, 'p'), 0):6d}")
    return EXIT_OK


TRAIN_FLAGS = ("max_epochs", "batch_size", "learning_rate", "seed", "model_preset", "device", "gp_partner")


def cmd_train(args) -> int:
    cfg = resolve(args.config, _overrides(args, TRAIN_FLAGS), profile=args.profile)
    run = Path(args.run)
    run.mkdir(parents=True, exist_ok=True)
    cfg.dump(run / "config.txt")
    data_dir = Path(args.data)
    size = cfg.image_size if args.labels else None
    train_set = _load_split(data_dir, "train", args.labels, size)
    val_labels = args.val_labels if args.labels else None
    val_set = None
    if args.labels is None:
        val_set = D.load_synthetic(data_dir / "manifest.csv", "val")
    elif val_labels is not None:
        val_set = _load_split(data_dir, "val", val_labels, size)
    gcfg, dcfg = cfg.model_configs()
    t0 = time.time()
    best, rows = train(
        cfg.train_config(), train_set, val_set, run_dir=run, gcfg=gcfg, dcfg=dcfg,
        resume_from=args.resume,
    )
    print(f"trained {len(rows)} generator steps in {time.time() - t0:.1f}s; "
          f"best epoch {best.best_epoch} (score {best.best_score:.4f}) -> {run / 'best.ckpt'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    run = Path(args.run)
    cfg = resolve(run / "config.txt" if (run / "config.txt").exists() else None, _overrides(args, ("device",)))
    gen, disc = load_models(_checkpoint(run), cfg.device)
    handle = _load_split(Path(args.data), args.split, args.labels, cfg.image_size)
    report = evaluate_models(gen, disc, handle, device=cfg.device, batch_size=cfg.eval_batch_size)
    out = Path(args.out) if args.out else run / f"metrics_{args.split}.json"
    report.save(out)
    print(report.table_row(run.name))
    return EXIT_OK


def _panel(columns, titles, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(columns), figsize=(3 * len(columns), 3.2))
    for ax, img, title in zip(np.atleast_1d(axes), columns, titles):
        if title in ("|GT|", "|d|"):
            im = ax.imshow(img, cmap="viridis", vmin=0.0, vmax=1.0, interpolation="nearest")
            fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        else:
            ax.imshow(img, cmap="gray", vmin=-1.0, vmax=1.0, interpolation="nearest")
        ax.set_title(title)
        ax.axis("off")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_visualize(args) -> int:
    import torch

    run = Path(args.run)
    cfg = resolve(run / "config.txt" if (run / "config.txt").exists() else None, _overrides(args, ("device",)))
    gen, _ = load_models(_checkpoint(run), cfg.device)
    handle = _load_split(Path(args.data), args.split, args.labels, cfg.image_size)
    idx = list(range(len(handle)))
    if args.label != "all":
        idx = handle.indices(args.label)
    idx = idx[: args.limit]
    if not idx:
        raise D.EmptyDataset(f"no {args.label} images in split {args.split}")
    out = Path(args.out) if args.out else run / "panels"
    for i in idx:
        r = torch.from_numpy(handle.image(i))[None, None].to(cfg.device)
        with torch.no_grad():
            a_h = gen.translate(r, "h").cpu()[0, 0].numpy()
        img = handle.image(i)
        columns, titles = [img, a_h], ["Input", "Output a_h"]
        gt = handle.gt(i)
        # magnitudes are clipped to the [0, 1] display range
        if gt is not None:
            columns.append(np.clip(np.abs(gt), 0, 1))
            titles.append("|GT|")
        columns.append(np.clip(np.abs(a_h - img), 0, 1))
        titles.append("|d|")
        _panel(columns, titles, out / f"{handle.samples[i].label}_{Path(handle.samples[i].path).stem}.png")
    print(f"wrote {len(idx)} panels to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="weakloc",
        description="Weakly supervised anomaly localization by healthy/diseased image translation.",
        epilog=f"The compute device can also be set with the {DEVICE_ENV} environment variable.",
    )
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--profile", choices=sorted(PROFILES), help="named default profile, e.g. smoke")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

    g = sub.add_parser("generate-data", help="write the synthetic benchmark")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", dest="n_train", type=int, help="training images per class")
    g.add_argument("--n-val", dest="n_val", type=int, help="validation images per class")
    g.add_argument("--n-test", dest="n_test", type=int, help="test images per class")
    g.add_argument("--seed", type=int)
    g.add_argument("--size", dest="image_size", type=int, help="side length; must divide 256")
    g.add_argument("--peak-displacement", dest="peak_displacement", type=float)
    g.add_argument("--workers", type=int)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train generator and discriminator")
    common(t)
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--labels", help="path,label table; selects an external image folder")
    t.add_argument("--val-labels", dest="val_labels", help="validation table for external data")
    t.add_argument("--run", required=True, help="run directory")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--max-epochs", dest="max_epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", dest="learning_rate", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--model-preset", dest="model_preset", choices=["reference", "tiny"])
    t.add_argument("--gp-partner", dest="gp_partner", choices=["same_class", "translated"])
    t.add_argument("--device")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score the best checkpoint of a run")
    e.add_argument("--run", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--labels")
    e.add_argument("--split", default="test", choices=list(synthetic.SPLITS))
    e.add_argument("--out", help="metrics JSON path (default: <run>/metrics_<split>.json)")
    e.add_argument("--device")
    e.set_defaults(func=cmd_evaluate)

    v = sub.add_parser("visualize", help="write Input | a_h | |GT| | |d| panels")
    v.add_argument("--run", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--labels")
    v.add_argument("--split", default="test", choices=list(synthetic.SPLITS))
    v.add_argument("--label", default="p", choices=["h", "p", "all"])
    v.add_argument("--limit", type=int, default=8)
    v.add_argument("--out")
    v.add_argument("--device")
    v.set_defaults(func=cmd_visualize)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, NetworkConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalDivergence as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
