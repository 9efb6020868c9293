"""Command-line entry point: ``longiseg {generate,train,evaluate,segment,plot}``.

Every command writes into a fresh ``--out`` directory holding exactly one
``manifest.json``. Config files are YAML; command-line flags override them.

Exit codes: 0 success, 1 runtime failure, 2 config or validation failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import shutil
import subprocess
import sys
from pathlib import Path

import yaml

from . import __version__

log = logging.getLogger("longiseg")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
MANIFEST_NAME = "manifest.json"


class ConfigError(Exception):
    """Bad configuration or arguments; maps to exit code 2."""


# --------------------------------------------------------------------------- plumbing


def code_version() -> dict:
    version = {"package": __version__}
    try:
        rev = subprocess.run(["git", "rev-parse", "HEAD"], cwd=Path(__file__).parent, capture_output=True,
                             text=True, timeout=5)
        if rev.returncode == 0:
            version["git"] = rev.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return version


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def load_yaml(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a mapping at the top level")
    return data


def prepare_run_dir(out, force: bool) -> Path:
    """Create ``out``; an existing non-empty directory needs --force and must be a previous run."""
    if out is None:
        raise ConfigError("--out is required")
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"{out} already exists and is not empty; pass --force to overwrite")
        if not (out / MANIFEST_NAME).exists():
            raise ConfigError(f"{out} has no {MANIFEST_NAME}; refusing to delete a directory this tool did not write")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, command: str, config: dict, seed, outputs: list, started: str) -> Path:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "seed": seed,
        "code_version": code_version(),
        "started": started,
        "finished": _now(),
        "outputs": sorted(str(Path(p).relative_to(out)) for p in outputs),
    }
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(run_dir) -> dict:
    path = Path(run_dir) / MANIFEST_NAME
    if not path.exists():
        raise ConfigError(f"{run_dir} has no {MANIFEST_NAME}")
    return json.loads(path.read_text())


def resolve_dataset_root(path) -> Path:
    """Accept a dataset root or a generate run directory containing ``data/``."""
    if path is None:
        raise ConfigError("no dataset given (--data or 'data' in the config)")
    path = Path(path)
    if (path / "data" / "dataset.json").exists():
        return path / "data"
    if (path / "dataset.json").exists():
        return path
    raise FileNotFoundError(f"no dataset found at {path}")


def parse_config(fn, *args):
    """Run a config constructor, turning validation errors into ConfigError."""
    from .synthgen import SynthConfigError

    try:
        return fn(*args)
    except SynthConfigError as exc:
        raise ConfigError(f"field '{exc.field}': {exc}") from exc
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def _apply_device(device):
    if device:
        os.environ["LONGISEG_DEVICE"] = device


def _files_under(root: Path) -> list[Path]:
    return [p for p in root.rglob("*") if p.is_file() and p.name != MANIFEST_NAME]


# --------------------------------------------------------------------------- generate


def cmd_generate(args) -> int:
    from .dataio import write_dataset
    from .synthgen import SynthConfig, generate_dataset

    raw = load_yaml(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.n_subjects is not None:
        raw["n_subjects"] = args.n_subjects
    cfg = parse_config(SynthConfig.from_dict, raw)
    started = _now()
    out = prepare_run_dir(args.out, args.force)
    samples, split = generate_dataset(cfg)
    write_dataset(out / "data", samples, split, extra={"generator": cfg.to_dict()})
    write_manifest(out, "generate", cfg.to_dict(), cfg.seed, _files_under(out), started)
    print(f"wrote {len(samples)} subjects to {out / 'data'} "
          f"(train {len(split['train'])}, val {len(split['val'])}, test {len(split['test'])})")
    return EXIT_OK


# --------------------------------------------------------------------------- train


def train_config_from(raw: dict, args):
    from .trainer import TrainConfig

    raw = dict(raw)
    data = raw.pop("data", None)
    if getattr(args, "data", None):
        data = args.data
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.variant is not None:
        raw["variant"] = args.variant
    for key in ("epochs", "steps_per_epoch", "batch_size", "learning_rate"):
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
    return TrainConfig.from_dict(raw), data


def cmd_train(args) -> int:
    from .dataio import load_dataset
    from .trainer import train

    cfg, data = parse_config(train_config_from, load_yaml(args.config), args)
    _apply_device(args.device)
    root = resolve_dataset_root(data)
    if args.resume is not None and not Path(args.resume).exists():
        raise FileNotFoundError(f"checkpoint to resume from not found: {args.resume}")
    started = _now()
    if args.resume is not None:
        # a resumed run continues in its own directory
        out = Path(args.out)
        if out.exists() and not (out / MANIFEST_NAME).exists() and any(out.iterdir()):
            raise ConfigError(f"{out} is not a run directory")
        out.mkdir(parents=True, exist_ok=True)
    else:
        out = prepare_run_dir(args.out, args.force)
    dataset = load_dataset(root, splits=("train", "val"))
    result = train(dataset, cfg, out_dir=out, resume=args.resume)
    config = {**cfg.to_dict(), "data": str(root)}
    if args.resume is not None:
        config["resumed_from"] = str(args.resume)
    write_manifest(out, "train", config, cfg.seed, _files_under(out), started)
    print(f"{cfg.variant.display_name}: {len(result.history.steps)} steps, best val overall {result.best_score:.4f}")
    return EXIT_OK


# --------------------------------------------------------------------------- evaluate


def _checkpoint_label(path: Path, taken: set) -> str:
    base = path.parent.parent.name if path.parent.name == "checkpoints" else path.stem
    label, k = base, 2
    while label in taken:
        label, k = f"{base}-{k}", k + 1
    taken.add(label)
    return label


def comparison_table(rows: list[dict]) -> str:
    """Fixed-width text table, best Overall Score first."""
    from .metrics import REPORT_HEADER

    cols = ("DSC", "PPV", "LTPR", "LFPR", "VD", "Overall")
    keys = ("dsc", "ppv", "ltpr", "lfpr", "vd", "overall")
    ordered = sorted(rows, key=lambda r: -r["scores"]["overall"])
    name_w = max([len("method")] + [len(r["method"]) for r in ordered])
    label_w = max([len("run")] + [len(r["label"]) for r in ordered])
    lines = [REPORT_HEADER,
             f"{'method':<{name_w}}  {'run':<{label_w}}  " + "  ".join(f"{c:>7}" for c in cols)]
    for r in ordered:
        vals = "  ".join(f"{r['scores'][k]:>7.4f}" for k in keys)
        lines.append(f"{r['method']:<{name_w}}  {r['label']:<{label_w}}  {vals}")
    return "\n".join(lines) + "\n"


def cmd_evaluate(args) -> int:
    from . import metrics as M
    from .dataio import load_dataset
    from .infer import segment_subject
    from .nets import ModelVariant, load_checkpoint

    raw = load_yaml(args.config)
    checkpoints = args.checkpoint or raw.get("checkpoints") or []
    if isinstance(checkpoints, str):
        checkpoints = [checkpoints]
    if not checkpoints:
        raise ConfigError("no checkpoint given (--checkpoint)")
    split = args.split or raw.get("split", "test")
    tau = args.tau if args.tau is not None else float(raw.get("tau", 0.5))
    if not 0 < tau < 1:
        raise ConfigError(f"tau must lie in (0, 1), got {tau}")
    expected = args.variant or raw.get("variant")
    if expected is not None:
        try:
            expected = ModelVariant(expected)
        except ValueError as exc:
            raise ConfigError(f"variant: {exc}") from exc
    _apply_device(args.device)
    root = resolve_dataset_root(args.data or raw.get("data"))
    for ckpt in checkpoints:
        if not Path(ckpt).exists():
            raise FileNotFoundError(f"checkpoint not found: {ckpt}")

    started = _now()
    out = prepare_run_dir(args.out, args.force)
    dataset = load_dataset(root, splits=(split,))
    samples = dataset.subset(split)
    if not samples:
        raise ConfigError(f"split {split!r} is empty")

    rows, taken = [], set()
    for ckpt in map(Path, checkpoints):
        model, payload = load_checkpoint(ckpt)
        if expected is not None and model.variant is not expected:
            raise ConfigError(f"variant mismatch: config expects {expected.value}, "
                              f"checkpoint {ckpt} holds {model.variant.value}")
        model.to(os.environ.get("LONGISEG_DEVICE", "cpu"))
        label = _checkpoint_label(ckpt, taken)
        report_dir = out / "reports" / label
        report_dir.mkdir(parents=True)
        per_subject = {}
        for sample in samples:
            seg = segment_subject(model, sample, tau)
            per_subject[sample.subject_id] = M.evaluate(seg.mask, sample.gt_mask_ti)
            (report_dir / f"{sample.subject_id}.json").write_text(
                M.report_json(per_subject[sample.subject_id]) + "\n")
        (report_dir / "aggregate.csv").write_text(M.aggregate_csv(per_subject))
        mean = M.mean_report(list(per_subject.values()))
        rows.append({"label": label, "method": model.variant.display_name, "variant": model.variant.value,
                     "checkpoint": str(ckpt), "scores": mean.scores()})

    rows.sort(key=lambda r: -r["scores"]["overall"])
    (out / "comparison.json").write_text(json.dumps(rows, indent=2) + "\n")
    table = comparison_table(rows)
    (out / "comparison.txt").write_text(table)
    print(table, end="")
    config = {"checkpoints": [str(c) for c in checkpoints], "data": str(root), "split": split, "tau": tau,
              "variant": expected.value if expected else None}
    write_manifest(out, "evaluate", config, None, _files_under(out), started)
    return EXIT_OK


# --------------------------------------------------------------------------- segment


def cmd_segment(args) -> int:
    from .dataio import load_dataset
    from .infer import segment_subject
    from .nets import load_checkpoint
    from .volumes import save_array, save_volume

    raw = load_yaml(args.config)
    ckpt = args.checkpoint or raw.get("checkpoint")
    if ckpt is None:
        raise ConfigError("no checkpoint given (--checkpoint)")
    tau = args.tau if args.tau is not None else float(raw.get("tau", 0.5))
    if not 0 < tau < 1:
        raise ConfigError(f"tau must lie in (0, 1), got {tau}")
    split = args.split or raw.get("split", "test")
    _apply_device(args.device)
    root = resolve_dataset_root(args.data or raw.get("data"))
    if not Path(ckpt).exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")

    started = _now()
    out = prepare_run_dir(args.out, args.force)
    dataset = load_dataset(root, splits=("train", "val", "test"))
    wanted = args.subject or raw.get("subjects") or dataset.split.get(split, [])
    missing = [s for s in wanted if s not in dataset.samples]
    if missing:
        raise ConfigError(f"unknown subjects: {missing}")
    model, _ = load_checkpoint(ckpt)
    model.to(os.environ.get("LONGISEG_DEVICE", "cpu"))
    for sid in wanted:
        seg = segment_subject(model, dataset.samples[sid], tau)
        save_volume(out / sid / "mask.nii.gz", seg.mask)
        save_array(out / sid / "prob.nii.gz", seg.prob.data.astype("float32"))
        (out / sid / "timing.json").write_text(json.dumps(seg.timing, indent=2, sort_keys=True) + "\n")
        log.info("%s: %d lesion voxels in %.1fs", sid, int(seg.mask.data.sum()), seg.timing["seconds_total"])
    config = {"checkpoint": str(ckpt), "data": str(root), "subjects": list(wanted), "tau": tau,
              "variant": model.variant.value}
    write_manifest(out, "segment", config, None, _files_under(out), started)
    print(f"segmented {len(wanted)} subjects into {out}")
    return EXIT_OK


# --------------------------------------------------------------------------- plot


def cmd_plot(args) -> int:
    import matplotlib.pyplot as plt
    import numpy as np

    from . import plots
    from .dataio import read_sample
    from .trainer import read_history
    from .volumes import load_volume

    runs = [Path(r) for r in args.runs]
    manifests = {r: read_manifest(r) for r in runs}
    started = _now()
    out = prepare_run_dir(args.out, args.force)
    written = []
    for run, manifest in manifests.items():
        command = manifest["command"]
        if command == "train":
            history_path = run / "history.csv"
            rows = read_history(history_path) if history_path.exists() else []
            if not rows:
                raise RuntimeError(f"{run} has an empty training history")
            path = out / f"loss_curve_{run.name}.png"
            plt.close(plots.loss_curve(rows, path, title=f"{manifest['config']['variant']} ({run.name})"))
            written.append(path)
        elif command == "evaluate":
            rows = json.loads((run / "comparison.json").read_text())
            results = {f"{r['method']}\n{r['label']}": r["scores"] for r in rows}
            path = out / f"metrics_bar_{run.name}.png"
            plt.close(plots.metrics_bar(results, path))
            written.append(path)
        elif command == "segment":
            data = manifest["config"]["data"]
            for sid in manifest["config"]["subjects"]:
                sample = read_sample(data, sid)
                gt = sample.gt_mask_ti.data
                pred = load_volume(run / sid / "mask.nii.gz", is_mask=True).data
                k = plots.most_lesioned_axial(gt)
                flair = sample.scan("ti", "FLAIR").data[k]
                path = out / f"overlay_{run.name}_{sid}.png"
                plt.close(plots.overlay_figure(flair, gt[k], pred[k], path, title=f"{sid} axial {k}"))
                np.savez_compressed(out / f"overlay_{run.name}_{sid}.npz", gt_contour=plots.contour(gt[k]),
                                    pred_contour=plots.contour(pred[k]), slice_index=k)
                written += [path, out / f"overlay_{run.name}_{sid}.npz"]
        else:
            raise ConfigError(f"{run}: nothing to plot for a {command!r} run")
    write_manifest(out, "plot", {"runs": [str(r) for r in runs]}, None, written, started)
    print(f"wrote {len(written)} files to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser, seed: bool = True):
    p.add_argument("--config", help="YAML config file; flags override its values")
    p.add_argument("--out", required=True, help="output run directory")
    if seed:
        p.add_argument("--seed", type=int)
    p.add_argument("--device", help="torch device (also read from LONGISEG_DEVICE)")
    p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="longiseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"longiseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic longitudinal dataset")
    _common(p)
    p.add_argument("--n-subjects", dest="n_subjects", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model variant")
    _common(p)
    p.add_argument("--data", help="dataset root or generate run directory")
    p.add_argument("--variant", choices=["static", "longitudinal", "multitask", "siamese"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float)
    p.add_argument("--resume", help="checkpoint to continue from (written into --out)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score checkpoints on a split and compare them")
    _common(p, seed=False)
    p.add_argument("--checkpoint", action="append", help="repeat to compare several runs")
    p.add_argument("--data")
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--tau", type=float)
    p.add_argument("--variant", help="fail unless every checkpoint holds this variant")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("segment", help="write masks and fused probabilities")
    _common(p, seed=False)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--subject", action="append")
    p.add_argument("--tau", type=float)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("plot", help="loss curves, metric bars and overlays from run directories")
    p.add_argument("runs", nargs="+", help="train, evaluate or segment run directories")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_plot, config=None, device=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
