"""Command-line entry point: ``gliomaseg <subcommand> [options]``.

Subcommands: ``phantom``, ``sr-train``, ``superres``, ``train``, ``infer``,
``eval`` and ``report``. Every subcommand accepts ``--config`` (YAML run
config), ``--seed``, ``--set key=value`` overrides, ``--workers`` and
``--deterministic``. The config is fully validated before anything is written.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 non-finite loss.
Each run writes ``run.json`` into its output directory with the config hash,
seed and package versions.
"""

from __future__ import annotations

import functools
import json
import logging
import platform
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import click
import nibabel
import numpy as np
import scipy
import torch
from PIL import Image

from . import __version__
from .checkpoint import CheckpointError, from_model, load_checkpoint, save_checkpoint, to_model
from .config import ConfigError, RunConfig, config_hash, load_config, to_dict
from .dataset import DataError, list_cases, read_case, write_case, write_manifest
from .infer import predict_case, predict_super_resolved
from .metrics import aggregate_report, evaluate_case, format_table, read_metrics_csv, write_metrics_csv, write_table_csv
from .phantom import PhantomFitError, degrade_case, generate_case, sr_training_pairs
from .srnet import build_sr, sr_enhance_case, sr_train
from .train import STRATEGIES, NonFiniteLossError, StrategySpec, run_strategy, set_deterministic
from .volume import Case, LabelMap, VolumeIOError, load_labels, save_labels

log = logging.getLogger("gliomaseg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# label value -> RGB; NETC red, SNFH green, ET blue
OVERLAY_COLORS = {1: (255, 0, 0), 2: (0, 255, 0), 3: (0, 0, 255)}
OVERLAY_VIEWS = ("sagittal", "coronal", "axial")


def versions() -> dict[str, str]:
    return {"gliomaseg": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "torch": torch.__version__, "nibabel": nibabel.__version__}


def write_run_manifest(out: Path, command: str, config: RunConfig, **extra) -> Path:
    doc = {"command": command, "seed": config.seed, "config_hash": config_hash(config),
           "versions": versions(), "config": to_dict(config), **extra}
    path = out / "run.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def check_out(out, force: bool) -> Path:
    """Validate the output directory without touching the filesystem."""
    if out is None:
        raise click.UsageError("--out is required")
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise click.UsageError(f"{out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not force:
        raise click.UsageError(f"output directory {out} is not empty (use --force to overwrite)")
    return out


def prepare_out(out, force: bool) -> Path:
    """Create ``out``; an existing non-empty directory is an error unless ``force`` clears it."""
    out = check_out(out, force)
    if out.is_dir() and any(out.iterdir()):
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def parallel_map(fn, items, workers: int) -> list:
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def common_options(fn):
    """Attach the shared flags and turn them into a validated :class:`RunConfig`."""
    @click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                  help="YAML run configuration.")
    @click.option("--seed", type=int, default=None, help="Override the config seed.")
    @click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                  help="Override one config key, e.g. --set strategy.target_steps=10.")
    @click.option("--workers", type=click.IntRange(min=1), default=1, show_default=True,
                  help="Worker threads for per-case work.")
    @click.option("--deterministic", is_flag=True, help="Single-threaded deterministic kernels.")
    @functools.wraps(fn)
    def wrapper(config_path, seed, overrides, workers, deterministic, **kwargs):
        config = load_config(config_path, overrides, seed=seed)
        if deterministic:
            set_deterministic()
        return fn(config=config, workers=workers, deterministic=deterministic, **kwargs)
    return wrapper


def out_options(fn):
    fn = click.option("--force", is_flag=True, help="Replace a non-empty output directory.")(fn)
    return click.option("--out", "out", type=click.Path(file_okay=False), default=None,
                        help="Output directory (defaults to output_dir from the config).")(fn)


def _resolve_out(out, config: RunConfig, force: bool, create: bool = True) -> Path:
    out = out if out is not None else config.output_dir
    return prepare_out(out, force) if create else check_out(out, force)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
@click.version_option(__version__)
def cli(verbose):
    """Glioma region segmentation on multi-modal MRI volumes."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")


@cli.command()
@common_options
@out_options
@click.option("--count", type=click.IntRange(min=0), default=4, show_default=True)
@click.option("--domain", type=click.Choice(["high", "low"]), default="high", show_default=True,
              help="'low' passes each phantom through the low_quality degradation profile.")
@click.option("--start", type=click.IntRange(min=0), default=0, help="Index of the first case.")
@click.option("--prefix", default="case", show_default=True)
def phantom(config, workers, deterministic, out, force, count, domain, start, prefix):
    """Generate synthetic phantom cases as NIfTI files."""
    _resolve_out(out, config, force, create=False)
    spec = replace(config.phantom, seed=config.seed)

    def make(i):
        image, labels = generate_case(spec, i)
        case = Case(f"{prefix}_{i:04d}", image, labels, {"index": i})
        if domain == "low":
            case = degrade_case(case, config.low_quality, seed=spec.seed + i)  # same as low_quality_cases
        return case

    # generate everything first so phantom settings that cannot be rendered leave no partial output
    cases = parallel_map(make, range(start, start + count), workers)
    out = _resolve_out(out, config, force)
    entries = [write_case(out, c) for c in cases]
    write_manifest(out, entries, {"domain": domain})
    write_run_manifest(out, "phantom", config, count=count, domain=domain)
    click.echo(f"wrote {count} cases to {out}")


@cli.command("sr-train")
@common_options
@out_options
def sr_train_cmd(config, workers, deterministic, out, force):
    """Train the super-resolution network on synthetic LR/HR pairs."""
    _resolve_out(out, config, force, create=False)
    section = config.sr_train
    pairs = sr_training_pairs(replace(config.phantom, seed=config.seed), section.cases, section.profile)
    model = build_sr(config.srnet, init_seed=config.seed)
    model, rows = sr_train(model, pairs, config.sr_optimizer, epochs=section.epochs,
                           batch_size=section.batch_size, seed=config.seed)
    out = _resolve_out(out, config, force)
    save_checkpoint(out / "sr.ckpt", from_model(model, None, {"pairs": len(pairs)}, rows))
    with (out / "sr_log.csv").open("w") as fh:
        fh.write("step,lr,loss\n")
        for r in rows:
            fh.write(f"{r['step']},{r['lr']!r},{r['loss']!r}\n")
    write_run_manifest(out, "sr-train", config, pairs=len(pairs), steps=len(rows))
    click.echo(f"trained SR model on {len(pairs)} pairs, {len(rows)} steps -> {out / 'sr.ckpt'}")


def _read_cases(root, workers: int = 1) -> list[Case]:
    entries = list_cases(root)
    return parallel_map(lambda e: read_case(root, e[0], e[1]), entries, workers)


def _load_sr(path):
    if not path:
        raise click.UsageError("a super-resolution checkpoint is required (--sr-checkpoint)")
    if not Path(path).is_file():
        raise DataError(f"SR checkpoint {path} not found")
    ckpt = load_checkpoint(path)
    if ckpt.kind != "sr":
        raise DataError(f"{path} is a {ckpt.kind!r} checkpoint, expected 'sr'")
    return to_model(ckpt)


@cli.command()
@common_options
@out_options
@click.option("--in", "in_dir", type=click.Path(), required=True, help="Dataset to enhance.")
@click.option("--sr-checkpoint", "sr_checkpoint", type=click.Path(), default=None)
def superres(config, workers, deterministic, out, force, in_dir, sr_checkpoint):
    """Super-resolve every case of a dataset by 2x."""
    model = _load_sr(sr_checkpoint or config.strategy.sr_checkpoint)
    cases = _read_cases(in_dir, workers)
    out = _resolve_out(out, config, force)
    entries = []
    for case in cases:
        enhanced = sr_enhance_case(model, case)
        entry = write_case(out, enhanced)
        entry["source_shape"] = list(case.geometry.shape)
        entry["source_spacing"] = list(case.geometry.spacing)
        entries.append(entry)
    write_manifest(out, entries, {"super_resolved": True, "scale_factor": 2})
    write_run_manifest(out, "superres", config, source=str(in_dir), cases=len(cases))
    click.echo(f"super-resolved {len(cases)} cases to {out}")


@cli.command()
@common_options
@out_options
@click.option("--strategy", type=click.Choice(STRATEGIES), default=None)
@click.option("--target", "target_dir", type=click.Path(), default=None)
@click.option("--pretrain", "pretrain_dir", type=click.Path(), default=None)
@click.option("--sr-checkpoint", "sr_checkpoint", type=click.Path(), default=None)
@click.option("--steps", type=click.IntRange(min=0), default=None, help="Target-domain steps.")
@click.option("--pretrain-steps", type=click.IntRange(min=0), default=None)
def train(config, workers, deterministic, out, force, strategy, target_dir, pretrain_dir, sr_checkpoint,
          steps, pretrain_steps):
    """Train the baseline and expanded networks under one data-utilization strategy."""
    s = config.strategy
    s = replace(s, kind=strategy or s.kind, target_dir=target_dir or s.target_dir,
                pretrain_dir=pretrain_dir or s.pretrain_dir, sr_checkpoint=sr_checkpoint or s.sr_checkpoint,
                target_steps=s.target_steps if steps is None else steps,
                pretrain_steps=s.pretrain_steps if pretrain_steps is None else pretrain_steps)
    if s.kind not in STRATEGIES:
        raise ConfigError(f"strategy.kind must be one of {STRATEGIES}, got {s.kind!r}")
    if not s.target_dir:
        raise click.UsageError("a target dataset is required (--target)")
    if s.kind == "S_GLI_to_SSA" and not s.pretrain_dir:
        raise click.UsageError("S_GLI_to_SSA needs a pretraining dataset (--pretrain)")
    sr_models = {}
    if s.kind == "S_srSSA":
        sr_models["sr"] = _load_sr(s.sr_checkpoint)

    datasets = {"target": _read_cases(s.target_dir, workers)}
    if s.kind == "S_GLI_to_SSA":
        datasets["pretrain"] = _read_cases(s.pretrain_dir, workers)
    for name, cases in datasets.items():
        if not cases:
            raise DataError(f"{name} dataset is empty")
        if any(c.labels is None for c in cases):
            raise DataError(f"{name} dataset has cases without seg.nii.gz")
    _resolve_out(out, config, force, create=False)

    spec = StrategySpec(kind=s.kind, target="target", pretrain="pretrain" if s.kind == "S_GLI_to_SSA" else None,
                        sr_model="sr" if s.kind == "S_srSSA" else None, pretrain_steps=s.pretrain_steps,
                        target_steps=s.target_steps, pretrain_optimizer=config.optimizer,
                        target_optimizer=config.finetune_optimizer if s.kind == "S_GLI_to_SSA" else config.optimizer,
                        batch_size=s.batch_size, foreground_bias=s.foreground_bias, seed=config.seed)
    result = run_strategy(spec, datasets, sr_models, {"baseline": config.baseline, "expanded": config.expanded},
                          config.loss, config.augmentation)
    out = _resolve_out(out, config, force)
    files = {}
    for name, ckpt in result.checkpoints.items():
        save_checkpoint(out / f"{name}.ckpt", ckpt)
        files[name] = {"checkpoint": f"{name}.ckpt", "logs": []}
        for phase_log in result.logs[name]:
            fname = f"{name}_{phase_log.phase}.csv"
            phase_log.write_csv(out / fname)
            files[name]["logs"].append(fname)
    phases = [p.phase for p in next(iter(result.logs.values()))]
    write_run_manifest(out, "train", config, strategy=s.kind, phases=phases, models=files,
                       datasets={k: str(v) for k, v in (("target", s.target_dir), ("pretrain", s.pretrain_dir),
                                                         ("sr_checkpoint", s.sr_checkpoint)) if v})
    click.echo(f"{s.kind}: trained {', '.join(result.checkpoints)} ({' -> '.join(phases)}) -> {out}")


@cli.command()
@common_options
@out_options
@click.option("--checkpoint", "checkpoints", type=click.Path(), multiple=True, required=True,
              help="Segmentation checkpoint; repeat to ensemble.")
@click.option("--in", "in_dir", type=click.Path(), required=True)
@click.option("--sr-checkpoint", "sr_checkpoint", type=click.Path(), default=None,
              help="Predict on 2x super-resolved inputs and map labels back.")
def infer(config, workers, deterministic, out, force, checkpoints, in_dir, sr_checkpoint):
    """Predict label maps for every case in a dataset."""
    models = []
    for path in checkpoints:
        if not Path(path).is_file():
            raise DataError(f"checkpoint {path} not found")
        ckpt = load_checkpoint(path)
        if ckpt.kind != "seg":
            raise DataError(f"{path} is a {ckpt.kind!r} checkpoint, expected 'seg'")
        models.append(to_model(ckpt))
    sr_model = _load_sr(sr_checkpoint) if sr_checkpoint else None
    entries = list_cases(in_dir)
    out = _resolve_out(out, config, force)

    def run(entry):
        case = read_case(in_dir, entry[0], entry[1])
        if sr_model is not None:
            pred = predict_super_resolved(models, sr_model, case, config.inference)
        else:
            pred = predict_case(models, case, config.inference)
        save_labels(out / f"{case.case_id}.nii.gz", pred)
        return case.case_id

    done = parallel_map(run, entries, workers)
    (out / "predictions.json").write_text(json.dumps({"cases": done, "checkpoints": list(checkpoints)},
                                                     indent=1) + "\n")
    write_run_manifest(out, "infer", config, source=str(in_dir), ensemble=len(models))
    click.echo(f"predicted {len(done)} cases" if done else "0 cases found; nothing to predict")


def _read_prediction(pred_dir: Path, case_id: str) -> LabelMap:
    path = pred_dir / f"{case_id}.nii.gz"
    if not path.is_file():
        raise DataError(f"no prediction for case {case_id} ({path})")
    return load_labels(path)


@cli.command("eval")
@common_options
@out_options
@click.option("--pred", "pred_dir", type=click.Path(), required=True)
@click.option("--gt", "gt_dir", type=click.Path(), required=True)
@click.option("--name", default="prediction", show_default=True, help="Row label in the summary table.")
def eval_cmd(config, workers, deterministic, out, force, pred_dir, gt_dir, name):
    """Score predictions against ground truth: per-case CSV plus summary table."""
    pred_dir = Path(pred_dir)
    if not pred_dir.is_dir():
        raise DataError(f"prediction directory {pred_dir} does not exist")
    entries = list_cases(gt_dir)
    out = _resolve_out(out, config, force)

    def score(entry):
        case = read_case(gt_dir, entry[0], entry[1])
        if case.labels is None:
            raise DataError(f"{case.case_id}: ground truth has no seg.nii.gz")
        pred = _read_prediction(pred_dir, case.case_id)
        if pred.geometry.shape != case.labels.geometry.shape:
            raise DataError(f"{case.case_id}: prediction shape {pred.geometry.shape} "
                            f"!= ground truth {case.labels.geometry.shape}")
        return evaluate_case(case.case_id, pred, case.labels)

    metrics = parallel_map(score, entries, workers)
    write_metrics_csv(out / "metrics.csv", metrics)
    if metrics:
        reports = {name: aggregate_report(metrics)}
        write_table_csv(out / "summary.csv", reports)
        table = format_table(reports)
        (out / "summary.txt").write_text(table)
        click.echo(table, nl=False)
    else:
        click.echo("0 cases found; wrote an empty metrics table")
    write_run_manifest(out, "eval", config, pred=str(pred_dir), gt=str(gt_dir), cases=len(metrics))


def overlay_slices(flair: np.ndarray, labels: np.ndarray) -> dict[str, Image.Image]:
    """Three orthogonal slices through the tumour centroid (volume centre when empty)."""
    fg = np.argwhere(labels > 0)
    centre = fg.mean(axis=0).round().astype(int) if len(fg) else np.array(labels.shape) // 2
    lo, hi = np.percentile(flair, [1, 99]) if flair.size else (0.0, 1.0)
    gray = np.clip((flair - lo) / max(hi - lo, 1e-8), 0, 1)
    out = {}
    for axis, view in enumerate(OVERLAY_VIEWS):
        g = np.take(gray, centre[axis], axis=axis)
        lab = np.take(labels, centre[axis], axis=axis)
        rgb = np.repeat((g * 255)[..., None], 3, axis=-1)
        for value, color in OVERLAY_COLORS.items():
            m = lab == value
            rgb[m] = 0.4 * rgb[m] + 0.6 * np.array(color, dtype=np.float64)
        # display with the second in-plane axis pointing up
        out[view] = Image.fromarray(np.rot90(rgb.round().astype(np.uint8)))
    return out


@cli.command()
@common_options
@out_options
@click.option("--metrics", "metrics_csv", type=click.Path(dir_okay=False), required=True)
@click.option("--images", "images_dir", type=click.Path(), default=None,
              help="Dataset whose FLAIR channel is the overlay background.")
@click.option("--pred", "pred_dir", type=click.Path(), default=None,
              help="Predicted labels to overlay (defaults to the dataset's own segmentation).")
@click.option("--name", default="prediction", show_default=True)
def report(config, workers, deterministic, out, force, metrics_csv, images_dir, pred_dir, name):
    """Summary table from a metrics CSV, plus three slice overlays per case."""
    if not Path(metrics_csv).is_file():
        raise DataError(f"metrics file {metrics_csv} not found")
    try:
        metrics = read_metrics_csv(metrics_csv)
    except (ValueError, KeyError) as exc:
        raise DataError(str(exc)) from exc
    out = _resolve_out(out, config, force)
    if metrics:
        reports = {name: aggregate_report(metrics)}
        table = format_table(reports)
        (out / "summary.txt").write_text(table)
        write_table_csv(out / "summary.csv", reports)
        click.echo(table, nl=False)
    n_png = 0
    if images_dir is not None:
        wanted = {m.case_id for m in metrics}

        def draw(entry):
            case = read_case(images_dir, entry[0], entry[1])
            if pred_dir is not None:
                labels = _read_prediction(Path(pred_dir), case.case_id).labels
            elif case.labels is not None:
                labels = case.labels.labels
            else:
                raise DataError(f"{case.case_id}: no labels to overlay")
            for view, img in overlay_slices(case.image.data[3], labels).items():
                img.save(out / f"{case.case_id}_{view}.png", optimize=False)
            return len(OVERLAY_VIEWS)

        n_png = sum(parallel_map(draw, [e for e in list_cases(images_dir) if e[0] in wanted], workers))
    write_run_manifest(out, "report", config, metrics=str(metrics_csv), overlays=n_png)
    click.echo(f"{len(metrics)} cases summarized, {n_png} overlays written")


def run(argv=None) -> int:
    """Invoke the CLI and map failures onto exit codes instead of raising."""
    try:
        cli.main(args=argv, prog_name="gliomaseg", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except (click.UsageError, ConfigError, PhantomFitError) as exc:
        click.echo(f"error: {exc.format_message() if isinstance(exc, click.ClickException) else exc}", err=True)
        return EXIT_CONFIG
    except click.Abort:
        return EXIT_CONFIG
    except (DataError, VolumeIOError, CheckpointError, FileNotFoundError) as exc:
        click.echo(f"data error: {exc}", err=True)
        return EXIT_DATA
    except (NonFiniteLossError, FloatingPointError) as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return EXIT_NUMERIC
    return EXIT_OK


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
