"""Command-line entry point.

Every run writes a resolved-config snapshot plus the content hashes of any
input checkpoints next to its outputs, so artifacts are reproducible from
their directory alone. Config values come from defaults, then an optional
JSON config file, then explicit flags (later wins).
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np
import torch

from .errors import MinbitsError

DATASET_CHOICES = [
    "mnist", "fashion_mnist", "cifar10", "svhn",
    "synth_digits", "synth_garments", "synth_textures", "synth_colordigits",
    "side_by_side", "uniform_noise", "interpolated", "stripes",
]


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, resolved: dict, inputs: dict[str, str] | None = None):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(json.dumps(resolved, indent=2, default=str))
    if inputs:
        provenance = {
            name: {"path": str(p), "sha256": _sha256_file(Path(p))} for name, p in inputs.items()
        }
        (out_dir / "provenance.json").write_text(json.dumps(provenance, indent=2))


def _merged(defaults: dict, config_file: str | None, overrides: dict) -> dict:
    merged = dict(defaults)
    if config_file:
        merged.update(json.loads(Path(config_file).read_text()))
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def _fail(exc: Exception):
    summary = {"error": {"type": type(exc).__name__, "message": str(exc)}}
    click.echo(json.dumps(summary), err=True)
    sys.exit(1)


@click.group()
def main():
    """Input-simplification toolkit."""


@main.command("train-scorer")
@click.option("--config", "config_file", type=click.Path(exists=True), default=None,
              help="JSON config; flags override it.")
@click.option("--datasets", default="synth_digits,synth_garments,synth_textures,synth_colordigits",
              help="Comma-separated training corpus datasets.")
@click.option("--epochs", type=int, default=None)
@click.option("--width", type=int, default=None, help="Coupling-net width.")
@click.option("--levels", type=int, default=None)
@click.option("--blocks", type=int, default=None, help="Blocks per level.")
@click.option("--batch-size", type=int, default=None)
@click.option("--max-images", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--cache-dir", default=None, envvar="MINBITS_CACHE_DIR")
@click.option("--out", required=True, type=click.Path())
def train_scorer_cmd(config_file, datasets, epochs, width, levels, blocks, batch_size,
                     max_images, seed, cache_dir, out):
    """Fit the density scorer on a union image corpus."""
    from .datasets import load_dataset, scorer_corpus
    from .flow import FlowConfig, ScorerTrainConfig, train_scorer

    try:
        cfg = _merged(
            {"datasets": datasets, "epochs": 10, "width": 128, "levels": 2, "blocks": 8,
             "batch_size": 64, "max_images": None, "seed": 0},
            config_file,
            {"datasets": datasets, "epochs": epochs, "width": width, "levels": levels,
             "blocks": blocks, "batch_size": batch_size, "max_images": max_images, "seed": seed},
        )
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        names = [n.strip() for n in str(cfg["datasets"]).split(",") if n.strip()]
        corpus = scorer_corpus(
            [load_dataset(n, "train", cache_dir, seed=cfg["seed"]) for n in names]
        )
        flow_config = FlowConfig(input_shape=(3, 32, 32), num_levels=cfg["levels"],
                                 blocks_per_level=cfg["blocks"], width=cfg["width"])
        train_config = ScorerTrainConfig(
            epochs=cfg["epochs"], batch_size=cfg["batch_size"], seed=cfg["seed"],
            max_images=cfg["max_images"], checkpoint_path=str(out_dir / "scorer.pt"),
        )
        _write_manifest(out_dir, cfg)
        _, report = train_scorer(corpus, flow_config, train_config)
        (out_dir / "train_report.json").write_text(
            json.dumps({"epoch_nll": report.epoch_nll, "monotone": report.monotone_within()})
        )
        click.echo(f"scorer written to {out_dir / 'scorer.pt'}")
    except MinbitsError as exc:
        _fail(exc)


@main.command("score")
@click.option("--scorer", "scorer_path", required=True, type=click.Path(exists=True))
@click.option("--images", "images_dir", required=True, type=click.Path(exists=True),
              help="Directory of PNG images to score.")
@click.option("--out", default="-", help="CSV output path, '-' for stdout.")
def score_cmd(scorer_path, images_dir, out):
    """Score images: CSV rows of (path, bits per dimension)."""
    import csv as csv_mod

    from PIL import Image

    from .flow import bpd, load_scorer

    try:
        scorer = load_scorer(scorer_path)
        paths = sorted(Path(images_dir).glob("*.png"))
        if not paths:
            raise MinbitsError(f"no PNG files under {images_dir}")
        rows = []
        for p in paths:
            arr = np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0
            x = torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)
            rows.append((str(p), bpd(scorer, x, dequantize=True, seed=0).mean_bpd))
        handle = sys.stdout if out == "-" else open(out, "w", newline="")
        writer = csv_mod.writer(handle)
        writer.writerow(["path", "bpd"])
        writer.writerows(rows)
        if out != "-":
            handle.close()
            click.echo(f"wrote {len(rows)} rows to {out}")
    except MinbitsError as exc:
        _fail(exc)


def _load_split(name, split, cache_dir, seed, family, size):
    from .datasets import get_dataset

    return get_dataset(name, split, cache_dir, seed=seed, family=family, size=size)


@main.command("simplify-train")
@click.option("--config", "config_file", type=click.Path(exists=True), default=None)
@click.option("--dataset", type=click.Choice(DATASET_CHOICES), required=True)
@click.option("--family", type=click.Choice(["synth", "real"]), default="synth")
@click.option("--lambda-sim", type=float, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--ngf", type=int, default=None)
@click.option("--max-train-images", type=int, default=None)
@click.option("--dataset-size", type=int, default=None, help="Stand-in dataset size cap.")
@click.option("--seed", type=int, default=None)
@click.option("--scorer", "scorer_path", type=click.Path(exists=True), default=None)
@click.option("--cache-dir", default=None, envvar="MINBITS_CACHE_DIR")
@click.option("--out", required=True, type=click.Path())
def simplify_train_cmd(config_file, dataset, family, lambda_sim, epochs, ngf,
                       max_train_images, dataset_size, seed, scorer_path, cache_dir, out):
    """Joint simplifier/classifier training on one dataset."""
    from .flow import load_scorer
    from .joint import JointConfig, run_joint_training

    try:
        cfg = _merged(
            {"lambda_sim": 0.0, "epochs": 10, "ngf": 64, "seed": 0,
             "max_train_images": None, "dataset_size": None},
            config_file,
            {"lambda_sim": lambda_sim, "epochs": epochs, "ngf": ngf, "seed": seed,
             "max_train_images": max_train_images, "dataset_size": dataset_size},
        )
        out_dir = Path(out)
        scorer = load_scorer(scorer_path) if scorer_path else None
        train = _load_split(dataset, "train", cache_dir, cfg["seed"], family, cfg["dataset_size"])
        test = _load_split(dataset, "test", cache_dir, cfg["seed"], family, cfg["dataset_size"])
        joint_cfg = JointConfig(
            lambda_sim=cfg["lambda_sim"], epochs=cfg["epochs"], ngf=cfg["ngf"],
            seed=cfg["seed"], max_train_images=cfg["max_train_images"],
        )
        inputs = {"scorer": scorer_path} if scorer_path else None
        _write_manifest(out_dir, {**cfg, "dataset": dataset, "family": family}, inputs)
        result = run_joint_training(train, joint_cfg, scorer, test_dataset=test, out_dir=out_dir)
        final_acc = result.trace.epoch_test_acc[-1] if result.trace.epoch_test_acc else None
        click.echo(f"run complete; final test accuracy: {final_acc}")
    except MinbitsError as exc:
        _fail(exc)


@main.command("sweep")
@click.option("--dataset", type=click.Choice(DATASET_CHOICES), required=True)
@click.option("--family", type=click.Choice(["synth", "real"]), default="synth")
@click.option("--lambdas", required=True, help="Comma-separated trade-off weights, include 0.")
@click.option("--epochs", type=int, default=10)
@click.option("--ngf", type=int, default=64)
@click.option("--max-train-images", type=int, default=None)
@click.option("--dataset-size", type=int, default=None)
@click.option("--seed", type=int, default=0)
@click.option("--scorer", "scorer_path", required=True, type=click.Path(exists=True))
@click.option("--parallel", type=int, default=1, help="Child processes; 1 = in-process.")
@click.option("--cache-dir", default=None, envvar="MINBITS_CACHE_DIR")
@click.option("--out", required=True, type=click.Path())
def sweep_cmd(dataset, family, lambdas, epochs, ngf, max_train_images, dataset_size,
              seed, scorer_path, parallel, cache_dir, out):
    """One joint run per trade-off weight; emits a sweep CSV."""
    from .flow import load_scorer
    from .joint import JointConfig, SweepRow, sweep_lambda, write_sweep_csv

    try:
        lams = [float(v) for v in lambdas.split(",") if v.strip() != ""]
        out_dir = Path(out)
        _write_manifest(out_dir, {"dataset": dataset, "lambdas": lams, "epochs": epochs,
                                  "ngf": ngf, "seed": seed, "parallel": parallel},
                        {"scorer": scorer_path})
        if parallel > 1:
            rows = _sweep_subprocesses(dataset, family, lams, epochs, ngf, max_train_images,
                                       dataset_size, seed, scorer_path, cache_dir, out_dir, parallel)
        else:
            scorer = load_scorer(scorer_path)
            train = _load_split(dataset, "train", cache_dir, seed, family, dataset_size)
            test = _load_split(dataset, "test", cache_dir, seed, family, dataset_size)
            cfg = JointConfig(epochs=epochs, ngf=ngf, seed=seed, max_train_images=max_train_images)
            rows = sweep_lambda(train, lams, cfg, scorer, test, out_root=out_dir)
        write_sweep_csv(rows, out_dir / "sweep.csv")
        click.echo(f"sweep complete: {out_dir / 'sweep.csv'}")
    except MinbitsError as exc:
        _fail(exc)


def _sweep_subprocesses(dataset, family, lams, epochs, ngf, max_train_images, dataset_size,
                        seed, scorer_path, cache_dir, out_dir, parallel):
    import subprocess
    from concurrent.futures import ThreadPoolExecutor

    from .flow import load_scorer
    from .joint import SweepRow, simplify_dataset, _score_ready
    from .flow import bpd as bpd_fn
    from .nets import evaluate_accuracy, load_model

    def launch(lam):
        run_dir = out_dir / f"lambda_{lam:g}"
        cmd = [sys.executable, "-m", "minbits.cli", "simplify-train", "--dataset", dataset,
               "--family", family, "--lambda-sim", str(lam), "--epochs", str(epochs),
               "--ngf", str(ngf), "--seed", str(seed), "--scorer", str(scorer_path),
               "--out", str(run_dir)]
        if max_train_images is not None:
            cmd += ["--max-train-images", str(max_train_images)]
        if dataset_size is not None:
            cmd += ["--dataset-size", str(dataset_size)]
        if cache_dir is not None:
            cmd += ["--cache-dir", str(cache_dir)]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        return lam, run_dir, proc

    with ThreadPoolExecutor(max_workers=parallel) as pool:
        finished = list(pool.map(launch, lams))

    scorer = load_scorer(scorer_path)
    train = _load_split(dataset, "train", cache_dir, seed, family, dataset_size)
    test = _load_split(dataset, "test", cache_dir, seed, family, dataset_size)
    rows = []
    for lam, run_dir, proc in finished:
        if proc.returncode != 0:
            rows.append(SweepRow(lam, float("nan"), float("nan"), str(run_dir),
                                 error=proc.stderr.strip()[-500:]))
            continue
        simplifier = load_model(run_dir / "simplifier.pt")
        classifier = load_model(run_dir / "classifier.pt")
        images = train.images if max_train_images is None else train.subset(max_train_images, seed=seed).images
        sim = simplify_dataset(simplifier, images)
        rows.append(SweepRow(lam, bpd_fn(scorer, _score_ready(sim), dequantize=True, seed=0).mean_bpd,
                             evaluate_accuracy(classifier, test.images, test.labels), str(run_dir)))
    return rows


@main.command("condense")
@click.option("--dataset", type=click.Choice(DATASET_CHOICES), required=True)
@click.option("--family", type=click.Choice(["synth", "real"]), default="synth")
@click.option("--ipc", type=int, default=1)
@click.option("--lambda-sim", type=float, default=0.0)
@click.option("--outer-loops", type=int, default=200)
@click.option("--width", type=int, default=128)
@click.option("--dataset-size", type=int, default=None)
@click.option("--retrain-epochs", type=int, default=300)
@click.option("--seed", type=int, default=0)
@click.option("--scorer", "scorer_path", type=click.Path(exists=True), default=None)
@click.option("--cache-dir", default=None, envvar="MINBITS_CACHE_DIR")
@click.option("--out", required=True, type=click.Path())
def condense_cmd(dataset, family, ipc, lambda_sim, outer_loops, width, dataset_size,
                 retrain_epochs, seed, scorer_path, cache_dir, out):
    """Learn a condensed synthetic set and evaluate it by retraining."""
    import csv as csv_mod

    from .condense import MatchConfig, condense, retrain_on_condensed
    from .flow import load_scorer
    from .viz import save_image_grid

    try:
        out_dir = Path(out)
        scorer = load_scorer(scorer_path) if scorer_path else None
        train = _load_split(dataset, "train", cache_dir, seed, family, dataset_size)
        test = _load_split(dataset, "test", cache_dir, seed, family, dataset_size)
        cfg = MatchConfig(lambda_sim=lambda_sim, ipc=ipc, outer_loops=outer_loops,
                          width=width, seed=seed)
        inputs = {"scorer": scorer_path} if scorer_path else None
        _write_manifest(out_dir, {"dataset": dataset, **asdict(cfg)}, inputs)
        condensed, report = condense(train, scorer, cfg)
        save_image_grid(condensed.images, out_dir / "condensed.png", nrow=ipc * 2 if ipc > 1 else 10)
        torch.save({"images": condensed.images, "labels": condensed.labels, "ipc": ipc},
                   out_dir / "condensed.pt")
        if report.per_image_bpd.size:
            with open(out_dir / "bpd.csv", "w", newline="") as fh:
                writer = csv_mod.writer(fh)
                writer.writerow(["index", "bpd"])
                writer.writerows(enumerate(report.per_image_bpd.tolist()))
        acc = retrain_on_condensed(condensed, test, epochs=retrain_epochs, width=width, seed=seed)
        (out_dir / "retrain_accuracy.json").write_text(
            json.dumps({"accuracy": acc, "mean_bpd": report.mean_bpd})
        )
        click.echo(f"condensed set written; retrain accuracy {acc:.4f}")
    except MinbitsError as exc:
        _fail(exc)


@main.command("posthoc")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--scorer", "scorer_path", required=True, type=click.Path(exists=True))
@click.option("--image", "image_path", type=click.Path(exists=True), default=None,
              help="PNG to audit; defaults to a test-set example.")
@click.option("--dataset", type=click.Choice(DATASET_CHOICES), default="synth_textures")
@click.option("--index", type=int, default=0, help="Test-set index when no image given.")
@click.option("--lambda-sim", type=float, default=0.0)
@click.option("--steps", type=int, default=500)
@click.option("--seed", type=int, default=0)
@click.option("--cache-dir", default=None, envvar="MINBITS_CACHE_DIR")
@click.option("--out", required=True, type=click.Path())
def posthoc_cmd(checkpoint, scorer_path, image_path, dataset, index, lambda_sim, steps,
                seed, cache_dir, out):
    """Audit one input: simplified image PNG plus a JSON loss trace."""
    from PIL import Image

    from .flow import load_scorer
    from .nets import load_model
    from .posthoc import PosthocConfig, posthoc_simplify
    from .viz import save_image_grid

    try:
        out_dir = Path(out)
        f = load_model(checkpoint)
        scorer = load_scorer(scorer_path)
        if image_path is not None:
            arr = np.asarray(Image.open(image_path).convert("RGB"), dtype=np.float32) / 255.0
            x = torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)
        else:
            ds = _load_split(dataset, "test", cache_dir, seed, "synth", None)
            x = ds.images[index : index + 1]
        _write_manifest(out_dir, {"lambda_sim": lambda_sim, "steps": steps, "seed": seed},
                        {"checkpoint": checkpoint, "scorer": scorer_path})
        result = posthoc_simplify(f, scorer, x, PosthocConfig(lambda_sim=lambda_sim, steps=steps, seed=seed))
        save_image_grid(torch.cat([x, result.x_sim]), out_dir / "side_by_side.png", nrow=2)
        (out_dir / "trace.json").write_text(json.dumps({
            "bpd_orig": result.bpd_orig,
            "bpd_sim": result.bpd_sim,
            "h_orig": result.h_orig.tolist(),
            "h_sim": result.h_sim.tolist(),
            "trace": [asdict(t) for t in result.trace],
        }))
        click.echo(f"audit written to {out_dir}; bpd {result.bpd_orig:.3f} -> {result.bpd_sim:.3f}")
    except MinbitsError as exc:
        _fail(exc)


@main.command("baseline")
@click.option("--method", type=click.Choice(["mse_simplifier", "gaussian_blur", "jpeg"]), required=True)
@click.option("--knob", type=float, required=True,
              help="Encoding-cost weight, blur sigma, or JPEG quality.")
@click.option("--dataset", type=click.Choice(DATASET_CHOICES), required=True)
@click.option("--family", type=click.Choice(["synth", "real"]), default="synth")
@click.option("--dataset-size", type=int, default=None)
@click.option("--max-train-images", type=int, default=None)
@click.option("--retrain-epochs", type=int, default=8)
@click.option("--seed", type=int, default=0)
@click.option("--scorer", "scorer_path", required=True, type=click.Path(exists=True))
@click.option("--cache-dir", default=None, envvar="MINBITS_CACHE_DIR")
@click.option("--out", required=True, type=click.Path())
def baseline_cmd(method, knob, dataset, family, dataset_size, max_train_images,
                 retrain_epochs, seed, scorer_path, cache_dir, out):
    """Run one fixed/learned baseline point and emit its trade-off row."""
    from .baselines import (BaselineConfig, blur_baseline, jpeg_baseline,
                            mse_simplifier_baseline, write_tradeoff_csv)
    from .flow import load_scorer

    try:
        out_dir = Path(out)
        scorer = load_scorer(scorer_path)
        train = _load_split(dataset, "train", cache_dir, seed, family, dataset_size)
        test = _load_split(dataset, "test", cache_dir, seed, family, dataset_size)
        cfg = BaselineConfig(seed=seed, epochs_retrain=retrain_epochs,
                             max_train_images=max_train_images)
        _write_manifest(out_dir, {"method": method, "knob": knob, "dataset": dataset,
                                  **asdict(cfg)}, {"scorer": scorer_path})
        if method == "mse_simplifier":
            row = mse_simplifier_baseline(train, test, scorer, knob, cfg)
        elif method == "gaussian_blur":
            row = blur_baseline(train, test, scorer, knob, cfg)
        else:
            row = jpeg_baseline(train, test, scorer, int(knob), cfg)
        write_tradeoff_csv([row], out_dir / "baseline.csv")
        click.echo(f"{method} knob={knob}: bpd={row.mean_bpd:.3f} acc={row.acc_retrain:.4f}")
    except MinbitsError as exc:
        _fail(exc)


@main.command("tradeoff")
@click.option("--run", "runs", multiple=True, type=click.Path(exists=True),
              help="Joint-run artifact directories (repeatable).")
@click.option("--dataset", type=click.Choice(DATASET_CHOICES), required=True)
@click.option("--family", type=click.Choice(["synth", "real"]), default="synth")
@click.option("--dataset-size", type=int, default=None)
@click.option("--max-train-images", type=int, default=None)
@click.option("--retrain-epochs", type=int, default=8)
@click.option("--seed", type=int, default=0)
@click.option("--scorer", "scorer_path", required=True, type=click.Path(exists=True))
@click.option("--cache-dir", default=None, envvar="MINBITS_CACHE_DIR")
@click.option("--out", required=True, type=click.Path())
def tradeoff_cmd(runs, dataset, family, dataset_size, max_train_images, retrain_epochs,
                 seed, scorer_path, cache_dir, out):
    """Three-way (joint/retrain/finetune) evaluation of joint runs + plot."""
    from .baselines import BaselineConfig, evaluate_tradeoff, tradeoff_plot, write_tradeoff_csv
    from .flow import load_scorer

    try:
        if not runs:
            raise MinbitsError("provide at least one --run directory")
        out_dir = Path(out)
        scorer = load_scorer(scorer_path)
        train = _load_split(dataset, "train", cache_dir, seed, family, dataset_size)
        test = _load_split(dataset, "test", cache_dir, seed, family, dataset_size)
        cfg = BaselineConfig(seed=seed, epochs_retrain=retrain_epochs,
                             max_train_images=max_train_images)
        _write_manifest(out_dir, {"runs": list(runs), "dataset": dataset, **asdict(cfg)},
                        {"scorer": scorer_path})
        points = [evaluate_tradeoff(run, train, test, scorer, cfg) for run in runs]
        write_tradeoff_csv(points, out_dir / "tradeoff.csv")
        tradeoff_plot(points, out_dir / "tradeoff.png")
        click.echo(f"wrote {len(points)} rows to {out_dir / 'tradeoff.csv'}")
    except MinbitsError as exc:
        _fail(exc)


@main.command("serve")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--scorer", "scorer_path", type=click.Path(exists=True), default=None)
@click.option("--dataset", type=click.Choice(DATASET_CHOICES), default="synth_textures")
@click.option("--dataset-size", type=int, default=512)
@click.option("--sessions-dir", default="sessions")
@click.option("--static-dir", type=click.Path(exists=True), default=None,
              help="Optional built workbench bundle to serve at /.")
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8000)
def serve_cmd(checkpoint, scorer_path, dataset, dataset_size, sessions_dir, static_dir, host, port):
    """Serve the audit API (and optionally the workbench UI)."""
    import uvicorn

    from .service import ServiceConfig, create_app

    try:
        app = create_app(ServiceConfig(
            classifier_path=checkpoint, scorer_path=scorer_path, dataset_name=dataset,
            dataset_size=dataset_size, sessions_dir=sessions_dir,
        ))
        if static_dir:
            from fastapi.staticfiles import StaticFiles

            app.mount("/", StaticFiles(directory=static_dir, html=True), name="workbench")
        uvicorn.run(app, host=host, port=port)
    except MinbitsError as exc:
        _fail(exc)


if __name__ == "__main__":
    main()
