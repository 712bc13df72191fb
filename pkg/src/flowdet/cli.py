"""Command-line entry point: dataset generation, training, evaluation,
step/proposal sweeps, flow-vs-diffusion comparison, and report emission.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
Every command writes a manifest (config, seed, versions) beside its
outputs, and all files are written atomically.  Relative --out paths are
resolved under $FLOWDET_OUTPUT_ROOT when it is set.
"""

from __future__ import annotations

import csv
import functools
import json
import os
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path

import click
import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from . import __version__, metrics, sampler  # noqa: E402
from .baseline_diffusion import DiffusionSamplerConfig  # noqa: E402
from .data import (SceneConfig, generate_dataset, load_dataset,  # noqa: E402
                   write_json_atomic)
from .errors import (ConfigMismatchError, DatasetError,  # noqa: E402
                     DivergenceError, NumericError)
from .metrics import EvalConfig  # noqa: E402
from .sampler import SamplerConfig  # noqa: E402
from .trainer import (TrainConfig, apply_overrides, load_checkpoint,  # noqa: E402
                      load_run_config, model_config_from_sections,
                      save_checkpoint, train, train_config_from_sections)

EXIT_DATA_ERROR = 3
EXIT_NUMERIC_ERROR = 4


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (DatasetError, ConfigMismatchError, FileNotFoundError) as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(EXIT_DATA_ERROR)
        except (NumericError, DivergenceError) as e:
            click.echo(f"numeric failure: {e}", err=True)
            sys.exit(EXIT_NUMERIC_ERROR)

    return wrapper


def resolve_out(out: str) -> Path:
    root = os.environ.get("FLOWDET_OUTPUT_ROOT")
    path = Path(out)
    if root and not path.is_absolute():
        path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(out: Path, command: str, args: dict, **extra) -> None:
    import torch

    manifest = {
        "command": command,
        "args": args,
        "versions": {
            "flowdet": __version__,
            "numpy": np.__version__,
            "torch": torch.__version__,
            "python": ".".join(map(str, sys.version_info[:3])),
        },
    }
    manifest.update(extra)
    write_json_atomic(out / "manifest.json", manifest)


def save_plot_atomic(fig, path: Path) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".png.tmp")
    os.close(fd)
    try:
        fig.savefig(tmp, format="png", dpi=120)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
        plt.close(fig)


def write_csv_atomic(path: Path, header: list[str], rows: list[list]) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".csv.tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            writer.writerows(rows)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text_atomic(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".txt.tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _int_list(_ctx, _param, value: str) -> list[int]:
    try:
        items = [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"not a comma-separated integer list: {value!r}")
    if not items or any(v < 1 for v in items):
        raise click.BadParameter(f"need positive integers, got {value!r}")
    return items


@click.group()
@click.version_option(__version__)
def main():
    """Flow-matching generative object detection."""


# ---------------------------------------------------------------------- data


@main.group()
def dataset():
    """Synthetic dataset commands."""


@dataset.command("generate")
@click.option("--out", required=True, help="Output dataset root directory.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--count", default=2000, show_default=True, type=click.IntRange(min=1),
              help="Number of training scenes.")
@click.option("--val-count", default=300, show_default=True, type=click.IntRange(min=0))
@click.option("--test-count", default=300, show_default=True, type=click.IntRange(min=0))
@click.option("--image-size", default=128, show_default=True, type=click.IntRange(min=16))
@click.option("--min-objects", default=1, show_default=True, type=click.IntRange(min=1))
@click.option("--max-objects", default=3, show_default=True, type=click.IntRange(min=1))
@click.option("--noise", default=0.05, show_default=True, type=float)
@handle_errors
def dataset_generate(out, seed, count, val_count, test_count, image_size,
                     min_objects, max_objects, noise):
    """Generate train/val/test splits with disjoint scene ids."""
    out_path = resolve_out(out)
    cfg = SceneConfig(image_size=image_size,
                      n_objects_range=(min_objects, max_objects),
                      noise_level=noise, seed=seed)
    paths = generate_dataset(out_path, cfg, train=count, val=val_count, test=test_count)
    write_manifest(out_path, "dataset.generate",
                   {"seed": seed, "count": count, "val_count": val_count,
                    "test_count": test_count, "scene_config": asdict(cfg)})
    for split, path in paths.items():
        click.echo(f"{split}: {path}")


# --------------------------------------------------------------------- train


@main.command("train")
@click.option("--data", "data_dir", required=True, help="Dataset root with train/ and val/.")
@click.option("--out", required=True, help="Run output directory.")
@click.option("--config", "config_file", default=None, help="JSON run config.")
@click.option("--objective", type=click.Choice(["flow", "diffusion"]), default=None)
@click.option("--epochs", type=click.IntRange(min=1), default=None)
@click.option("--batch-size", type=click.IntRange(min=1), default=None)
@click.option("--lr", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--lambda-flow", type=float, default=None)
@click.option("--resume", "resume_from", default=None, help="Checkpoint to resume from.")
@handle_errors
def train_cmd(data_dir, out, config_file, objective, epochs, batch_size, lr,
              seed, lambda_flow, resume_from):
    """Train a detector on a generated dataset."""
    out_path = resolve_out(out)
    sections = load_run_config(config_file) if config_file else {}
    cfg = train_config_from_sections(sections)
    model_cfg = model_config_from_sections(sections)

    overrides = {}
    if objective is not None:
        overrides["objective"] = objective
    if epochs is not None:
        overrides["epochs"] = epochs
    if batch_size is not None:
        overrides["batch_size"] = batch_size
    if lr is not None:
        overrides["learning_rate"] = lr
    if seed is not None:
        overrides["seed"] = seed
    if lambda_flow is not None:
        overrides["weights.lambda_flow"] = lambda_flow
    cfg = apply_overrides(cfg, overrides)

    data_root = Path(data_dir)
    train_scenes = load_dataset(data_root / "train")
    val_path = data_root / "val"
    val_scenes = load_dataset(val_path) if val_path.exists() else None

    write_manifest(out_path, "train",
                   {"data": str(data_dir), "train_config": _cfg_dict(cfg),
                    "model_config": asdict(model_cfg)},
                   config_hash=model_cfg.config_hash(), seed=cfg.seed)
    model, state = train(train_scenes, cfg, model_cfg=model_cfg,
                         val_dataset=val_scenes, out_dir=out_path,
                         resume_from=resume_from)
    if not (out_path / "last.pt").exists():
        save_checkpoint(out_path / "last.pt", model, train_cfg=cfg, state=state)
    click.echo(f"trained {state.step} steps; best val AP_10:50 = {state.best_val_ap:.4f}")


def _cfg_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["weights"] = asdict(cfg.weights)
    return d


# ---------------------------------------------------------------------- eval


def _sampler_config(sampler_kind: str, steps: int, proposals: int, seed: int,
                    prior: str, box_renewal: str, payload: dict | None):
    if sampler_kind == "ddim":
        kwargs = {}
        if payload and payload.get("train_config"):
            tc = payload["train_config"]
            kwargs["total_steps"] = tc.get("diffusion_total_steps", 1000)
            kwargs["signal_scale"] = tc.get("diffusion_signal_scale", 2.0)
        return DiffusionSamplerConfig(n_proposals=proposals, steps=steps,
                                      noise_seed=seed,
                                      box_renewal=(box_renewal == "on"), **kwargs)
    return SamplerConfig(n_proposals=proposals, steps=steps, noise_seed=seed,
                         prior=prior)


def _run_detection(model, scenes, s_cfg, eval_cfg: EvalConfig):
    det_sets = sampler.detect_dataset(model, [s.image for s in scenes], s_cfg)
    dets = [sampler.apply_nms(ds, eval_cfg.nms_iou, eval_cfg.nms_conf)
            for ds in det_sets]
    return dets


def _detections_payload(scenes, dets) -> list[dict]:
    return [
        {
            "image_id": scene.image_id,
            "detections": [
                {"box": [d.box.cx, d.box.cy, d.box.w, d.box.h],
                 "score": d.score, "class_id": d.class_id}
                for d in img_dets
            ],
        }
        for scene, img_dets in zip(scenes, dets)
    ]


@main.command("eval")
@click.option("--checkpoint", required=True)
@click.option("--data", "data_dir", required=True, help="A dataset split directory.")
@click.option("--out", required=True)
@click.option("--steps", default=3, show_default=True, type=click.IntRange(min=1))
@click.option("--proposals", default=120, show_default=True, type=click.IntRange(min=1))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--prior", type=click.Choice(list(sampler.PRIORS)),
              default="standard-normal", show_default=True)
@click.option("--sampler", "sampler_kind", type=click.Choice(["flow", "ddim"]),
              default="flow", show_default=True)
@click.option("--box-renewal", type=click.Choice(["on", "off"]), default="off",
              show_default=True, help="DDIM only.")
@click.option("--nms-iou", default=0.1, show_default=True, type=float)
@click.option("--nms-conf", default=0.5, show_default=True, type=float)
@handle_errors
def eval_cmd(checkpoint, data_dir, out, steps, proposals, seed, prior,
             sampler_kind, box_renewal, nms_iou, nms_conf):
    """Sample a checkpoint over a dataset, apply NMS, and report metrics."""
    out_path = resolve_out(out)
    model, payload = load_checkpoint(checkpoint)
    scenes = load_dataset(data_dir)
    eval_cfg = EvalConfig(nms_iou=nms_iou, nms_conf=nms_conf)
    s_cfg = _sampler_config(sampler_kind, steps, proposals, seed, prior,
                            box_renewal, payload)

    write_manifest(out_path, "eval",
                   {"checkpoint": str(checkpoint), "data": str(data_dir),
                    "steps": steps, "proposals": proposals, "seed": seed,
                    "prior": prior, "sampler": sampler_kind,
                    "box_renewal": box_renewal, "nms_iou": nms_iou,
                    "nms_conf": nms_conf},
                   config_hash=payload["config_hash"], seed=seed)

    dets = _run_detection(model, scenes, s_cfg, eval_cfg)
    report = metrics.evaluate(dets, [s.gt_boxes for s in scenes], eval_cfg)
    write_json_atomic(out_path / "report.json", report.to_json_dict())
    write_json_atomic(out_path / "detections.json", _detections_payload(scenes, dets))
    write_text_atomic(out_path / "report.txt", report.to_text_table())
    click.echo(f"AP_10:50 = {report.ap_10_50:.4f}  ({out_path / 'report.json'})")


# --------------------------------------------------------------------- sweep


@main.command("sweep")
@click.option("--checkpoint", required=True)
@click.option("--data", "data_dir", required=True)
@click.option("--out", required=True)
@click.option("--steps-list", default="1,2,3,4", show_default=True, callback=_int_list)
@click.option("--proposals-list", default="12,120", show_default=True, callback=_int_list)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--sampler", "sampler_kind", type=click.Choice(["flow", "ddim"]),
              default="flow", show_default=True)
@handle_errors
def sweep_cmd(checkpoint, data_dir, out, steps_list, proposals_list, seed, sampler_kind):
    """AP_10:50 grid over (steps, proposals); emits CSV and line plots."""
    out_path = resolve_out(out)
    model, payload = load_checkpoint(checkpoint)
    scenes = load_dataset(data_dir)
    eval_cfg = EvalConfig()
    gts = [s.gt_boxes for s in scenes]

    write_manifest(out_path, "sweep",
                   {"checkpoint": str(checkpoint), "data": str(data_dir),
                    "steps_list": steps_list, "proposals_list": proposals_list,
                    "seed": seed, "sampler": sampler_kind},
                   config_hash=payload["config_hash"], seed=seed)

    rows = []
    grid: dict[int, list[float]] = {p: [] for p in proposals_list}
    for n_prop in proposals_list:
        for steps in steps_list:
            s_cfg = _sampler_config(sampler_kind, steps, n_prop, seed,
                                    "standard-normal", "off", payload)
            dets = _run_detection(model, scenes, s_cfg, eval_cfg)
            report = metrics.evaluate(dets, gts, eval_cfg)
            rows.append([steps, n_prop, f"{report.ap_10_50:.6f}"])
            grid[n_prop].append(report.ap_10_50)
            click.echo(f"S={steps} N_prop={n_prop}: AP_10:50 = {report.ap_10_50:.4f}")

    write_csv_atomic(out_path / "sweep.csv", ["steps", "proposals", "ap_10_50"], rows)
    fig, ax = plt.subplots(figsize=(6, 4))
    for n_prop, aps in grid.items():
        ax.plot(steps_list, aps, marker="o", label=f"N_prop={n_prop}")
    ax.set_xlabel("sampling steps S")
    ax.set_ylabel("AP_10:50")
    ax.set_ylim(0, 1)
    ax.legend()
    ax.grid(alpha=0.3)
    save_plot_atomic(fig, out_path / "steps_vs_ap.png")


# ------------------------------------------------------------------- compare


@main.command("compare")
@click.option("--flow-ckpt", required=True)
@click.option("--ddim-ckpt", required=True)
@click.option("--data", "data_dir", required=True)
@click.option("--out", required=True)
@click.option("--steps-list", default="1,2,3,4", show_default=True, callback=_int_list)
@click.option("--proposals", default=120, show_default=True, type=click.IntRange(min=1))
@click.option("--seed", default=0, show_default=True, type=int)
@handle_errors
def compare_cmd(flow_ckpt, ddim_ckpt, data_dir, out, steps_list, proposals, seed):
    """Paired AP-vs-steps curves for the flow and diffusion samplers."""
    out_path = resolve_out(out)
    flow_model, flow_payload = load_checkpoint(flow_ckpt)
    ddim_model, ddim_payload = load_checkpoint(ddim_ckpt)
    if flow_payload["config_hash"] != ddim_payload["config_hash"]:
        raise ConfigMismatchError("checkpoints use different architectures")
    scenes = load_dataset(data_dir)
    gts = [s.gt_boxes for s in scenes]
    eval_cfg = EvalConfig()

    write_manifest(out_path, "compare",
                   {"flow_ckpt": str(flow_ckpt), "ddim_ckpt": str(ddim_ckpt),
                    "data": str(data_dir), "steps_list": steps_list,
                    "proposals": proposals, "seed": seed},
                   config_hash=flow_payload["config_hash"], seed=seed)

    rows, flow_curve, ddim_curve = [], [], []
    for steps in steps_list:
        f_cfg = _sampler_config("flow", steps, proposals, seed,
                                "standard-normal", "off", flow_payload)
        d_cfg = _sampler_config("ddim", steps, proposals, seed,
                                "standard-normal", "off", ddim_payload)
        flow_ap = metrics.evaluate(
            _run_detection(flow_model, scenes, f_cfg, eval_cfg), gts, eval_cfg).ap_10_50
        ddim_ap = metrics.evaluate(
            _run_detection(ddim_model, scenes, d_cfg, eval_cfg), gts, eval_cfg).ap_10_50
        ratio = flow_ap / ddim_ap if ddim_ap > 0 else float("inf")
        rows.append([steps, f"{flow_ap:.6f}", f"{ddim_ap:.6f}", f"{ratio:.4f}"])
        flow_curve.append(flow_ap)
        ddim_curve.append(ddim_ap)
        click.echo(f"S={steps}: flow {flow_ap:.4f}  ddim {ddim_ap:.4f}  ratio {ratio:.3f}")

    write_csv_atomic(out_path / "compare.csv",
                     ["steps", "flow_ap_10_50", "ddim_ap_10_50", "ratio"], rows)
    write_json_atomic(out_path / "compare.json", {
        "steps": steps_list, "flow_ap_10_50": flow_curve,
        "ddim_ap_10_50": ddim_curve,
    })
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps_list, flow_curve, marker="o", label="flow")
    ax.plot(steps_list, ddim_curve, marker="s", label="ddim")
    ax.set_xlabel("sampling steps S")
    ax.set_ylabel("AP_10:50")
    ax.set_ylim(0, 1)
    ax.legend()
    ax.grid(alpha=0.3)
    save_plot_atomic(fig, out_path / "flow_vs_ddim.png")


# -------------------------------------------------------------------- report


@main.command("report")
@click.option("--input", "input_path", required=True, help="A report.json from eval.")
@click.option("--out", required=True)
@handle_errors
def report_cmd(input_path, out):
    """Re-render an eval report as a text table and AP plot."""
    out_path = resolve_out(out)
    input_path = Path(input_path)
    if not input_path.exists():
        raise DatasetError(f"missing report file: {input_path}")
    report = metrics.EvalReport.from_json_dict(json.loads(input_path.read_text()))
    write_manifest(out_path, "report", {"input": str(input_path)})
    write_text_atomic(out_path / "report.txt", report.to_text_table())
    ious = sorted(report.ap)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([int(t * 100) for t in ious], [report.ap[t] for t in ious], marker="o")
    ax.set_xlabel("IoU threshold (%)")
    ax.set_ylabel("AP")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    save_plot_atomic(fig, out_path / "ap_by_iou.png")
    click.echo(report.to_text_table())


if __name__ == "__main__":
    main()
