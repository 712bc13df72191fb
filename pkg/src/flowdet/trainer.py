"""Optimization loop, checkpointing, and ablation orchestration.

Training uses decoupled-weight-decay Adam with gradient clipping, logs a
LossBreakdown per step (JSON-lines when an output directory is given),
validates periodically through the exact sampling path used at
evaluation time, and keeps best- and last-epoch checkpoints.  Resuming
from a checkpoint reproduces the uninterrupted loss sequence.
"""

from __future__ import annotations

import dataclasses
import json
import os
import random
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import metrics, sampler
from .baseline_diffusion import (DiffusionSamplerConfig,
                                 diffusion_training_loss_batch)
from .data import AnnotatedImage
from .errors import ConfigMismatchError, NumericError
from .losses import LossBreakdown, LossWeights, training_loss_batch
from .model import ModelConfig, VelocityModel

CHECKPOINT_VERSION = 1
OBJECTIVES = ("flow", "diffusion")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 6e-5
    batch_size: int = 8
    epochs: int = 30
    objective: str = "flow"
    weights: LossWeights = LossWeights()
    n_prop_train: int = 12
    seed: int = 0
    prior: str = "standard-normal"
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    val_every: int = 5
    val_steps: int = 3
    val_proposals: int = 120
    val_images: int | None = 100
    diffusion_total_steps: int = 1000
    diffusion_signal_scale: float = 2.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    best_val_ap: float = -1.0
    history: list[dict] = field(default_factory=list)


def _epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 1000 + epoch]).permutation(n)


def _loss_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 777])


def validate(model: VelocityModel, scenes: Sequence[AnnotatedImage],
             cfg: TrainConfig, eval_cfg: metrics.EvalConfig | None = None) -> float:
    """AP_10:50 on a validation split through the real sampling path."""
    eval_cfg = eval_cfg or metrics.EvalConfig()
    cap = cfg.val_images or len(scenes)
    subset = list(scenes)[:cap]
    if cfg.objective == "diffusion":
        s_cfg = DiffusionSamplerConfig(
            n_proposals=cfg.val_proposals, steps=cfg.val_steps, noise_seed=cfg.seed,
            total_steps=cfg.diffusion_total_steps,
            signal_scale=cfg.diffusion_signal_scale)
    else:
        s_cfg = sampler.SamplerConfig(
            n_proposals=cfg.val_proposals, steps=cfg.val_steps,
            noise_seed=cfg.seed, prior=cfg.prior)
    model.eval()
    try:
        det_sets = sampler.detect_dataset(model, [s.image for s in subset], s_cfg)
    finally:
        model.train()
    dets = [sampler.apply_nms(ds, eval_cfg.nms_iou, eval_cfg.nms_conf) for ds in det_sets]
    report = metrics.evaluate(dets, [s.gt_boxes for s in subset], eval_cfg)
    return report.ap_10_50


def _batch_loss(scenes: Sequence[AnnotatedImage], model: VelocityModel,
                cfg: TrainConfig, rng: np.random.Generator) -> LossBreakdown:
    images = np.stack([s.image for s in scenes])
    gts = [s.gt_boxes for s in scenes]
    if cfg.objective == "diffusion":
        return diffusion_training_loss_batch(
            images, gts, model, cfg.weights, rng, n_prop=cfg.n_prop_train,
            total_steps=cfg.diffusion_total_steps,
            signal_scale=cfg.diffusion_signal_scale)
    return training_loss_batch(images, gts, model, cfg.weights, rng,
                               n_prop=cfg.n_prop_train, prior=cfg.prior)


def train(dataset: Sequence[AnnotatedImage], cfg: TrainConfig,
          model_cfg: ModelConfig | None = None,
          val_dataset: Sequence[AnnotatedImage] | None = None,
          out_dir: Path | None = None,
          resume_from: Path | None = None) -> tuple[VelocityModel, TrainState]:
    """Run the optimization loop; returns the trained model and state.

    With out_dir set, writes history.jsonl plus last.pt / best.pt
    checkpoints.  resume_from restarts from a last.pt checkpoint and
    continues the identical loss trajectory.
    """
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    model_cfg = model_cfg or ModelConfig()

    if resume_from is not None:
        model, payload = load_checkpoint(resume_from, expected_config=model_cfg)
        stored = payload["train_config"]
        if stored != _train_config_dict(cfg):
            raise ConfigMismatchError("resume with a different training config")
        optimizer = _make_optimizer(model, cfg)
        optimizer.load_state_dict(payload["optimizer_state"])
        state = TrainState(step=payload["train_state"]["step"],
                           epoch=payload["train_state"]["epoch"],
                           best_val_ap=payload["train_state"]["best_val_ap"])
        rng = np.random.default_rng()
        rng.bit_generator.state = payload["train_state"]["loss_rng"]
        torch.set_rng_state(torch.as_tensor(payload["train_state"]["torch_rng"],
                                            dtype=torch.uint8))
    else:
        torch.manual_seed(cfg.seed)
        random.seed(cfg.seed)
        model = VelocityModel(model_cfg)
        optimizer = _make_optimizer(model, cfg)
        state = TrainState()
        rng = _loss_rng(cfg.seed)

    history_path = Path(out_dir) / "history.jsonl" if out_dir else None
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)

    model.train()
    n = len(dataset)
    for epoch in range(state.epoch, cfg.epochs):
        perm = _epoch_permutation(cfg.seed, epoch, n)
        for lo in range(0, n, cfg.batch_size):
            batch = [dataset[i] for i in perm[lo:lo + cfg.batch_size]]
            breakdown = _batch_loss(batch, model, cfg, rng)
            total = breakdown.total
            if not torch.isfinite(total):
                raise NumericError(
                    "non-finite loss at step {}: components {} on batch {}".format(
                        state.step, breakdown.floats(), [s.image_id for s in batch]))
            optimizer.zero_grad()
            total.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            record = {"kind": "train", "step": state.step, "epoch": epoch}
            record.update(dataclasses.asdict(breakdown.floats()))
            state.history.append(record)
            _append_jsonl(history_path, record)
            state.step += 1
        state.epoch = epoch + 1

        run_validation = (val_dataset is not None
                          and ((epoch + 1) % cfg.val_every == 0
                               or epoch + 1 == cfg.epochs))
        if run_validation:
            ap = validate(model, val_dataset, cfg)
            record = {"kind": "val", "step": state.step, "epoch": epoch,
                      "ap_10_50": ap}
            state.history.append(record)
            _append_jsonl(history_path, record)
            if ap > state.best_val_ap:
                state.best_val_ap = ap
                if out_dir:
                    save_checkpoint(Path(out_dir) / "best.pt", model, optimizer,
                                    cfg, state, rng)
        if out_dir:
            save_checkpoint(Path(out_dir) / "last.pt", model, optimizer,
                            cfg, state, rng)
    model.eval()
    return model, state


def _make_optimizer(model: VelocityModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate,
                             weight_decay=cfg.weight_decay)


def _append_jsonl(path: Path | None, record: dict) -> None:
    if path is None:
        return
    with open(path, "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def _train_config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["weights"] = asdict(cfg.weights)
    return d


def save_checkpoint(path: Path, model: VelocityModel,
                    optimizer: torch.optim.Optimizer | None = None,
                    train_cfg: TrainConfig | None = None,
                    state: TrainState | None = None,
                    rng: np.random.Generator | None = None) -> None:
    """Versioned checkpoint: parameters keyed by module path + config hash."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "config_hash": model.config_hash(),
        "model_config": asdict(model.cfg),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer else None,
        "train_config": _train_config_dict(train_cfg) if train_cfg else None,
        "train_state": {
            "step": state.step if state else 0,
            "epoch": state.epoch if state else 0,
            "best_val_ap": state.best_val_ap if state else -1.0,
            "loss_rng": rng.bit_generator.state if rng is not None else None,
            "torch_rng": torch.get_rng_state().numpy().tolist(),
        },
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: Path,
                    expected_config: ModelConfig | None = None
                    ) -> tuple[VelocityModel, dict]:
    path = Path(path)
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigMismatchError(
            f"unsupported checkpoint version {payload.get('version')}")
    model_cfg = ModelConfig(**payload["model_config"])
    if model_cfg.config_hash() != payload["config_hash"]:
        raise ConfigMismatchError("checkpoint config hash does not match its config")
    if expected_config is not None and expected_config.config_hash() != payload["config_hash"]:
        raise ConfigMismatchError(
            "checkpoint was trained with a different model configuration")
    model = VelocityModel(model_cfg)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, payload


# ---------------------------------------------------------------------------
# Ablation orchestration and run-config files.
# ---------------------------------------------------------------------------

def apply_overrides(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    """Override TrainConfig fields; 'weights.lambda_flow'-style dotted keys
    and a nested {'weights': {...}} dict both address the loss weights."""
    plain: dict = {}
    weight_over: dict = {}
    for key, value in overrides.items():
        if key.startswith("weights."):
            weight_over[key.split(".", 1)[1]] = value
        elif key == "weights":
            weight_over.update(value)
        else:
            plain[key] = value
    if weight_over:
        plain["weights"] = dataclasses.replace(cfg.weights, **weight_over)
    return dataclasses.replace(cfg, **plain)


def run_ablation(train_scenes: Sequence[AnnotatedImage],
                 test_scenes: Sequence[AnnotatedImage],
                 base_cfg: TrainConfig,
                 variants: Sequence[dict],
                 model_cfg: ModelConfig | None = None,
                 eval_steps: int = 3, eval_proposals: int = 120) -> list[dict]:
    """Train each variant from the same seed and evaluate at the paper's
    operating point (N_prop=120, S=3 by default)."""
    eval_cfg = metrics.EvalConfig()
    rows = []
    for overrides in variants:
        cfg = apply_overrides(base_cfg, overrides)
        model, _ = train(train_scenes, cfg, model_cfg=model_cfg)
        if cfg.objective == "diffusion":
            s_cfg = DiffusionSamplerConfig(n_proposals=eval_proposals,
                                           steps=eval_steps, noise_seed=cfg.seed,
                                           total_steps=cfg.diffusion_total_steps,
                                           signal_scale=cfg.diffusion_signal_scale)
        else:
            s_cfg = sampler.SamplerConfig(n_proposals=eval_proposals,
                                          steps=eval_steps, noise_seed=cfg.seed,
                                          prior=cfg.prior)
        det_sets = sampler.detect_dataset(model, [s.image for s in test_scenes], s_cfg)
        dets = [sampler.apply_nms(ds, eval_cfg.nms_iou, eval_cfg.nms_conf)
                for ds in det_sets]
        report = metrics.evaluate(dets, [s.gt_boxes for s in test_scenes], eval_cfg)
        op = report.operating[0.5]
        rows.append({
            "variant": overrides,
            "ap_10_50": report.ap_10_50,
            "ap_30": report.ap[0.3],
            "ap_50": report.ap[0.5],
            "precision_tc50_iou10": op[0.1].precision,
            "recall_tc50_iou10": op[0.1].recall,
        })
    return rows


def _nest_dotted(flat: dict) -> dict:
    nested: dict = {}
    for key, value in flat.items():
        parts = key.split(".")
        node = nested
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        leaf = parts[-1]
        if isinstance(value, dict) and isinstance(node.get(leaf), dict):
            node[leaf].update(value)
        else:
            node[leaf] = value
    return nested


def load_run_config(path: Path) -> dict:
    """Read a JSON run config; dotted keys (loss.lambda_cls) are folded
    into nested sections {train, loss, model, data}."""
    raw = json.loads(Path(path).read_text())
    return _nest_dotted(raw)


def train_config_from_sections(sections: dict) -> TrainConfig:
    train_kw = dict(sections.get("train", {}))
    loss_kw = sections.get("loss", {})
    weights = LossWeights(**loss_kw) if loss_kw else LossWeights()
    return TrainConfig(weights=weights, **train_kw)


def model_config_from_sections(sections: dict) -> ModelConfig:
    return ModelConfig(**sections.get("model", {}))
