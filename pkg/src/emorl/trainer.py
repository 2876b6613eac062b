"""Training loop: Adam with warm-up/decay, gradient clipping, refinement-step
curriculum, GECO stepping, JSONL metric logs, and resumable checkpoints."""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, LrSchedule, RunConfig, config_hash, run_config_to_dict
from .data.format import DatasetReader, DatasetView, split_dataset
from .model import EfficientMorl, ForwardResult, build_model
from .objective import GecoState, LossBreakdown, geco_update

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(Exception):
    pass


def lr_at(step: int, schedule: LrSchedule) -> float:
    """Linear warm-up from 0, then exponential decay with the given half-life."""
    if step < 0:
        raise ValueError("step must be >= 0")
    w = schedule.warmup_steps
    if w > 0 and step < w:
        return schedule.base * step / w
    return schedule.base * 0.5 ** ((step - w) / schedule.half_life)


def current_I(step: int, curriculum: list[tuple[int, int]]) -> int:
    """Refinement steps from the last curriculum entry at or before `step`."""
    if not curriculum:
        raise ValueError("curriculum must be non-empty")
    value = curriculum[0][1]
    for at, i in curriculum:
        if step >= at:
            value = i
        else:
            break
    return value


def images_to_tensor(scenes, device=None) -> torch.Tensor:
    arr = np.stack([s.image for s in scenes]).astype(np.float32) / 255.0
    return torch.from_numpy(arr).permute(0, 3, 1, 2).to(device or "cpu")


@dataclass
class TrainState:
    model: EfficientMorl
    optimizer: torch.optim.Adam
    config: RunConfig
    step: int = 0
    geco: GecoState | None = None
    noise_gen: torch.Generator | None = None
    batch_rng: np.random.Generator | None = None

    @property
    def hash(self) -> str:
        return config_hash(self.config)


def init_train_state(cfg: RunConfig, device: str = "cpu") -> TrainState:
    torch.manual_seed(cfg.train.seed)
    model = build_model(cfg.model).to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.train.lr.base)
    geco = None
    if cfg.train.geco.enabled:
        g = cfg.train.geco
        geco = GecoState(
            nll_threshold=g.nll_threshold, zeta=g.zeta_init, zeta_min=g.zeta_min,
            ema_alpha=g.ema_alpha, update_rate=g.update_rate,
        )
    noise_gen = torch.Generator(device=device)
    noise_gen.manual_seed(cfg.train.seed + 1)
    batch_rng = np.random.default_rng(cfg.train.seed + 2)
    return TrainState(
        model=model, optimizer=optimizer, config=cfg, geco=geco,
        noise_gen=noise_gen, batch_rng=batch_rng,
    )


def train_step(state: TrainState, images: torch.Tensor) -> LossBreakdown:
    """One optimization step; returns the scalar loss breakdown."""
    cfg = state.config.train
    steps_i = current_I(state.step, cfg.curriculum)
    state.model.train()
    result: ForwardResult = state.model(
        images, steps_i, geco=state.geco, generator=state.noise_gen
    )
    loss = result.total.mean()
    if not torch.isfinite(loss):
        raise TrainingDiverged(
            f"non-finite loss at step {state.step}: "
            f"{json.dumps(result.breakdown().as_dict())}"
        )
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    torch.nn.utils.clip_grad_norm_(state.model.parameters(), cfg.grad_clip)
    lr = lr_at(state.step, cfg.lr)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    if state.geco is not None:
        state.geco = geco_update(state.geco, float(result.nll0.detach().mean()))
    state.step += 1
    return result.breakdown()


def sample_batch(
    view: DatasetView, batch_size: int, rng: np.random.Generator, device=None
) -> torch.Tensor:
    idx = rng.integers(0, len(view), size=batch_size)
    return images_to_tensor([view[int(i)] for i in idx], device=device)


# ---------------------------------------------------------------------------
# Checkpointing


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config_hash": state.hash,
        "config": run_config_to_dict(state.config),
        "step": state.step,
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "geco": dataclasses.asdict(state.geco) if state.geco else None,
        "torch_rng": state.noise_gen.get_state() if state.noise_gen else None,
        "numpy_rng": state.batch_rng.bit_generator.state if state.batch_rng else None,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(
    path: str | Path, cfg: RunConfig | None = None, device: str = "cpu"
) -> TrainState:
    """Restore a TrainState; refuses a config whose hash mismatches the saved one."""
    try:
        payload = torch.load(path, map_location=device, weights_only=False)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {payload.get('version')}"
        )
    from .config import run_config_from_dict

    saved_cfg = run_config_from_dict(payload["config"])
    if cfg is not None:
        if config_hash(cfg) != payload["config_hash"]:
            raise CheckpointError(
                f"config hash mismatch: checkpoint {payload['config_hash']}, "
                f"requested {config_hash(cfg)}"
            )
    else:
        cfg = saved_cfg
    state = init_train_state(cfg, device=device)
    state.model.load_state_dict(payload["model"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.step = payload["step"]
    if payload["geco"] is not None:
        state.geco = GecoState(**payload["geco"])
    else:
        state.geco = None
    if payload["torch_rng"] is not None:
        state.noise_gen.set_state(payload["torch_rng"])
    if payload["numpy_rng"] is not None:
        state.batch_rng.bit_generator.state = payload["numpy_rng"]
    return state


# ---------------------------------------------------------------------------
# Full run


def open_train_view(cfg: RunConfig) -> tuple[DatasetView, DatasetView]:
    path = Path(cfg.data.path)
    if not path.exists():
        raise ConfigError(
            f"dataset not found at {path}; run `emorl gen-data` first"
        )
    reader = DatasetReader(path)
    return split_dataset(reader, cfg.data.n_train, cfg.data.n_test)


def train(
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    max_steps: int | None = None,
    log_fn=None,
) -> TrainState:
    """Run (or resume) training to cfg.train.total_steps; writes metrics.jsonl
    and periodic checkpoints under out_dir."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_view, _ = open_train_view(cfg)
    if resume is not None:
        state = load_checkpoint(resume, cfg)
    else:
        state = init_train_state(cfg)
    total = cfg.train.total_steps if max_steps is None else min(
        max_steps, cfg.train.total_steps
    )
    log_path = out / "metrics.jsonl"
    mode = "a" if resume is not None else "w"
    last_i = None
    t_start = time.time()
    with open(log_path, mode) as log:
        if state.step == 0:
            log.write(json.dumps({
                "event": "start", "config_hash": state.hash,
                "params": state.model.num_parameters(),
            }) + "\n")
        while state.step < total:
            steps_i = current_I(state.step, cfg.train.curriculum)
            if steps_i != last_i:
                log.write(json.dumps({
                    "event": "curriculum", "step": state.step, "I": steps_i,
                }) + "\n")
                last_i = steps_i
            batch = sample_batch(train_view, cfg.train.batch_size, state.batch_rng)
            breakdown = train_step(state, batch)
            done = state.step
            if done % cfg.train.log_every == 0 or done == total:
                rec = {
                    "step": done,
                    "lr": lr_at(done - 1, cfg.train.lr),
                    "I": steps_i,
                    "zeta": state.geco.zeta if state.geco else None,
                    "elapsed": round(time.time() - t_start, 2),
                    **breakdown.as_dict(),
                }
                log.write(json.dumps(rec) + "\n")
                log.flush()
                if log_fn is not None:
                    log_fn(rec)
            if cfg.train.checkpoint_every and done % cfg.train.checkpoint_every == 0:
                save_checkpoint(state, out / f"checkpoint_{done:08d}.pt")
        save_checkpoint(state, out / "checkpoint_final.pt")
    return state
