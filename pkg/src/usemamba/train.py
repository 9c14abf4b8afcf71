"""Training loop shared by the regression and flow variants.

Examples are fixed-length random crops of (noisy, clean) pairs. Everything
random (crop offsets, flow times, path noise) comes from generators whose
state is checkpointed, so a resumed run continues bit-identically.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import RunConfig
from .distortions import read_manifest, validate_manifest
from .flowmatch import cfm_loss, flow_training_pair, model_velocity_fn
from .losses import composite_loss, reference_phase
from .model import USEMamba, load_checkpoint, regression_tensors, save_checkpoint
from .signals import Waveform, read_wav

log = logging.getLogger(__name__)


class DataError(RuntimeError):
    pass


class NumericalError(RuntimeError):
    pass


@dataclass
class Pair:
    noisy: Waveform
    clean: Waveform
    name: str = ""


def load_pairs(manifest_path) -> list[Pair]:
    """Pre-flight: every file must exist and agree with the manifest."""
    entries = read_manifest(manifest_path)
    if not entries:
        raise DataError(f"{manifest_path}: manifest is empty")
    problems = validate_manifest(entries)
    if problems:
        raise DataError("manifest pre-flight failed:\n  " + "\n  ".join(problems))
    pairs = []
    for e in entries:
        noisy, clean = read_wav(e.degraded_path), read_wav(e.clean_path)
        if len(noisy) != len(clean):
            raise DataError(f"{e.degraded_path}: {len(noisy)} samples but clean has {len(clean)}")
        pairs.append(Pair(noisy, clean, Path(e.degraded_path).name))
    return pairs


def crop(pair: Pair, n: int, rng: np.random.Generator):
    """Same random window from both signals; short pairs are zero-padded."""
    total = len(pair.clean)
    if total <= n:
        pad = (0, n - total)
        return np.pad(pair.noisy.samples, pad), np.pad(pair.clean.samples, pad)
    start = int(rng.integers(0, total - n + 1))
    return pair.noisy.samples[start:start + n], pair.clean.samples[start:start + n]


def cosine_lr(step: int, total: int, lr: float, min_fraction: float) -> float:
    progress = min(step, total) / max(total, 1)
    return lr * (min_fraction + (1 - min_fraction) * 0.5 * (1 + math.cos(math.pi * progress)))


class Trainer:
    def __init__(self, run: RunConfig, pairs: list[Pair], variant: Optional[str] = None):
        variant = variant or run.model.variant
        if variant != run.model.variant:
            raise ValueError(
                f"training variant {variant!r} does not match model.variant {run.model.variant!r} in the config"
            )
        if not pairs:
            raise DataError("no training pairs")
        self.run = run
        self.pairs = pairs
        self.variant = variant
        tc = run.training
        torch.manual_seed(tc.seed)
        self.model = USEMamba(run.model.build())
        self.opt = torch.optim.AdamW(self.model.parameters(), lr=tc.lr)
        self.rng = np.random.default_rng(tc.seed)
        self.gen = torch.Generator().manual_seed(tc.seed)
        self.step = 0
        self.history: list[float] = []
        self.weights, self.mr = run.loss.weights(), run.loss.multires()

    # -- one optimisation step ---------------------------------------------------

    def _example_loss(self, noisy: np.ndarray, clean: np.ndarray, rate: int):
        x = torch.from_numpy(np.asarray(noisy, dtype=np.float32))[None]
        s = torch.from_numpy(np.asarray(clean, dtype=np.float32))[None]
        if self.variant == "regression":
            wav, _, phase = regression_tensors(self.model, x, rate)
            ref_phase = reference_phase(s, self.model.cfg.stft, rate)
            return composite_loss(wav, phase, s, ref_phase, self.weights, self.mr)
        target, cond = flow_training_pair(self.model, s, x, rate)
        loss = cfm_loss(model_velocity_fn(self.model), target, cond, self.gen, self.run.flow.sigma_min)
        return loss, {"cfm": loss}

    def train_step(self) -> float:
        tc = self.run.training
        self.model.train()
        lr = cosine_lr(self.step, tc.steps, tc.lr, tc.min_lr_fraction)
        for group in self.opt.param_groups:
            group["lr"] = lr
        idx = self.rng.integers(0, len(self.pairs), size=tc.batch)
        total = 0.0
        parts_sum: dict = {}
        for i in idx:
            pair = self.pairs[int(i)]
            n = int(round(tc.segment_s * pair.clean.rate_hz))
            noisy, clean = crop(pair, n, self.rng)
            loss, parts = self._example_loss(noisy, clean, pair.clean.rate_hz)
            total = total + loss / tc.batch
            for k, v in parts.items():
                parts_sum[k] = parts_sum.get(k, 0.0) + float(v.detach()) / tc.batch
        value = float(total.detach())
        if not math.isfinite(value):
            raise NumericalError(
                f"non-finite loss at step {self.step} (lr={lr:.3g}, terms={parts_sum}, "
                f"examples={[self.pairs[int(i)].name for i in idx]})"
            )
        self.opt.zero_grad(set_to_none=True)
        total.backward()
        grad_norm = torch.nn.utils.clip_grad_norm_(self.model.parameters(), tc.grad_clip)
        if not torch.isfinite(grad_norm):
            raise NumericalError(f"non-finite gradient norm at step {self.step} (loss={value:.4g})")
        self.opt.step()
        self.step += 1
        self.history.append(value)
        self.last_parts = parts_sum
        return value

    # -- checkpoints -------------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(
            path, self.model,
            step=self.step,
            optimizer=self.opt.state_dict(),
            numpy_rng=self.rng.bit_generator.state,
            torch_rng=self.gen.get_state(),
            history=list(self.history),
            run_config=self.run.model_dump(mode="json"),
        )

    def restore(self, path) -> None:
        model, payload = load_checkpoint(path, expect_variant=self.variant)
        if model.cfg != self.model.cfg:
            raise ValueError(f"{path}: checkpoint model config differs from the run config")
        if "optimizer" not in payload:
            raise ValueError(f"{path}: checkpoint holds no training state and cannot be resumed")
        self.model.load_state_dict(model.state_dict())
        self.opt.load_state_dict(payload["optimizer"])
        self.rng.bit_generator.state = payload["numpy_rng"]
        self.gen.set_state(payload["torch_rng"])
        self.step = int(payload["step"])
        self.history = list(payload["history"])

    def fit(self, ckpt_dir=None, steps: Optional[int] = None) -> list[float]:
        """Train up to ``steps`` (default: the configured total)."""
        tc = self.run.training
        until = tc.steps if steps is None else steps
        log_file = None
        if ckpt_dir is not None:
            ckpt_dir = Path(ckpt_dir)
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            log_file = open(ckpt_dir / "train_log.jsonl", "a")
        try:
            while self.step < until:
                loss = self.train_step()
                if log_file is not None:
                    log_file.write(json.dumps({"step": self.step, "loss": loss, **self.last_parts}) + "\n")
                if self.step % tc.log_every == 0 or self.step == 1:
                    log.info("step %d loss %.5f", self.step, loss)
                if ckpt_dir is not None and (self.step % tc.checkpoint_every == 0 or self.step == until):
                    self.save(ckpt_dir / f"step_{self.step:06d}.pt")
                    self.save(ckpt_dir / "last.pt")
        finally:
            if log_file is not None:
                log_file.close()
        return self.history
