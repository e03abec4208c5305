"""Training loop for masked latent prediction with a momentum target.

One training step, in order:

1. sample a mask plan per clip (stateless in ``(seed, step, clip)``),
2. encode visible tokens with the online encoder,
3. predict every grid slot from the visible representations plus the
   shared mask token, keep the masked-slot predictions,
4. encode the target input with the momentum encoder under stop-gradient
   (masked tokens only by default; all tokens in the conventional
   ablation mode), standardize the masked-slot outputs,
5. compute the normalized-MSE loss between prediction and target,
6. optimizer step on the online parameters only,
7. EMA update of the target encoder from the new online encoder.

The pixel-reconstruction baseline shares the encoder, masking, and
decoder geometry but regresses per-patch-normalized pixel values and has
no target network.

All randomness (init, masking, batch order hooks) is derived from the
configured seed, so identical seeds reproduce identical runs and resume
from a checkpoint is exact.
"""

from __future__ import annotations

import copy
import json
import math
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbone import EncoderConfig, PatchEncoder, Predictor, PredictorConfig, predict_all_slots
from .checkpoint import load_archive, save_archive
from .patches import InputGrid, MaskPlan, ShapeSpec, partition, positional_encoding, sample_mask

__all__ = [
    "EmaSchedule",
    "TrainConfig",
    "LossReport",
    "StepTrace",
    "tau_at",
    "lr_at",
    "standardize",
    "ema_update",
    "masked_prediction_loss",
    "derive_seed",
    "DuoTrainer",
    "load_encoder",
]


@dataclass(frozen=True)
class EmaSchedule:
    """Linear decay-rate ramp for the momentum encoder."""

    tau_start: float = 0.99995
    tau_end: float = 0.99999
    total_steps: int = 1

    def __post_init__(self):
        if not 0.0 <= self.tau_start <= self.tau_end <= 1.0:
            raise ValueError(f"need 0 <= tau_start <= tau_end <= 1, got {self.tau_start}, {self.tau_end}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def tau_at(schedule: EmaSchedule, step: int) -> float:
    """Decay rate at ``step``: linear from tau_start (0) to tau_end (total)."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    frac = step / schedule.total_steps
    return schedule.tau_start + (schedule.tau_end - schedule.tau_start) * frac


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to zero, per step."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainConfig:
    """Pre-training hyperparameters.

    The defaults are the full-scale recipe (300 epochs, 20 warmup, batch
    2048, base lr 3e-4, masking ratio 0.6, tau 0.99995 -> 0.99999); the
    test suite overrides them with desk-scale values.  ``target_input``
    switches the ablation between feeding the momentum encoder only the
    masked tokens (default) and feeding it all tokens while still
    comparing at the masked slots.  ``standardize_axis`` picks the axis
    of the target standardization: "token" (per-vector, default) or
    "feature" (per-feature over the batch).
    """

    objective: str = "m2d"
    target_input: str = "masked_only"
    masking_ratio: float = 0.6
    epochs: int = 300
    warmup_epochs: int = 20
    batch_size: int = 2048
    base_lr: float = 3e-4
    weight_decay: float = 0.05
    tau_start: float = 0.99995
    tau_end: float = 0.99999
    standardize_axis: str = "token"
    seed: int = 0

    def __post_init__(self):
        if self.objective not in ("m2d", "mae_reconstruction"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.target_input not in ("masked_only", "all_patches"):
            raise ValueError(f"unknown target_input {self.target_input!r}")
        if not 0.0 <= self.masking_ratio <= 1.0:
            raise ValueError(f"masking ratio must be in [0, 1], got {self.masking_ratio}")
        if self.standardize_axis not in ("token", "feature"):
            raise ValueError(f"unknown standardize_axis {self.standardize_axis!r}")

    @classmethod
    def paper_preset(cls) -> "TrainConfig":
        return cls()

    @classmethod
    def baseline_preset(cls) -> "TrainConfig":
        # reconstruction baseline keeps its conventional 0.75 ratio
        return cls(objective="mae_reconstruction", masking_ratio=0.75)


@dataclass
class LossReport:
    """Per-step record; mirrors one line of the JSON metrics stream.

    ``target_feature_var`` is the across-token variance of the
    standardized target features (averaged over features); values near
    zero mean the target representations have collapsed.  Both target
    fields are None for the reconstruction baseline, which has no target
    network.
    """

    step: int
    loss: float
    tau: float | None
    lr: float
    target_feature_mean: float | None
    target_feature_var: float | None
    objective: str = "m2d"

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class StepTrace:
    """Instrumentation for one step: which indices went where."""

    plans: list[MaskPlan]
    target_indices: list[np.ndarray]
    target_input: str


def standardize(z: torch.Tensor, axis: str = "token", eps: float = 1e-6) -> torch.Tensor:
    """Shift/scale target representations to zero mean, unit variance.

    axis="token": statistics over the feature axis, independently per
    token (default).  axis="feature": statistics over all tokens in the
    batch, independently per feature.  ``eps`` floors the variance so
    constant inputs map to zero.
    """
    if z.shape[-2] * z.shape[-1] == 0:
        raise ValueError("cannot standardize an empty representation")
    if axis == "token":
        mean = z.mean(dim=-1, keepdim=True)
        var = z.var(dim=-1, unbiased=False, keepdim=True)
    elif axis == "feature":
        flat = z.reshape(-1, z.shape[-1])
        mean = flat.mean(dim=0)
        var = flat.var(dim=0, unbiased=False)
    else:
        raise ValueError(f"unknown standardize axis {axis!r}")
    return (z - mean) / torch.sqrt(var + eps)


def masked_prediction_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over tokens of ``||l2(pred_i) - l2(target_i)||^2``.

    Identically ``2 - 2 cos(pred_i, target_i)`` per token, so the value
    lies in [0, 4].  Rejects empty inputs and zero-norm vectors (which
    cannot be l2-normalized).
    """
    if pred.shape != target.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if pred.numel() == 0:
        raise ValueError("loss needs at least one masked token")
    pred_norm = pred.norm(dim=-1, keepdim=True)
    target_norm = target.norm(dim=-1, keepdim=True)
    if (pred_norm == 0).any() or (target_norm == 0).any():
        raise ValueError("cannot l2-normalize a zero-norm vector in the loss")
    diff = pred / pred_norm - target / target_norm
    return diff.square().sum(dim=-1).mean()


def ema_update(target: nn.Module, online: nn.Module, tau: float) -> None:
    """In-place ``xi <- tau * xi + (1 - tau) * theta`` over matching params."""
    t_params = dict(target.named_parameters())
    o_params = dict(online.named_parameters())
    if t_params.keys() != o_params.keys():
        raise ValueError("target and online parameter sets are not congruent")
    with torch.no_grad():
        for name, tp in t_params.items():
            op = o_params[name]
            if tp.shape != op.shape:
                raise ValueError(f"shape mismatch at {name}: {tuple(tp.shape)} vs {tuple(op.shape)}")
            tp.mul_(tau).add_(op.detach(), alpha=1.0 - tau)


def derive_seed(*parts: int) -> int:
    """Stable scalar seed from integer parts (stateless per-step masking)."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


class DuoTrainer:
    """Owns the online network, the momentum target, and the optimizer.

    Single-writer: one trainer instance mutates its parameters; forward
    helpers never touch state.  ``steps_per_epoch`` fixes the schedule
    length (total steps = epochs * steps_per_epoch).
    """

    def __init__(
        self,
        shape: ShapeSpec,
        channels: int,
        encoder_cfg: EncoderConfig,
        predictor_cfg: PredictorConfig,
        train_cfg: TrainConfig,
        steps_per_epoch: int = 1,
        dtype: torch.dtype = torch.float32,
        out_dir=None,
        metrics_path=None,
        preprocess_meta: dict | None = None,
    ):
        if shape.dim != encoder_cfg.width:
            raise ValueError(f"shape.dim {shape.dim} != encoder width {encoder_cfg.width}")
        if steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")
        self.shape = shape
        self.channels = channels
        self.encoder_cfg = encoder_cfg
        self.predictor_cfg = predictor_cfg
        self.cfg = train_cfg
        self.steps_per_epoch = steps_per_epoch
        self.total_steps = max(1, train_cfg.epochs * steps_per_epoch)
        self.warmup_steps = train_cfg.warmup_epochs * steps_per_epoch
        self.dtype = dtype
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.metrics_path = Path(metrics_path) if metrics_path is not None else None
        self.preprocess_meta = preprocess_meta or {}
        self.ema = EmaSchedule(train_cfg.tau_start, train_cfg.tau_end, self.total_steps)
        self.step = 0
        self.last_trace: StepTrace | None = None

        patch_dim = shape.patch_size**2 * channels
        torch.manual_seed(train_cfg.seed)
        self.encoder = PatchEncoder(patch_dim, encoder_cfg).to(dtype)
        out_dim = encoder_cfg.width if train_cfg.objective == "m2d" else patch_dim
        self.predictor = Predictor(encoder_cfg.width, predictor_cfg, out_dim).to(dtype)
        self.mask_token = nn.Parameter(torch.zeros(encoder_cfg.width, dtype=dtype))
        nn.init.trunc_normal_(self.mask_token, std=0.02)

        if train_cfg.objective == "m2d":
            self.target_encoder = copy.deepcopy(self.encoder)
            self.target_encoder.requires_grad_(False)
        else:
            self.target_encoder = None

        params = [
            {"params": self.encoder.parameters()},
            {"params": self.predictor.parameters()},
            {"params": [self.mask_token]},
        ]
        self.optimizer = torch.optim.AdamW(
            params, lr=train_cfg.base_lr, betas=(0.9, 0.95), weight_decay=train_cfg.weight_decay
        )
        self.positions = torch.from_numpy(positional_encoding(shape)).to(dtype)

    # ----- data plumbing ---------------------------------------------------

    def tokens_from_grids(self, batch) -> torch.Tensor:
        """Tokenize a batch of grids into a (B, N, patch_dim) tensor."""
        if isinstance(batch, np.ndarray):
            if batch.ndim == 3:
                batch = batch[:, None]
            batch = [InputGrid(b, kind="image" if b.shape[0] == 3 else "spectrogram") for b in batch]
        rows = []
        for grid in batch:
            seq = partition(grid, self.shape.patch_size, dim=self.shape.dim)
            if (seq.shape.n_freq, seq.shape.n_time) != (self.shape.n_freq, self.shape.n_time):
                raise ValueError(
                    f"grid tokenizes to {seq.shape.n_freq}x{seq.shape.n_time}, trainer expects "
                    f"{self.shape.n_freq}x{self.shape.n_time}"
                )
            rows.append(seq.tokens)
        return torch.from_numpy(np.stack(rows)).to(self.dtype)

    def sample_batch_plans(self, batch_size: int, step: int | None = None) -> list[MaskPlan]:
        """One plan per clip, a pure function of (seed, step, clip index)."""
        step = self.step if step is None else step
        n = self.shape.n_patches
        return [
            sample_mask(n, self.cfg.masking_ratio, derive_seed(self.cfg.seed, step, clip))
            for clip in range(batch_size)
        ]

    @staticmethod
    def _index_tensors(plans: list[MaskPlan]) -> tuple[torch.Tensor, torch.Tensor]:
        vis = torch.from_numpy(np.stack([p.visible for p in plans])).long()
        masked = torch.from_numpy(np.stack([p.masked for p in plans])).long()
        return vis, masked

    @staticmethod
    def _gather(rows: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
        return rows.gather(1, idx.unsqueeze(-1).expand(-1, -1, rows.shape[-1]))

    # ----- forward paths ---------------------------------------------------

    def forward_loss(self, tokens: torch.Tensor, plans: list[MaskPlan]):
        """Loss and diagnostics for one batch under fixed mask plans.

        Pure in the parameters (no optimizer or EMA side effects), so it
        doubles as the objective for gradient checking.  Returns
        ``(loss, stats dict)``.
        """
        if self.cfg.objective == "m2d":
            return self._m2d_forward(tokens, plans)
        return self._reconstruction_forward(tokens, plans)

    def _m2d_forward(self, tokens: torch.Tensor, plans: list[MaskPlan]):
        vis_idx, mask_idx = self._index_tensors(plans)
        if mask_idx.shape[1] == 0:
            raise ValueError("latent-prediction objective needs at least one masked token per clip")
        pos = self.positions
        z_visible = self.encoder(self._gather(tokens, vis_idx), pos[vis_idx])
        predicted = predict_all_slots(
            z_visible, vis_idx, mask_idx, pos, self.mask_token, self.predictor
        )
        predicted_masked = self._gather(predicted, mask_idx)

        with torch.no_grad():
            if self.cfg.target_input == "masked_only":
                target_idx = mask_idx
                target_out = self.target_encoder(self._gather(tokens, mask_idx), pos[mask_idx])
                target_masked = target_out
            else:
                target_idx = torch.arange(self.shape.n_patches).expand(tokens.shape[0], -1)
                target_out = self.target_encoder(tokens, pos)
                target_masked = self._gather(target_out, mask_idx)
            target_std = standardize(target_masked, self.cfg.standardize_axis)

        self.last_trace = StepTrace(
            plans=plans,
            target_indices=[row.numpy().copy() for row in target_idx],
            target_input=self.cfg.target_input,
        )
        if self.cfg.target_input == "masked_only":
            for plan, fed in zip(plans, self.last_trace.target_indices):
                assert not np.intersect1d(fed, plan.visible).size, (
                    "visible-index token leaked into the target encoder"
                )

        loss = masked_prediction_loss(predicted_masked, target_std)
        flat = target_std.reshape(-1, target_std.shape[-1])
        stats = {
            "target_feature_mean": float(flat.mean()),
            "target_feature_var": float(flat.var(dim=0, unbiased=False).mean()),
        }
        return loss, stats

    def _reconstruction_forward(self, tokens: torch.Tensor, plans: list[MaskPlan]):
        vis_idx, mask_idx = self._index_tensors(plans)
        if mask_idx.shape[1] == 0:
            raise ValueError("reconstruction objective needs at least one masked token per clip")
        pos = self.positions
        z_visible = self.encoder(self._gather(tokens, vis_idx), pos[vis_idx])
        recon = predict_all_slots(z_visible, vis_idx, mask_idx, pos, self.mask_token, self.predictor)
        recon_masked = self._gather(recon, mask_idx)

        raw = self._gather(tokens, mask_idx)
        mean = raw.mean(dim=-1, keepdim=True)
        var = raw.var(dim=-1, unbiased=False, keepdim=True)
        target = (raw - mean) / torch.sqrt(var + 1e-6)

        self.last_trace = StepTrace(plans=plans, target_indices=[], target_input="none")
        loss = (recon_masked - target).square().mean()
        return loss, {"target_feature_mean": None, "target_feature_var": None}

    # ----- the step itself -------------------------------------------------

    def training_step(self, batch) -> LossReport:
        """Run one optimizer step on a batch of grids; returns the report."""
        if self.step >= self.total_steps:
            raise RuntimeError(
                f"step {self.step} is past the scheduled {self.total_steps} total steps"
            )
        tokens = self.tokens_from_grids(batch)
        plans = self.sample_batch_plans(tokens.shape[0])
        loss, stats = self.forward_loss(tokens, plans)

        loss_value = float(loss.detach())
        if not math.isfinite(loss_value):
            dump = self._dump_state("abort_dump.npz")
            raise RuntimeError(f"non-finite loss {loss_value} at step {self.step}; state dumped to {dump}")

        lr = lr_at(self.step, self.total_steps, self.warmup_steps, self.cfg.base_lr)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()

        tau = None
        if self.cfg.objective == "m2d":
            tau = tau_at(self.ema, self.step)
            ema_update(self.target_encoder, self.encoder, tau)

        report = LossReport(
            step=self.step,
            loss=loss_value,
            tau=tau,
            lr=lr,
            target_feature_mean=stats["target_feature_mean"],
            target_feature_var=stats["target_feature_var"],
            objective=self.cfg.objective,
        )
        self.step += 1
        if self.metrics_path is not None:
            with open(self.metrics_path, "a") as fh:
                fh.write(report.to_json() + "\n")
        return report

    # ----- persistence -----------------------------------------------------

    def _state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {}
        for name, tensor in self.encoder.state_dict().items():
            arrays[f"encoder/{name}"] = tensor.detach().numpy().copy()
        for name, tensor in self.predictor.state_dict().items():
            arrays[f"predictor/{name}"] = tensor.detach().numpy().copy()
        arrays["mask_token"] = self.mask_token.detach().numpy().copy()
        if self.target_encoder is not None:
            for name, tensor in self.target_encoder.state_dict().items():
                arrays[f"target/{name}"] = tensor.detach().numpy().copy()
        state = self.optimizer.state_dict()["state"]
        for idx, entry in state.items():
            for key, value in entry.items():
                arrays[f"opt/{idx}/{key}"] = (
                    value.detach().numpy().copy() if torch.is_tensor(value) else np.asarray(value)
                )
        return arrays

    def _meta(self) -> dict:
        return {
            "shape": asdict(self.shape),
            "channels": self.channels,
            "encoder_cfg": asdict(self.encoder_cfg),
            "predictor_cfg": asdict(self.predictor_cfg),
            "train_cfg": asdict(self.cfg),
            "steps_per_epoch": self.steps_per_epoch,
            "step": self.step,
            "dtype": str(self.dtype).replace("torch.", ""),
            "preprocess": self.preprocess_meta,
        }

    def save_checkpoint(self, path) -> Path:
        """Full resume state: online + target params, optimizer, step counter."""
        return save_archive(path, self._state_arrays(), kind="trainer_state", extra=self._meta())

    def _dump_state(self, name: str) -> Path:
        base = self.out_dir if self.out_dir is not None else Path(tempfile.gettempdir())
        return self.save_checkpoint(base / name)

    @classmethod
    def restore(cls, path, metrics_path=None, out_dir=None) -> "DuoTrainer":
        """Rebuild a trainer from :meth:`save_checkpoint` output, exactly."""
        arrays, meta = load_archive(path)
        if meta.get("kind") != "trainer_state":
            raise ValueError(f"{path} is not a trainer checkpoint (kind={meta.get('kind')!r})")
        trainer = cls(
            shape=ShapeSpec(**meta["shape"]),
            channels=meta["channels"],
            encoder_cfg=EncoderConfig(**meta["encoder_cfg"]),
            predictor_cfg=PredictorConfig(**meta["predictor_cfg"]),
            train_cfg=TrainConfig(**meta["train_cfg"]),
            steps_per_epoch=meta["steps_per_epoch"],
            dtype=getattr(torch, meta["dtype"]),
            out_dir=out_dir,
            metrics_path=metrics_path,
            preprocess_meta=meta.get("preprocess") or {},
        )
        trainer.step = meta["step"]
        trainer._load_module("encoder/", trainer.encoder, arrays)
        trainer._load_module("predictor/", trainer.predictor, arrays)
        with torch.no_grad():
            trainer.mask_token.copy_(torch.from_numpy(arrays["mask_token"]))
        if trainer.target_encoder is not None:
            trainer._load_module("target/", trainer.target_encoder, arrays)
        trainer._load_optimizer(arrays)
        return trainer

    @staticmethod
    def _load_module(prefix: str, module: nn.Module, arrays: dict[str, np.ndarray]) -> None:
        state = {
            name[len(prefix):]: torch.from_numpy(arr.copy())
            for name, arr in arrays.items()
            if name.startswith(prefix)
        }
        module.load_state_dict(state)

    def _load_optimizer(self, arrays: dict[str, np.ndarray]) -> None:
        state: dict[int, dict] = {}
        for name, arr in arrays.items():
            if not name.startswith("opt/"):
                continue
            _, idx, key = name.split("/", 2)
            state.setdefault(int(idx), {})[key] = torch.from_numpy(arr.copy())
        if state:
            sd = self.optimizer.state_dict()
            sd["state"] = state
            self.optimizer.load_state_dict(sd)

    def export_encoder(self, path) -> Path:
        """Archive the online encoder only, with grid/provenance header.

        The archive restores a bitwise-identical encoder via
        :func:`load_encoder`; predictor, mask token, target network, and
        optimizer state are deliberately left out.
        """
        arrays = {
            f"encoder/{name}": tensor.detach().numpy().copy()
            for name, tensor in self.encoder.state_dict().items()
        }
        extra = {
            "shape": asdict(self.shape),
            "channels": self.channels,
            "encoder_cfg": asdict(self.encoder_cfg),
            "masking_ratio": self.cfg.masking_ratio,
            "ema": {"tau_start": self.cfg.tau_start, "tau_end": self.cfg.tau_end,
                    "total_steps": self.total_steps},
            "objective": self.cfg.objective,
            "step": self.step,
            "dtype": str(self.dtype).replace("torch.", ""),
            "preprocess": self.preprocess_meta,
        }
        return save_archive(path, arrays, kind="encoder", extra=extra)


def load_encoder(path) -> tuple[PatchEncoder, ShapeSpec, dict]:
    """Rebuild an exported encoder; returns (encoder, grid shape, header)."""
    arrays, meta = load_archive(path)
    if meta.get("kind") != "encoder":
        raise ValueError(f"{path} is not an encoder archive (kind={meta.get('kind')!r})")
    shape = ShapeSpec(**meta["shape"])
    cfg = EncoderConfig(**meta["encoder_cfg"])
    patch_dim = shape.patch_size**2 * meta["channels"]
    encoder = PatchEncoder(patch_dim, cfg).to(getattr(torch, meta["dtype"]))
    state = {
        name[len("encoder/"):]: torch.from_numpy(arr.copy())
        for name, arr in arrays.items()
        if name.startswith("encoder/")
    }
    encoder.load_state_dict(state)
    encoder.eval()
    return encoder, shape, meta
