"""Feature-matching loss, a functional Adam, and the training loop.

The loss compares detector-backbone pyramids of the raw frame and the
restored frame: mean over the three maps of each map's MSE. The
detector stays frozen throughout; only the restoration network learns.

Batches are a pure function of (seed, step), so an interrupted run that
resumes from a checkpoint draws exactly the batches the uninterrupted
run would have drawn.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_network, read_archive, save_network, write_archive
from .detector import DetectorBackend, ToyBackend
from .errors import (
    CapabilityError,
    ConfigurationError,
    IngestionError,
    ShapeMismatchError,
    UsageError,
)
from .frames import check_aligned, check_frame
from .net import NetConfig, PostProcNet, build_network, frame_to_tensor
from .data import SequenceManifest, load_sequence


@dataclass
class LossConfig:
    backend: DetectorBackend
    aggregation: str = "mean-of-map-MSEs"

    def __post_init__(self):
        if self.aggregation != "mean-of-map-MSEs":
            raise ConfigurationError(
                f"unsupported aggregation {self.aggregation!r}; "
                "only 'mean-of-map-MSEs' is defined"
            )
        if not self.backend.differentiable:
            raise CapabilityError(
                f"training needs a differentiable backend, {self.backend.name!r} is not"
            )
        if not self.backend.supports_features:
            raise CapabilityError(
                f"backend {self.backend.name!r} does not provide features"
            )


def feature_loss_torch(raw: torch.Tensor, output: torch.Tensor,
                       backend) -> torch.Tensor:
    """Differentiable loss between two (N, 3, H, W) tensors."""
    if raw.shape != output.shape:
        raise ShapeMismatchError(
            f"raw and output shapes differ: {tuple(raw.shape)} vs {tuple(output.shape)}"
        )
    with torch.no_grad():
        target_maps = backend.features_torch(raw)
    out_maps = backend.features_torch(output)
    per_map = [torch.mean((t - o) ** 2) for t, o in zip(target_maps, out_maps)]
    return torch.stack(per_map).mean()


def feature_loss(raw, output, cfg: LossConfig) -> float:
    """Mean over the three pyramid maps of the per-map feature MSE.

    Zero exactly when the two frames produce identical pyramids, in
    particular whenever the frames are equal.
    """
    raw_f = check_frame(raw, "raw")
    out_f = check_frame(output, "output")
    if raw_f.shape != out_f.shape:
        raise ShapeMismatchError(
            f"raw and output shapes differ: {raw_f.shape} vs {out_f.shape}"
        )
    with torch.no_grad():
        loss = feature_loss_torch(
            frame_to_tensor(raw_f).double(),
            frame_to_tensor(out_f).double(),
            cfg.backend,
        )
    return float(loss)


@dataclass
class OptimizerState:
    """Adam state over an ordered list of parameter tensors."""

    step: int
    first_moments: list
    second_moments: list
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def initial(cls, params, lr: float = 1e-5, beta1: float = 0.9,
                beta2: float = 0.999, epsilon: float = 1e-8) -> "OptimizerState":
        shapes = [np.asarray(p) for p in params]
        return cls(
            step=0,
            first_moments=[np.zeros_like(p) for p in shapes],
            second_moments=[np.zeros_like(p) for p in shapes],
            lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon,
        )


def adam_update(params, grads, state: OptimizerState) -> tuple:
    """One bias-corrected Adam step; pure, returns (new params, new state).

    The update is elementwise, so partitioning parameters differently
    across tensors never changes the result.
    """
    params = [np.asarray(p) for p in params]
    grads = [np.asarray(g) for g in grads]
    if len(params) != len(grads) or len(params) != len(state.first_moments):
        raise ShapeMismatchError(
            f"got {len(params)} params, {len(grads)} grads, "
            f"{len(state.first_moments)} moment tensors"
        )
    for i, (p, g, m) in enumerate(zip(params, grads, state.first_moments)):
        if p.shape != g.shape or p.shape != np.asarray(m).shape:
            raise ShapeMismatchError(
                f"tensor {i}: param {p.shape}, grad {g.shape}, moment "
                f"{np.asarray(m).shape} must agree"
            )
    t = state.step + 1
    bias1 = 1.0 - state.beta1 ** t
    bias2 = 1.0 - state.beta2 ** t
    new_params = []
    new_m = []
    new_v = []
    for p, g, m, v in zip(params, grads, state.first_moments, state.second_moments):
        m_next = state.beta1 * m + (1.0 - state.beta1) * g
        v_next = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_hat = m_next / bias1
        v_hat = v_next / bias2
        new_params.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon))
        new_m.append(m_next)
        new_v.append(v_next)
    return new_params, replace(
        state, step=t, first_moments=new_m, second_moments=new_v
    )


@dataclass
class TrainRun:
    """Mutable state of one training run."""

    net: PostProcNet
    optimizer: OptimizerState
    loss: LossConfig
    batch_size: int = 8
    max_steps: int = 200
    seed: int = 0
    checkpoint_every: int = 100

    def __post_init__(self):
        for name in ("batch_size", "max_steps", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")


def train_step(run: TrainRun, batch) -> tuple:
    """One optimization step over a batch of (decoded, raw) frame pairs.

    Returns (run, loss value). Only network parameters move; the
    detector backend is left untouched.
    """
    batch = list(batch)
    if not batch:
        raise UsageError("train_step needs a nonempty batch")
    decoded = torch.stack([frame_to_tensor(check_frame(d, "decoded")).squeeze(0)
                           for d, _ in batch])
    raw = torch.stack([frame_to_tensor(check_frame(r, "raw")).squeeze(0)
                       for _, r in batch])
    if decoded.shape != raw.shape:
        raise ShapeMismatchError(
            f"decoded and raw batches differ: {tuple(decoded.shape)} vs {tuple(raw.shape)}"
        )
    net = run.net
    net.zero_grad(set_to_none=True)
    out = net(decoded)
    loss_t = feature_loss_torch(raw, out, run.loss.backend)
    loss_t.backward()
    params = [p.detach().numpy() for p in net.parameters()]
    grads = [np.zeros_like(p.detach().numpy()) if p.grad is None
             else p.grad.detach().numpy() for p in net.parameters()]
    new_params, run.optimizer = adam_update(params, grads, run.optimizer)
    with torch.no_grad():
        for p, new in zip(net.parameters(), new_params):
            p.copy_(torch.from_numpy(np.ascontiguousarray(new)))
    return run, float(loss_t.detach())


@dataclass
class TrainConfig:
    """Everything train() needs; CLI flags override these fields."""

    net: NetConfig = field(default_factory=NetConfig)
    lr: float = 1e-5
    batch_size: int = 8
    max_steps: int = 200
    seed: int = 0
    checkpoint_every: int = 100
    patch_size: int = 256
    qps: tuple | None = None
    out_dir: Path = Path("train-out")
    resume_from: Path | None = None
    backend_spec: str = "toy"

    def __post_init__(self):
        for name in ("batch_size", "max_steps", "checkpoint_every", "patch_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        self.out_dir = Path(self.out_dir)


def step_rng(seed: int, step: int) -> np.random.Generator:
    """The batch sampler for one step, independent of run history."""
    return np.random.default_rng(np.random.SeedSequence((seed, step)))


def _load_pairs(config: TrainConfig, manifest: SequenceManifest) -> list:
    pairs = []
    problems = []
    for entry in manifest.entries:
        qps = sorted(entry.decoded)
        if config.qps is not None:
            qps = [qp for qp in qps if qp in config.qps]
        if not qps:
            continue
        try:
            raw_seq = load_sequence(entry.raw, fps=entry.fps)
        except Exception as exc:
            problems.append(f"{entry.id}: {exc}")
            continue
        for qp in qps:
            try:
                dec_seq = load_sequence(entry.decoded[qp]["path"], fps=entry.fps)
                check_aligned(raw_seq, dec_seq)
            except Exception as exc:
                problems.append(f"{entry.id} qp {qp}: {exc}")
                continue
            pairs.append((raw_seq, dec_seq))
    if problems:
        raise IngestionError("could not assemble training pairs:\n  " + "\n  ".join(problems))
    if not pairs:
        raise IngestionError("manifest yields no (raw, decoded) training pairs")
    return pairs


def _sample_batch(pairs, patch_size: int, batch_size: int, rng) -> list:
    batch = []
    for _ in range(batch_size):
        raw_seq, dec_seq = pairs[int(rng.integers(len(pairs)))]
        size = min(patch_size, raw_seq.height, raw_seq.width)
        frame = int(rng.integers(raw_seq.frame_count))
        x = int(rng.integers(raw_seq.width - size + 1))
        y = int(rng.integers(raw_seq.height - size + 1))
        batch.append((
            dec_seq.frames[frame, y:y + size, x:x + size],
            raw_seq.frames[frame, y:y + size, x:x + size],
        ))
    return batch


def _state_path(ckpt_path: Path) -> Path:
    return ckpt_path.with_suffix(ckpt_path.suffix + ".state")


def save_optimizer_state(path, state: OptimizerState, names) -> Path:
    meta = {
        "format": "adamstate",
        "step": state.step,
        "lr": state.lr,
        "beta1": state.beta1,
        "beta2": state.beta2,
        "epsilon": state.epsilon,
    }
    tensors = {}
    for name, m in zip(names, state.first_moments):
        tensors[f"m/{name}"] = np.asarray(m, dtype=np.float32)
    for name, v in zip(names, state.second_moments):
        tensors[f"v/{name}"] = np.asarray(v, dtype=np.float32)
    return write_archive(path, meta, tensors)


def load_optimizer_state(path, names) -> OptimizerState:
    meta, tensors = read_archive(path)
    if meta.get("format") != "adamstate":
        raise IngestionError(f"{path}: not an optimizer state archive")
    return OptimizerState(
        step=int(meta["step"]),
        first_moments=[tensors[f"m/{n}"] for n in names],
        second_moments=[tensors[f"v/{n}"] for n in names],
        lr=float(meta["lr"]),
        beta1=float(meta["beta1"]),
        beta2=float(meta["beta2"]),
        epsilon=float(meta["epsilon"]),
    )


def train(config: TrainConfig, manifest: SequenceManifest) -> Path:
    """Train on every (raw, decoded) pair the manifest provides.

    Writes periodic checkpoints, a final checkpoint, and a CSV log with
    columns step,loss,seconds. Returns the final checkpoint path.
    """
    pairs = _load_pairs(config, manifest)
    out_dir = config.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    backend = ToyBackend() if config.backend_spec == "toy" else None
    if backend is None:
        from .detector import make_backend

        backend = make_backend(config.backend_spec)
    loss_cfg = LossConfig(backend=backend)
    if config.resume_from is not None:
        net = load_network(config.resume_from)
        names = [name for name, _ in net.named_parameters()]
        state = load_optimizer_state(_state_path(Path(config.resume_from)), names)
        start_step = state.step
    else:
        net = build_network(config.net, config.seed)
        names = [name for name, _ in net.named_parameters()]
        state = OptimizerState.initial(
            [p.detach().numpy() for _, p in net.named_parameters()], lr=config.lr
        )
        start_step = 0
    run = TrainRun(
        net=net,
        optimizer=state,
        loss=loss_cfg,
        batch_size=config.batch_size,
        max_steps=config.max_steps,
        seed=config.seed,
        checkpoint_every=config.checkpoint_every,
    )

    def write_checkpoint(step: int) -> Path:
        path = out_dir / f"checkpoint_{step:06d}.ckpt"
        save_network(path, run.net)
        save_optimizer_state(_state_path(path), run.optimizer, names)
        return path

    log_path = out_dir / "train_log.csv"
    started = time.monotonic()
    last_written = None
    final_path = None
    mode = "a" if (config.resume_from is not None and log_path.exists()) else "w"
    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if mode == "w":
            writer.writerow(["step", "loss", "seconds"])
        for step in range(start_step + 1, config.max_steps + 1):
            rng = step_rng(config.seed, step)
            batch = _sample_batch(pairs, config.patch_size, config.batch_size, rng)
            run, loss_value = train_step(run, batch)
            writer.writerow([step, f"{loss_value:.8f}", f"{time.monotonic() - started:.3f}"])
            if step % config.checkpoint_every == 0:
                final_path = write_checkpoint(step)
                last_written = step
    if last_written != run.optimizer.step:
        final_path = write_checkpoint(run.optimizer.step)
    if final_path is None:
        raise UsageError(
            f"nothing to train: run is already at step {start_step} of {config.max_steps}"
        )
    return final_path
