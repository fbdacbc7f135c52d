"""Training loop, checkpoint format and inference."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .datasets import DomainSuite, OpenSample, SplitSpec, sample_batch, source_pool, steps_per_epoch
from .encoders import DTYPE, EncoderBackend, images_to_tensor
from .errors import CheckpointError, ConfigurationError, DataError, DivergenceError
from .latentspace import DEFAULT_WIDTHS, FuseProjector, Upsampler
from .model import ODGModel
from .objectives import posterior_from_cos, total_loss
from .promptspace import POSITIONS, init_prompt_state

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"ODGCKPT\x00"


@dataclass
class TrainConfig:
    epochs: int = 10
    base_lr: float = 0.01
    warmup_fraction: float = 0.1
    batch_size: int = 32
    open_fraction: float = 0.25
    tau: float = 0.01
    seed: int = 0
    steps_per_epoch: int | None = None  # None: ceil(|real pool| / real slots per batch)
    max_steps: int | None = None
    use_sem: bool = True
    use_xhat: bool = True
    manual_xhat: bool = False
    pp_only: bool = False  # recorded here; acted on by the open-pool builder
    init_mode: str = "phrase"
    dom_token_position: str = "front"
    n_ctx_cls: int = 4
    n_ctx_dom: int = 4
    upsampler_widths: tuple[int, ...] = DEFAULT_WIDTHS

    def __post_init__(self):
        self.upsampler_widths = tuple(self.upsampler_widths)
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if not self.base_lr > 0:
            raise ConfigurationError("base_lr must be > 0")
        if self.batch_size < 4:
            raise ConfigurationError("batch_size must be >= 4")
        if not 0.0 <= self.open_fraction < 1.0:
            raise ConfigurationError("open_fraction must lie in [0, 1)")
        if not self.tau > 0:
            raise ConfigurationError("tau must be > 0")
        if self.init_mode not in ("phrase", "gaussian"):
            raise ConfigurationError(f"init_mode must be 'phrase' or 'gaussian', got {self.init_mode!r}")
        if self.dom_token_position not in POSITIONS:
            raise ConfigurationError(f"dom_token_position must be one of {POSITIONS}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["upsampler_widths"] = list(self.upsampler_widths)
        return d


# -- schedule --------------------------------------------------------------------


def lr_at(step: int, total: int, base_lr: float, warmup_fraction: float = 0.1) -> float:
    """Linear warm-up to ``base_lr`` over the first steps, then cosine decay to 0."""
    warm = max(1, math.ceil(warmup_fraction * total))
    if step < warm:
        return base_lr * (step + 1) / warm
    span = max(1, total - warm)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * (step - warm) / span))


# -- model construction ---------------------------------------------------------


def build_model(backend: EncoderBackend, class_names: Sequence[str], config: TrainConfig) -> ODGModel:
    state = init_prompt_state(backend, class_names, config.init_mode, config.seed,
                              config.n_ctx_cls, config.n_ctx_dom, position=config.dom_token_position)
    ups = Upsampler(backend.d_t, config.upsampler_widths, seed=config.seed)
    proj = FuseProjector(seed=config.seed)
    return ODGModel(backend, state, ups, proj, use_xhat=config.use_xhat, manual_xhat=config.manual_xhat)


# -- checkpoints -----------------------------------------------------------------


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def labels(self) -> list[str]:
        return list(self.meta["labels"])

    @property
    def config(self) -> TrainConfig:
        return TrainConfig(**self.meta["config"])

    @classmethod
    def from_model(cls, model: ODGModel, config: TrainConfig, extra: dict | None = None,
                   optimizer: torch.optim.Optimizer | None = None) -> "Checkpoint":
        tensors = {}
        for section, mod in model.modules().items():
            for name, t in mod.state_dict().items():
                if section == "prompt_state" and name == "class_table":
                    continue  # derived from the backend
                tensors[f"{section}/{name}"] = t.detach().cpu().numpy().copy()
        if optimizer is not None:
            names = list(model.trainables())
            for i, (pname, p) in enumerate(zip(names, optimizer.param_groups[0]["params"])):
                st = optimizer.state.get(p)
                if st:
                    tensors[f"optimizer/{pname}/exp_avg"] = st["exp_avg"].numpy().copy()
                    tensors[f"optimizer/{pname}/exp_avg_sq"] = st["exp_avg_sq"].numpy().copy()
                    tensors[f"optimizer/{pname}/step"] = np.array(float(st["step"]))
        meta = {
            "format_version": FORMAT_VERSION,
            "labels": list(model.class_names),
            "config": config.to_dict(),
            "backend": model.backend.descriptor(),
            "position": model.state.position,
        }
        meta.update(extra or {})
        return cls(tensors, meta)

    def to_model(self, backend: EncoderBackend) -> ODGModel:
        if "backend" in self.meta and self.meta["backend"] != backend.descriptor():
            raise CheckpointError(f"checkpoint was trained on backend {self.meta['backend']}, "
                                  f"got {backend.descriptor()}")
        cfg = self.config
        model = build_model(backend, self.labels, cfg)
        for section, mod in model.modules().items():
            sd = mod.state_dict()
            for name in sd:
                key = f"{section}/{name}"
                if key in self.tensors:
                    sd[name] = torch.as_tensor(self.tensors[key], dtype=DTYPE)
                elif not (section == "prompt_state" and name == "class_table"):
                    raise CheckpointError(f"checkpoint lacks tensor {key}")
            mod.load_state_dict(sd)
        return model

    def to_bytes(self) -> bytes:
        entries, blobs, offset = [], [], 0
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name], dtype="<f8")
            raw = arr.tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        payload = b"".join(blobs)
        header = json.dumps({"tensors": entries, "meta": self.meta,
                             "payload_sha256": hashlib.sha256(payload).hexdigest()},
                            sort_keys=True, separators=(",", ":")).encode()
        return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < len(MAGIC) + 12 or data[: len(MAGIC)] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version, hlen = struct.unpack("<IQ", data[len(MAGIC): len(MAGIC) + 12])
        if version != FORMAT_VERSION:
            raise CheckpointError(f"checkpoint format version {version} != supported {FORMAT_VERSION}")
        start = len(MAGIC) + 12
        try:
            header = json.loads(data[start: start + hlen])
        except ValueError as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
        payload = data[start + hlen:]
        if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
            raise CheckpointError("checkpoint payload digest mismatch (file truncated or corrupt)")
        tensors = {}
        for e in header["tensors"]:
            raw = payload[e["offset"]: e["offset"] + e["nbytes"]]
            tensors[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).copy()
        return cls(tensors, header["meta"])


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(ckpt.to_bytes())
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return Checkpoint.from_bytes(path.read_bytes())


# -- training --------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: ODGModel
    log: list[dict]


def _log_digest(lines: list[str]) -> str:
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()


def train(
    split: SplitSpec,
    suite: DomainSuite,
    open_pool: Sequence[OpenSample],
    backend: EncoderBackend,
    config: TrainConfig,
    log_path: str | Path | None = None,
    resume_path: str | Path | None = None,
    epoch_checkpoint: str | Path | None = None,
) -> TrainResult:
    """Fit prompts, domain projector, upsampler and fuse projector on ``split``.

    The backend is never updated. Per-step losses go to ``log_path`` (JSONL)
    when given. With ``epoch_checkpoint`` a resumable checkpoint is written
    after every epoch (a ``{step}`` field in the path keeps one file per
    epoch); ``resume_path`` continues from one.
    """
    open_pool = list(open_pool)
    if config.open_fraction > 0 and not open_pool:
        raise DataError("open_fraction > 0 but the pseudo-open pool is empty")
    real = source_pool(suite, split)
    if not real:
        raise DataError(f"split with target {split.target!r} has no training samples")

    model = build_model(backend, split.augmented_labels, config)
    params = list(model.trainables().values())
    opt = torch.optim.Adam(params, lr=config.base_lr)
    rng = np.random.default_rng(config.seed)
    spe = config.steps_per_epoch or steps_per_epoch(len(real), config.batch_size, config.open_fraction)
    total = config.epochs * spe
    if config.max_steps is not None:
        total = min(total, config.max_steps)
    lines: list[str] = []
    start = 0

    if resume_path is not None:
        ck = load_checkpoint(resume_path)
        if ck.meta.get("config") != config.to_dict() or ck.labels != list(split.augmented_labels):
            raise CheckpointError("resume checkpoint was written under a different config or label set")
        model = ck.to_model(backend)
        params = list(model.trainables().values())
        opt = torch.optim.Adam(params, lr=config.base_lr)
        for pname, p in model.trainables().items():
            key = f"optimizer/{pname}"
            if f"{key}/exp_avg" in ck.tensors:
                opt.state[p] = {
                    "step": torch.tensor(ck.tensors[f"{key}/step"].item()),
                    "exp_avg": torch.as_tensor(ck.tensors[f"{key}/exp_avg"]).clone(),
                    "exp_avg_sq": torch.as_tensor(ck.tensors[f"{key}/exp_avg_sq"]).clone(),
                }
        rng.bit_generator.state = ck.meta["rng_state"]
        start = ck.meta["step"]
        lines = list(ck.meta["log_lines"])

    before = backend.param_hash()
    log_file = open(log_path, "a" if resume_path else "w") if log_path else None
    try:
        for step in range(start, total):
            lr = lr_at(step, total, config.base_lr, config.warmup_fraction)
            for g in opt.param_groups:
                g["lr"] = lr
            batch = sample_batch(split, real, open_pool, config.batch_size, config.open_fraction, rng)
            rep = total_loss(model, batch, config.tau, use_sem=config.use_sem)
            if not torch.isfinite(rep.total):
                raise DivergenceError(
                    f"non-finite loss at step {step}: l_con={rep.l_con.item()} l_sem={rep.l_sem.item()} lr={lr}")
            opt.zero_grad(set_to_none=True)
            rep.total.backward()
            opt.step()
            rec = {"step": step, **rep.as_dict(), "lr": lr}
            line = json.dumps(rec, sort_keys=True)
            lines.append(line)
            if log_file:
                log_file.write(line + "\n")
            done = step + 1
            if epoch_checkpoint is not None and (done % spe == 0 or done == total):
                snap = Checkpoint.from_model(model, config, optimizer=opt, extra={
                    "step": done, "rng_state": rng.bit_generator.state, "log_lines": lines})
                save_checkpoint(snap, str(epoch_checkpoint).format(step=done))
    finally:
        if log_file:
            log_file.close()
    if backend.param_hash() != before:
        raise RuntimeError("backend parameters changed during training")

    extra = {"steps": total, "steps_per_epoch": spe, "log_digest": _log_digest(lines),
             "target": split.target, "sources": list(split.sources)}
    return TrainResult(Checkpoint.from_model(model, config, extra=extra), model, [json.loads(x) for x in lines])


# -- inference -------------------------------------------------------------------


@torch.no_grad()
def posteriors(model: ODGModel, images, tau: float, chunk: int = 64) -> np.ndarray:
    """``(B, |Y_aug|)`` posteriors for a stack of ``H x W x 3`` images."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    out = []
    for i in range(0, len(images), chunk):
        x = images_to_tensor(images[i: i + chunk])
        out.append(posterior_from_cos(model(x).cos, tau).numpy())
    return np.concatenate(out)


def argmax_lowest(probs: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest index."""
    return np.argmax(np.asarray(probs), axis=-1)


def predict(checkpoint: Checkpoint | ODGModel, backend: EncoderBackend, image,
            labels: Sequence[str] | None = None, tau: float | None = None):
    """Predicted label(s) and posterior(s) for one image or a stack of images."""
    if isinstance(checkpoint, Checkpoint):
        if labels is not None and list(labels) != checkpoint.labels:
            raise CheckpointError("label ordering does not match the checkpoint")
        tau = tau if tau is not None else checkpoint.config.tau
        model = checkpoint.to_model(backend)
    else:
        model = checkpoint
        if labels is not None and list(labels) != model.class_names:
            raise CheckpointError("label ordering does not match the model")
        if tau is None:
            raise ConfigurationError("tau is required when predicting with a bare model")
    single = np.asarray(image).ndim == 3
    probs = posteriors(model, image, tau)
    idx = argmax_lowest(probs)
    names = [model.class_names[i] for i in idx]
    if single:
        return names[0], probs[0]
    return names, probs
