"""Supervised training, validation, checkpointing and the pipeline gradient check."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import dsp
from .errors import ConfigError, DataError, NumericalError
from .model import ModelConfig, ModelParams, forward, init_params
from .model.checkpoint import load_tensors, save_tensors
from .numerics import Tape, Tensor, grad_check, ops
from .objectives import LossConfig, log_mse_db, score_utterance, si_sdr_db, summarize
from .scenesim import TrainingPair

log = logging.getLogger(__name__)

MAX_SKIPPED_STEPS = 10


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 5e-4
    lr_halve_patience: int = 2
    max_epochs: int = 100
    max_steps: int | None = None
    batch_size: int = 2
    grad_clip_l2: float = 5.0
    loss: LossConfig = LossConfig()
    neg_fraction: float | None = None  # None: 0.1 under log_mse, 0 under si_sdr
    seed: int = 0
    min_improvement_db: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.neg_fraction is None:
            object.__setattr__(self, "neg_fraction", 0.1 if self.loss.kind == "log_mse" else 0.0)
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if self.lr_halve_patience < 1:
            raise ConfigError("lr_halve_patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1 when set")
        if self.grad_clip_l2 <= 0:
            raise ConfigError("grad_clip_l2 must be positive")
        if not 0 <= self.neg_fraction < 1:
            raise ConfigError(f"neg_fraction must be in [0, 1), got {self.neg_fraction}")
        if self.loss.kind == "si_sdr" and self.neg_fraction > 0:
            raise ConfigError("negative pairs require loss=log_mse (SI-SDR is undefined for silent targets)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = asdict(self.loss)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        if isinstance(data.get("loss"), dict):
            data["loss"] = LossConfig(**data["loss"])
        return cls(**data)


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    skipped: int = 0  # consecutive non-finite steps

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimState":
        return cls(
            m={n: np.zeros_like(t.value) for n, t in params.items()},
            v={n: np.zeros_like(t.value) for n, t in params.items()},
        )


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads, norm
    k = max_norm / norm
    return {n: g * np.asarray(k, dtype=g.dtype) for n, g in grads.items()}, norm


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: OptimState,
    lr: float,
    clip: float | None = 5.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> bool:
    """One bias-corrected Adam update in place.  Returns False when the step was skipped.

    A step whose gradients contain NaN or inf is skipped without touching the
    moments; more than ``MAX_SKIPPED_STEPS`` in a row raises.
    """
    bad = [n for n, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        state.skipped += 1
        log.warning("non-finite gradients in %s; step skipped (%d in a row)", bad[:3], state.skipped)
        if state.skipped > MAX_SKIPPED_STEPS:
            raise NumericalError(f"{state.skipped} consecutive non-finite gradient steps; first offenders: {bad[:5]}")
        return False
    state.skipped = 0
    if clip is not None:
        grads, _ = clip_by_global_norm(grads, clip)
    state.step += 1
    t = state.step
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    for name, g in grads.items():
        p = params[name]
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        update = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        p.value -= update.astype(p.dtype)
    return True


@dataclass
class PlateauHalving:
    """Halve the rate after ``patience`` consecutive epochs without ``min_delta`` improvement over the best."""

    lr: float
    patience: int = 2
    min_delta: float = 0.01
    best: float | None = None
    stagnant: int = 0

    def update(self, metric: float) -> float:
        if self.best is None or metric > self.best + self.min_delta:
            self.best = metric if self.best is None else max(metric, self.best)
            self.stagnant = 0
        else:
            self.stagnant += 1
            if self.stagnant >= self.patience:
                self.lr *= 0.5
                self.stagnant = 0
        return self.lr


# ---------------------------------------------------------------------------
# data


@dataclass
class Batch:
    mixture: np.ndarray  # [B, C, N]
    enrollment: np.ndarray  # [B, E]
    target: np.ndarray  # [B, N]
    negative: np.ndarray  # [B] bool
    ids: list[str] = field(default_factory=list)


def make_batch(pairs: Sequence[TrainingPair]) -> Batch:
    shapes = {(p.mixture.shape, p.enrollment.shape) for p in pairs}
    if len(shapes) != 1:
        raise DataError(f"a batch needs equal lengths; got {sorted(shapes)}")
    return Batch(
        mixture=np.stack([p.mixture for p in pairs]),
        enrollment=np.stack([p.enrollment for p in pairs]),
        target=np.stack([p.target for p in pairs]),
        negative=np.array([p.is_negative for p in pairs]),
        ids=[p.pair_id for p in pairs],
    )


def select_training_pairs(pairs: Sequence[TrainingPair], cfg: TrainConfig) -> list[TrainingPair]:
    """All positives plus enough negatives to reach ``neg_fraction`` (fewer if the corpus lacks them)."""
    pos = [p for p in pairs if not p.is_negative]
    neg = [p for p in pairs if p.is_negative]
    if cfg.neg_fraction == 0:
        return pos
    want = int(round(cfg.neg_fraction / (1 - cfg.neg_fraction) * len(pos)))
    if want < len(neg):
        keep = np.sort(np.random.default_rng([cfg.seed, 17]).choice(len(neg), size=want, replace=False))
        neg = [neg[i] for i in keep]
    return pos + neg


def batch_loss(out: Tensor, batch: Batch, loss: LossConfig, ref_channel: int = 0) -> Tensor:
    if loss.kind == "si_sdr":
        assert not batch.negative.any(), "negative pair reached the SI-SDR loss"
        per = ops.scale(si_sdr_db(out, batch.target, loss.eps), -1.0)
    else:
        per = log_mse_db(out, batch.target, batch.mixture[:, ref_channel], loss.tau)
    return ops.mean(per)


# ---------------------------------------------------------------------------
# validation


def predict(params: ModelParams, cfg: ModelConfig, pairs: Sequence[TrainingPair], stft_cfg: dsp.StftConfig, batch_size: int = 4):
    """Estimates for ``pairs`` in order, computed with frozen parameters."""
    outs = []
    for i in range(0, len(pairs), batch_size):
        b = make_batch(pairs[i: i + batch_size])
        outs.extend(forward(b.mixture, b.enrollment, cfg, params, stft_cfg).value)
    return outs


def validate(
    params: ModelParams,
    cfg: ModelConfig,
    pairs: Sequence[TrainingPair],
    stft_cfg: dsp.StftConfig = dsp.StftConfig(),
    batch_size: int = 4,
    eps: float = 1e-8,
) -> dict:
    """Summary metrics over ``pairs``: SI-SDRi over positives, ESR over negatives."""
    ests = predict(params, cfg, pairs, stft_cfg, batch_size)
    records = [
        score_utterance(p.pair_id, p.polarity, est, p.target, p.mixture[cfg.ref_channel], eps)
        for p, est in zip(pairs, ests)
    ]
    return summarize(records)


def selection_metric(summary: dict) -> float:
    if summary["si_sdri_mean"] is not None:
        return summary["si_sdri_mean"]
    return summary["esr_mean"] if summary["esr_mean"] is not None else float("-inf")


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    """Step-resumable training loop.

    The batch order of each epoch is a permutation drawn from ``(seed, epoch)``,
    so a checkpoint taken between any two steps resumes the same trajectory.
    """

    def __init__(
        self,
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        train_pairs: Sequence[TrainingPair],
        val_pairs: Sequence[TrainingPair] | None = None,
        stft_cfg: dsp.StftConfig = dsp.StftConfig(),
        params: ModelParams | None = None,
    ):
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.stft_cfg = stft_cfg
        self.pairs = select_training_pairs(list(train_pairs), train_cfg)
        if not self.pairs:
            raise DataError("no usable training pairs (empty corpus, or only negatives under loss=si_sdr)")
        self.val_pairs = list(val_pairs or [])
        self.params = params or init_params(model_cfg, train_cfg.seed, np.float32, stft_cfg.n_bins)
        self.params.check(model_cfg)
        self.opt = OptimState.zeros_like(self.params)
        self.schedule = PlateauHalving(train_cfg.lr0, train_cfg.lr_halve_patience, train_cfg.min_improvement_db)
        self.epoch = 1
        self.batch_index = 0
        self.global_step = 0
        self.best_metric: float | None = None
        self.history: list[dict] = []

    @property
    def lr(self) -> float:
        return self.schedule.lr

    @property
    def batches_per_epoch(self) -> int:
        return -(-len(self.pairs) // self.cfg.batch_size)

    def _order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.cfg.seed, epoch, 3]).permutation(len(self.pairs))

    def next_batch(self) -> Batch:
        order = self._order(self.epoch)
        lo = self.batch_index * self.cfg.batch_size
        return make_batch([self.pairs[i] for i in order[lo: lo + self.cfg.batch_size]])

    def compute_loss(self, batch: Batch) -> tuple[float, dict[str, np.ndarray]]:
        self.params.zero_grad()
        with Tape() as tape:
            out = forward(batch.mixture, batch.enrollment, self.model_cfg, self.params, self.stft_cfg)
            loss = batch_loss(out, batch, self.cfg.loss, self.model_cfg.ref_channel)
            tape.backward(loss)
        grads = {n: t.grad for n, t in self.params.items()}
        return float(loss.value), grads

    def train_step(self) -> float:
        """One optimizer step on the next batch; advances the epoch cursor but never validates."""
        if self.epoch_done():
            self.epoch += 1
            self.batch_index = 0
        loss, grads = self.compute_loss(self.next_batch())
        adam_step(
            self.params, grads, self.opt, self.lr, self.cfg.grad_clip_l2, self.cfg.beta1, self.cfg.beta2, self.cfg.adam_eps
        )
        self.global_step += 1
        self.batch_index += 1
        return loss

    def epoch_done(self) -> bool:
        return self.batch_index >= self.batches_per_epoch

    def run_validation(self) -> dict | None:
        if not self.val_pairs:
            return None
        return validate(self.params, self.model_cfg, self.val_pairs, self.stft_cfg, self.cfg.batch_size, self.cfg.loss.eps)

    def fit(
        self,
        out_dir=None,
        log_path=None,
        callback: Callable[["Trainer", float], bool] | None = None,
    ) -> list[dict]:
        """Train until ``max_epochs`` or ``max_steps``; returns the log records.

        ``callback(trainer, loss)`` runs after every step and stops training by
        returning True.  With ``out_dir`` set, ``last.ckpt`` is written after
        each epoch and ``best.ckpt`` whenever the validation metric improves.
        """
        out_dir = Path(out_dir) if out_dir is not None else None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "a") if log_path is not None else None
        try:
            if self.global_step == 0 and self.schedule.best is None and self.val_pairs:
                # the untrained model is the baseline for the plateau schedule
                base = self.run_validation()
                self.schedule.update(selection_metric(base))
                self._emit(log_file, 0, None, base)
                self._keep_best(selection_metric(base), out_dir)
            stop = False
            while self.epoch <= self.cfg.max_epochs and not stop:
                while not self.epoch_done():
                    loss = self.train_step()
                    if not np.isfinite(loss):
                        log.warning("non-finite loss at step %d", self.global_step)
                    self._emit(log_file, self.epoch, loss, None)
                    if callback is not None and callback(self, loss):
                        stop = True
                        break
                    if self.cfg.max_steps is not None and self.global_step >= self.cfg.max_steps:
                        stop = True
                        break
                if stop and not self.epoch_done():
                    break
                summary = self.run_validation()
                self.epoch += 1
                self.batch_index = 0
                if summary is not None:
                    metric = selection_metric(summary)
                    self.schedule.update(metric)
                    self._emit(log_file, self.epoch - 1, None, summary)
                    self._keep_best(metric, out_dir)
                if out_dir is not None:
                    self.save(out_dir / "last.ckpt")
            if out_dir is not None:
                self.save(out_dir / "last.ckpt")
        finally:
            if log_file is not None:
                log_file.close()
        return self.history

    def _keep_best(self, metric: float, out_dir: Path | None) -> None:
        if self.best_metric is None or metric > self.best_metric:
            self.best_metric = metric
            if out_dir is not None:
                self.save(out_dir / "best.ckpt")

    def _emit(self, fh, epoch: int, loss: float | None, summary: dict | None) -> None:
        rec = {
            "epoch": epoch,
            "step": self.global_step,
            "lr": self.lr,
            "loss": loss,
            "val_si_sdri": summary["si_sdri_mean"] if summary else None,
            "val_esr": summary["esr_mean"] if summary else None,
        }
        self.history.append(rec)
        if fh is not None:
            fh.write(json.dumps(rec) + "\n")
            fh.flush()

    # -- checkpoints ---------------------------------------------------

    def save(self, path) -> None:
        tensors = {n: t.value for n, t in self.params.items()}
        for n in self.params:
            tensors[f"adam/m/{n}"] = self.opt.m[n]
            tensors[f"adam/v/{n}"] = self.opt.v[n]
        header = {
            "model": self.model_cfg.to_dict(),
            "train": self.cfg.to_dict(),
            "stft": asdict(self.stft_cfg),
            "epoch": self.epoch,
            "batch_index": self.batch_index,
            "global_step": self.global_step,
            "adam_step": self.opt.step,
            "adam_skipped": self.opt.skipped,
            "lr": self.schedule.lr,
            "schedule_best": self.schedule.best,
            "schedule_stagnant": self.schedule.stagnant,
            "best_metric": self.best_metric,
            "seed": self.cfg.seed,
        }
        save_tensors(path, tensors, header)

    @classmethod
    def load(
        cls,
        path,
        train_pairs: Sequence[TrainingPair],
        val_pairs: Sequence[TrainingPair] | None = None,
        train_cfg: TrainConfig | None = None,
    ) -> "Trainer":
        """Rebuild a trainer from a checkpoint.  ``train_cfg`` may override the stored one."""
        tensors, header = load_tensors(path)
        for key in ("model", "train", "stft", "epoch", "batch_index", "global_step", "adam_step"):
            if key not in header:
                raise DataError(f"{path}: not a training checkpoint (missing {key!r})")
        model_cfg = ModelConfig.from_dict(header["model"])
        cfg = train_cfg or TrainConfig.from_dict(header["train"])
        stft_cfg = dsp.StftConfig(**header["stft"])
        names = [n for n in tensors if "/" not in n]
        params = ModelParams({n: Tensor(tensors[n]) for n in names})
        tr = cls(model_cfg, cfg, train_pairs, val_pairs, stft_cfg, params)
        tr.opt = OptimState(
            m={n: tensors[f"adam/m/{n}"].copy() for n in names},
            v={n: tensors[f"adam/v/{n}"].copy() for n in names},
            step=header["adam_step"],
            skipped=header.get("adam_skipped", 0),
        )
        tr.epoch = header["epoch"]
        tr.batch_index = header["batch_index"]
        tr.global_step = header["global_step"]
        tr.schedule.lr = header["lr"]
        tr.schedule.best = header["schedule_best"]
        tr.schedule.stagnant = header["schedule_stagnant"]
        tr.best_metric = header["best_metric"]
        return tr


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_pairs: Sequence[TrainingPair],
    val_pairs: Sequence[TrainingPair] | None = None,
    out_dir=None,
    stft_cfg: dsp.StftConfig = dsp.StftConfig(),
    resume=None,
    log_path=None,
    callback=None,
) -> Trainer:
    if resume is not None:
        tr = Trainer.load(resume, train_pairs, val_pairs, train_cfg)
    else:
        tr = Trainer(model_cfg, train_cfg, train_pairs, val_pairs, stft_cfg)
    tr.fit(out_dir, log_path, callback)
    return tr


# ---------------------------------------------------------------------------
# pipeline gradient check

TINY_STFT = dsp.StftConfig(sample_rate=128, window_ms=125.0, hop_ms=62.5)  # 16-sample window, 9 bins
TINY_MODEL = ModelConfig(
    channels=2,
    embed_dim=4,
    n_blocks=2,
    enroll_blocks=1,
    downsample_depth=1,
    fusion="film",
    spk_dim=6,
    hidden=3,
    embed_hidden=8,
)


@dataclass
class GroupResult:
    loss: str
    group: str
    max_rel_err: float
    passed: bool


def gradcheck_suite(
    model_cfg: ModelConfig = TINY_MODEL,
    stft_cfg: dsp.StftConfig = TINY_STFT,
    losses: Sequence[str] = ("si_sdr", "log_mse"),
    tolerance: float = 1e-3,
    max_entries: int = 4,
    seed: int = 0,
    jitter: float = 0.1,
) -> list[GroupResult]:
    """Finite-difference check of every parameter group through the full 64-bit pipeline.

    Parameters are jittered away from their init so zero-initialized layers
    and dead ReLUs do not make a check vacuous.  A group with any tensor
    whose analytic gradient is identically zero fails.
    """
    if model_cfg.embed_dim > 4 or model_cfg.n_blocks != 2 or stft_cfg.n_bins > 9:
        raise ConfigError("gradcheck_suite expects a tiny config (D <= 4, B = 2, F <= 9)")
    rng = np.random.default_rng(seed)
    hop = stft_cfg.hop_length
    n = 8 * hop
    e_len = int(np.ceil(model_cfg.embed_min_s * stft_cfg.sample_rate / hop)) * hop
    y = rng.standard_normal((2, model_cfg.channels, n))
    e = rng.standard_normal((2, e_len))
    s = rng.standard_normal((2, n))
    params = init_params(model_cfg, seed, np.float64, stft_cfg.n_bins)
    names = params.names()
    groups = params.groups()
    start = [np.asarray(getattr(params[k], "value", params[k])) + jitter * rng.standard_normal(params[k].shape) for k in names]
    results = []
    for kind in losses:
        loss_cfg = LossConfig(kind=kind)

        def fn(*ts):
            q = ModelParams(dict(zip(names, ts)))
            out = forward(y, e, model_cfg, q, stft_cfg)
            if kind == "si_sdr":
                return si_sdr_db(out, s, loss_cfg.eps)
            return log_mse_db(out, s, y[:, model_cfg.ref_channel], loss_cfg.tau)

        rep = grad_check(fn, start, tolerance, max_entries=max_entries, seed=seed)
        for g in groups:
            members = [k for k, name in enumerate(names) if name.rsplit(".", 1)[0] == g]
            worst = max(rep.per_input[k] for k in members)
            live = all(rep.grad_max[k] > 0 for k in members)
            results.append(GroupResult(kind, g, worst, worst < tolerance and live))
    return results
