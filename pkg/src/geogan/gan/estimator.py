"""Physics-constrained pix2pix as a scikit-learn style estimator.

Inputs ``X`` are (n, C, H, W) planes ending with the binary water mask:
``[pop, lum, water]`` in ``factors`` mode or ``[water]`` in ``water_only``
mode. Targets ``y`` are (n, H, W) built-density maps in [0, 1].
"""
from __future__ import annotations

import contextlib
import csv
import hashlib
import io
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..autodiff import functional as F
from ..autodiff.optim import Adam
from ..autodiff.tensor import Tensor, backward, no_grad
from ..exceptions import TileFormatError, ValidationError
from ..raster import read_container, split_payload, write_container
from ..validation import check_inputs, check_targets
from .losses import LossReport, check_finite, discriminator_loss, generator_loss
from .networks import PatchDiscriminator, UNetGenerator

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GCKP"
INPUT_MODES = {"factors": ("pop", "lum", "water"), "water_only": ("water",)}
LOG_COLUMNS = ("step", "epoch", "L_cGAN_D", "L_cGAN_G", "L_L1", "L_constr", "overlap_rate", "wall_ms")


@dataclass(frozen=True)
class GanConfig:
    image_size: int = 64
    base_width: int = 16
    depth: int = 4
    dropout: float = 0.2
    l1_weight: float = 100.0
    alpha: float = 100.0
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    input_mode: str = "factors"

    def validate(self) -> None:
        if self.input_mode not in INPUT_MODES:
            raise ValidationError(f"input_mode must be one of {sorted(INPUT_MODES)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout p must be in [0, 1)")
        if self.alpha < 0 or self.l1_weight < 0:
            raise ValidationError("alpha and l1_weight must be >= 0")
        if self.depth < 2:
            raise ValidationError("depth must be >= 2")
        if self.image_size % (2 ** max(self.depth, 3)):
            raise ValidationError(f"image size {self.image_size} must be divisible by 2**depth "
                                  "and by 8 for the discriminator")
        if self.batch_size < 1 or self.epochs < 0 or self.base_width < 1:
            raise ValidationError("batch_size and base_width must be >= 1, epochs >= 0")
        if not self.lr > 0:
            raise ValidationError("lr must be > 0")

    @property
    def in_channels(self) -> int:
        return len(INPUT_MODES[self.input_mode])


class ConstrainedPix2Pix(BaseEstimator):
    """Conditional GAN regressor from (pop, lum, water) planes to built density.

    The generator objective is adversarial BCE + ``l1_weight`` * L1 +
    ``alpha`` * mean(generated * water). Dropout in the generator's decoder is
    the noise source; :meth:`predict` runs without it, :meth:`sample` with it.
    """

    def __init__(self, image_size: int = 64, base_width: int = 16, depth: int = 4,
                 dropout: float = 0.2, l1_weight: float = 100.0, alpha: float = 100.0,
                 lr: float = 2e-4, beta1: float = 0.5, beta2: float = 0.999, batch_size: int = 8,
                 epochs: int = 30, seed: int = 0, input_mode: str = "factors",
                 threads: Optional[int] = None, checkpoint_every: int = 0,
                 checkpoint_dir: Optional[str] = None, log_path: Optional[str] = None,
                 record_time: bool = False, verbose: int = 0):
        self.image_size = image_size
        self.base_width = base_width
        self.depth = depth
        self.dropout = dropout
        self.l1_weight = l1_weight
        self.alpha = alpha
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.input_mode = input_mode
        self.threads = threads
        self.checkpoint_every = checkpoint_every
        self.checkpoint_dir = checkpoint_dir
        self.log_path = log_path
        self.record_time = record_time
        self.verbose = verbose

    # -- construction --------------------------------------------------------
    def config(self) -> GanConfig:
        cfg = GanConfig(**{k: getattr(self, k) for k in GanConfig.__dataclass_fields__})
        cfg.validate()
        return cfg

    def _build(self, cfg: GanConfig) -> None:
        self.config_ = cfg
        self.generator_ = UNetGenerator(cfg.in_channels, cfg.base_width, cfg.depth, cfg.dropout,
                                        cfg.image_size, seed=cfg.seed)
        self.discriminator_ = PatchDiscriminator(cfg.in_channels + 1, cfg.base_width, seed=cfg.seed + 1)
        self.optim_g_ = Adam(self.generator_.parameters(), cfg.lr, cfg.beta1, cfg.beta2)
        self.optim_d_ = Adam(self.discriminator_.parameters(), cfg.lr, cfg.beta1, cfg.beta2)
        self.shuffle_rng_ = np.random.default_rng(cfg.seed)
        self.generator_.reseed_noise(cfg.seed + 2)
        self.history_: List[LossReport] = []
        self.log_rows_: List[list] = []
        self.epoch_ = 0
        self.step_ = 0

    def _threads(self):
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=self.threads) if self.threads else contextlib.nullcontext()

    # -- training ------------------------------------------------------------
    def fit(self, X, y, callback: Optional[Callable[["ConstrainedPix2Pix", int], None]] = None):
        """Train from scratch for ``epochs`` epochs; ``callback(self, epoch)`` runs after each."""
        cfg = self.config()
        X = check_inputs(X, cfg.in_channels, cfg.image_size)
        y = check_targets(y, X)
        if X.shape[0] == 0:
            raise ValidationError("empty training set")
        self._build(cfg)
        self.generator_.init_output_bias(float(y.mean()))
        log_fh = open(self.log_path, "w", newline="", encoding="utf-8") if self.log_path else None
        try:
            writer = csv.writer(log_fh) if log_fh else None
            if writer:
                writer.writerow(LOG_COLUMNS)
            with self._threads():
                for _ in range(cfg.epochs):
                    self._run_epoch(X, y, writer)
                    if log_fh:
                        log_fh.flush()
                    if self.checkpoint_every and self.checkpoint_dir and \
                            self.epoch_ % self.checkpoint_every == 0:
                        Path(self.checkpoint_dir).mkdir(parents=True, exist_ok=True)
                        self.save(Path(self.checkpoint_dir) / f"epoch_{self.epoch_:04d}.gckp")
                    if callback:
                        callback(self, self.epoch_)
        finally:
            if log_fh:
                log_fh.close()
        return self

    def _run_epoch(self, X: np.ndarray, y: np.ndarray, writer) -> None:
        cfg = self.config_
        n = X.shape[0]
        order = self.shuffle_rng_.permutation(n)
        self.epoch_ += 1
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            t0 = time.perf_counter()
            report = self.train_step(X[idx], y[idx])
            wall = int(round((time.perf_counter() - t0) * 1000)) if self.record_time else 0
            row = [self.step_, self.epoch_, *(repr(float(v)) for v in (
                report.cgan_d, report.cgan_g, report.l1, report.constr, report.overlap_rate)), wall]
            self.log_rows_.append(row)
            if writer:
                writer.writerow(row)
        if self.verbose:
            last = self.history_[-1]
            log.info("epoch %d: D %.4f G %.4f L1 %.4f constr %.4f overlap %.5f", self.epoch_,
                     last.cgan_d, last.cgan_g, last.l1, last.constr, last.overlap_rate)

    def train_step(self, xb: np.ndarray, yb: np.ndarray) -> LossReport:
        """One alternating update: discriminator on a detached fake, then generator."""
        cfg = self.config_
        G, D = self.generator_, self.discriminator_
        G.train()
        D.train()
        xa = Tensor(xb)
        real = Tensor(yb[:, None])
        water = xb[:, -1:]
        fake = G(xa)

        d_real = D(F.concat([xa, real], axis=1))
        d_fake = D(F.concat([xa, fake.detach()], axis=1))
        d_loss = discriminator_loss(d_real, d_fake)
        self.optim_d_.zero_grad()
        backward(d_loss)
        self.optim_d_.step()

        d_fake_g = D(F.concat([xa, fake], axis=1))
        g_loss, parts = generator_loss(d_fake_g, real, fake, water, cfg.l1_weight, cfg.alpha)
        report = LossReport(cgan_d=float(d_loss.data), **parts)
        check_finite(report)
        self.optim_g_.zero_grad()
        backward(g_loss)
        self.optim_g_.step()
        self.optim_d_.zero_grad()

        self.step_ += 1
        self.history_.append(report)
        return report

    # -- inference -----------------------------------------------------------
    def _check_X(self, X) -> np.ndarray:
        check_is_fitted(self, "generator_")
        cfg = self.config_
        try:
            return check_inputs(X, cfg.in_channels, cfg.image_size)
        except ValidationError as exc:
            raise ValidationError(f"{exc} (model input_mode={cfg.input_mode!r})") from exc

    def _run_generator(self, X: np.ndarray, training: bool) -> np.ndarray:
        G = self.generator_
        G.train(training)
        out = []
        with no_grad(), self._threads():
            for start in range(0, X.shape[0], max(self.config_.batch_size, 1)):
                out.append(G(Tensor(X[start:start + self.config_.batch_size])).data[:, 0])
        G.eval()
        return np.concatenate(out, axis=0)

    def predict(self, X) -> np.ndarray:
        """Deterministic built maps (dropout off), shape (n, H, W)."""
        return self._run_generator(self._check_X(X), training=False)

    def sample(self, X, seed: int = 0, n_samples: int = 1) -> np.ndarray:
        """Stochastic maps with dropout noise, shape (n_samples, n, H, W)."""
        X = self._check_X(X)
        self.generator_.reseed_noise(seed)
        return np.stack([self._run_generator(X, training=True) for _ in range(n_samples)])

    def extract_features(self, X, y) -> np.ndarray:
        """Pooled discriminator bottleneck features of (inputs, built map) pairs."""
        X = self._check_X(X)
        y = check_targets(y, X)
        D = self.discriminator_
        D.eval()
        with no_grad(), self._threads():
            feats = D.features(Tensor(np.concatenate([X, y[:, None]], axis=1))).data
        return feats.astype(np.float64)

    @property
    def feature_dim(self) -> int:
        check_is_fitted(self, "discriminator_")
        return self.discriminator_.feature_dim

    def score(self, X, y) -> float:
        """Negative mean absolute error of :meth:`predict`."""
        X = self._check_X(X)
        y = check_targets(y, X)
        return -float(np.mean(np.abs(self.predict(X) - y)))

    # -- persistence ---------------------------------------------------------
    def training_log_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf)
        wr.writerow(LOG_COLUMNS)
        wr.writerows(getattr(self, "log_rows_", []))
        return buf.getvalue()

    def save(self, path) -> None:
        """Write a checkpoint: config, both networks, optimizer moments and RNG states."""
        check_is_fitted(self, "generator_")
        tensors = []
        for prefix, module in (("G", self.generator_), ("D", self.discriminator_)):
            tensors += [(f"{prefix}.{k}", v) for k, v in module.state_dict().items()]
        for prefix, opt in (("optG", self.optim_g_), ("optD", self.optim_d_)):
            for i, (m, v) in enumerate(zip(opt.state.m, opt.state.v)):
                tensors += [(f"{prefix}.m.{i}", m), (f"{prefix}.v.{i}", v)]
        header = {
            "version": 1,
            "kind": "checkpoint",
            "config": asdict(self.config_),
            "params": {k: v for k, v in self.get_params().items()
                       if k not in GanConfig.__dataclass_fields__},
            "epoch": self.epoch_,
            "step": self.step_,
            "adam_steps": {"optG": self.optim_g_.state.step, "optD": self.optim_d_.state.step},
            "rng": {"shuffle": self.shuffle_rng_.bit_generator.state,
                    "noise": self.generator_.noise_rng.bit_generator.state},
            "log_digest": hashlib.sha256(self.training_log_csv().encode()).hexdigest(),
            "tensors": [{"name": n, "dtype": "f32", "shape": list(a.shape)} for n, a in tensors],
        }
        write_container(path, CHECKPOINT_MAGIC, header, [a for _, a in tensors])

    @classmethod
    def load(cls, path) -> "ConstrainedPix2Pix":
        header, payload = read_container(path, CHECKPOINT_MAGIC)
        if header.get("kind") != "checkpoint":
            raise TileFormatError(f"{path}: not a model checkpoint")
        specs = header["tensors"]
        arrays = split_payload(payload, [tuple(s["shape"]) for s in specs], str(path))
        named = {s["name"]: a for s, a in zip(specs, arrays)}
        est = cls(**header["config"], **header.get("params", {}))
        est._build(GanConfig(**header["config"]))
        for prefix, module in (("G", est.generator_), ("D", est.discriminator_)):
            module.load_state_dict({k[len(prefix) + 1:]: v for k, v in named.items()
                                    if k.startswith(prefix + ".")})
        for prefix, opt in (("optG", est.optim_g_), ("optD", est.optim_d_)):
            count = sum(1 for k in named if k.startswith(prefix + ".m."))
            opt.state.m = [named[f"{prefix}.m.{i}"] for i in range(count)]
            opt.state.v = [named[f"{prefix}.v.{i}"] for i in range(count)]
            opt.state.step = header["adam_steps"][prefix]
        est.shuffle_rng_.bit_generator.state = header["rng"]["shuffle"]
        est.generator_.noise_rng.bit_generator.state = header["rng"]["noise"]
        est.epoch_, est.step_ = header["epoch"], header["step"]
        est.log_digest_ = header["log_digest"]
        return est
