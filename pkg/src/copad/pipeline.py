"""Dataset ingestion, frame construction, the training loop, and checkpoints.

Training alternates between recomputing the standardization statistics from
normal-frame latents and running Adam steps on the contrastive loss; the
best-validation-F1 state is kept as the checkpoint.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import dependency as dep
from . import diffcore as dc
from . import encoder as enc
from . import evaluation as ev
from . import objective as obj
from . import synthdata as sd

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class CsvFormatError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class FrameSet:
    """Sliding windows over a series: frame i covers rows [i*stride, i*stride+L)."""

    frames: np.ndarray  # (N, L, D)
    labels: np.ndarray  # (N,)
    stride: int
    source: str = ""

    @property
    def window_length(self) -> int:
        return self.frames.shape[1]

    def end_indices(self) -> np.ndarray:
        n = self.frames.shape[0]
        return np.arange(n) * self.stride + self.window_length - 1


@dataclass
class TrainConfig:
    window_length: int = 20
    stride: int = 10
    batch_size: int = 64
    epochs: int = 30
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_decay: float = 1.0  # per-epoch multiplicative learning-rate decay
    grad_clip: float = 5.0
    loss: obj.LossConfig = field(default_factory=obj.LossConfig)
    encoder: enc.EncoderConfig | None = None
    family: str = "copula"
    base: str = "student_t"
    dof: float = 4.0
    learn_dof: bool = False
    marginal_mode: str = "parametric"
    baseline: bool = False
    injection_rate: float = 0.25
    seed: int = 0

    def validate(self) -> None:
        if self.window_length < 2:
            raise ValueError("window_length must be at least 2")
        if self.stride < 1 or self.batch_size < 1:
            raise ValueError("stride and batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")
        if not 0.0 <= self.injection_rate < 1.0:
            raise ValueError("injection_rate must lie in [0, 1)")
        self.loss.validate()
        if self.encoder is not None:
            self.encoder.validate()


def load_csv(path, has_label: bool | None = None) -> sd.LabeledSeries:
    """Parse `timestamp,f1..fD[,label]`; labels default to 0 when absent."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file, header row required")
        if not header or header[0].strip() != "timestamp":
            raise CsvFormatError(f"{path}: first header column must be 'timestamp'")
        inferred = header[-1].strip() == "label"
        if has_label is None:
            has_label = inferred
        elif has_label and not inferred:
            raise CsvFormatError(f"{path}: has_label set but no 'label' column")
        n_feat = len(header) - 1 - (1 if has_label else 0)
        if n_feat < 1:
            raise CsvFormatError(f"{path}: no feature columns")

        values, labels = [], []
        for row_idx, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise CsvFormatError(
                    f"{path}: row {row_idx} has {len(row)} cells, expected "
                    f"{len(header)}")
            feats = []
            for j in range(1, 1 + n_feat):
                try:
                    v = float(row[j])
                except ValueError:
                    raise CsvFormatError(
                        f"{path}: row {row_idx}, column {header[j]!r}: "
                        f"non-numeric cell {row[j]!r}")
                if not math.isfinite(v):
                    raise CsvFormatError(
                        f"{path}: row {row_idx}, column {header[j]!r}: "
                        f"non-finite value")
                feats.append(v)
            values.append(feats)
            if has_label:
                cell = row[-1].strip()
                if cell not in ("0", "1"):
                    raise CsvFormatError(
                        f"{path}: row {row_idx}, column 'label': expected 0 or "
                        f"1, got {cell!r}")
                labels.append(int(cell))
            else:
                labels.append(0)
    if not values:
        raise CsvFormatError(f"{path}: no data rows")
    y = np.asarray(labels, dtype=np.int64)
    events = [(int(s), int(e)) for s, e in ev._event_runs(y)]
    return sd.LabeledSeries(values=np.asarray(values), labels=y, events=events)


def make_frames(series: sd.LabeledSeries, window_length: int,
                stride: int) -> FrameSet:
    """Sliding frames with OR-of-covered-rows labeling."""
    t = series.values.shape[0]
    if window_length > t:
        raise ValueError(f"window_length {window_length} exceeds series length {t}")
    if stride < 1:
        raise ValueError("stride must be at least 1")
    n = (t - window_length) // stride + 1
    frames = np.stack([series.values[i * stride:i * stride + window_length]
                       for i in range(n)])
    labels = np.array([int(series.labels[i * stride:i * stride + window_length].any())
                       for i in range(n)], dtype=np.int64)
    return FrameSet(frames=frames, labels=labels, stride=stride)


class Adam:
    """Adaptive-moment optimizer with bias correction and global norm clipping."""

    def __init__(self, leaves, learning_rate=1e-3, beta1=0.9, beta2=0.999,
                 eps=1e-8, grad_clip=5.0):
        self.leaves = list(leaves)
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.grad_clip = grad_clip
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.leaves]
        self.v = [np.zeros_like(p.data) for p in self.leaves]

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in self.leaves]
        if self.grad_clip is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > self.grad_clip:
                grads = [g * (self.grad_clip / norm) for g in grads]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.leaves, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None


def encode_frames(frames: np.ndarray, params: enc.EncoderParams,
                  config: enc.EncoderConfig, chunk: int = 512) -> np.ndarray:
    """Eval-mode latents for a frame array, computed off-tape in chunks."""
    outs = [enc.encode(frames[i:i + chunk], params, config).data
            for i in range(0, frames.shape[0], chunk)]
    return np.concatenate(outs, axis=0)


def score_frames(frames: np.ndarray, params: enc.EncoderParams,
                 enc_config: enc.EncoderConfig, model: dep.DependencyModel,
                 baseline: bool = False, chunk: int = 512) -> np.ndarray:
    """Per-frame log-density scores in eval mode (no gradient tape)."""
    outs = []
    for i in range(0, frames.shape[0], chunk):
        z = enc.encode(frames[i:i + chunk], params, enc_config)
        if baseline:
            s = enc.marginal_baseline_score(z, model.mu, model.sigma)
        else:
            s = dep.log_density(z, model)
        outs.append(np.atleast_1d(s.data))
    return np.concatenate(outs, axis=0)


def train_batch(frames: np.ndarray, labels: np.ndarray,
                params: enc.EncoderParams, model: dep.DependencyModel,
                config: TrainConfig, optimizer: Adam,
                mu_state: float | None = None,
                dropout_rng: np.random.Generator | None = None) -> obj.LossBreakdown:
    """One optimizer step on a batch; returns the per-frame loss breakdown."""
    labels = np.asarray(labels, dtype=np.int64)
    n = frames.shape[0]
    if n == 0:
        raise ValueError("batch must contain at least one frame")
    enc_config = config.encoder
    loss_cfg = config.loss
    with dc.Tape():
        z = enc.encode(frames, params, enc_config, train_mode=True,
                       dropout_rng=dropout_rng)
        # standardize by the batch's normal-row statistics on the tape so the
        # score is invariant to affine drift of the latents during training
        zs = dep.batch_standardize(z, np.flatnonzero(labels == 0))
        if config.baseline:
            densities = enc.marginal_baseline_score(
                zs, np.zeros(zs.shape[1]), np.ones(zs.shape[1]))
        else:
            densities = dep.log_density(zs, model, standardized=True)
        try:
            mu_value = obj.mu_norm(densities.data[labels == 0], loss_cfg,
                                   ema_state=mu_state)
        except obj.MuNormUnavailableError:
            log.warning("no normal frames and no running mean; hinge skipped")
            loss_cfg = replace(loss_cfg, anomaly_weight=0.0)
            mu_value = 0.0
        total, breakdown = obj.contrastive_loss_tensor(densities, labels,
                                                       loss_cfg, mu_value)
        scaled = dc.scalar_mul(total, 1.0 / n)
        dc.backward(scaled)
    optimizer.step()
    return obj.LossBreakdown(
        total=breakdown.total / n,
        normal_term=breakdown.normal_term / n,
        anomaly_term=breakdown.anomaly_term / n,
        mu_norm_used=breakdown.mu_norm_used,
        hinge_active=breakdown.hinge_active,
        normal_logp_sum=float(densities.data[labels == 0].sum()),
        anomaly_logp_sum=float(densities.data[labels == 1].sum()),
    )


def inject_pseudo_anomalies(frames: np.ndarray, labels: np.ndarray,
                            rate: float, seed: int):
    """Degrade a fraction of normal frames into labeled pseudo-anomalies.

    Each selected frame gets a noisy, rescaled, row-permuted copy of itself
    overlaid on a random interval, which corrupts its temporal dependency
    structure while leaving the marginal ranges familiar.
    """
    rng = np.random.default_rng(seed)
    n, length, _ = frames.shape
    count = int(round(rate * n))
    if count == 0:
        return frames, labels
    frames = frames.copy()
    labels = labels.copy()
    normal_idx = np.flatnonzero(labels == 0)
    chosen = rng.choice(normal_idx, size=min(count, normal_idx.size),
                        replace=False)
    for i in chosen:
        frames[i] = sd.local_perturbation(
            frames[i], [frames[i]], noise_sigma=0.1, scale_range=(0.9, 1.1),
            permute_rows=max(1, length // 2), seed=int(rng.integers(2 ** 31)))
        labels[i] = 1
    return frames, labels


@dataclass
class Checkpoint:
    version: int
    encoder_config: dict
    encoder_arrays: dict
    dependency: dict
    train_config: dict
    epoch: int
    threshold: float | None

    def restore(self):
        """Rebuild live (EncoderConfig, EncoderParams, DependencyModel)."""
        cfg = enc.EncoderConfig(**self.encoder_config)
        params = enc.EncoderParams({
            name: dc.Tensor(np.array(arr), requires_grad=True)
            for name, arr in self.encoder_arrays.items()})
        d = self.dependency
        model = dep.DependencyModel(
            family=d["family"], base=d["base"], latent_dim=d["latent_dim"],
            chol_params=dc.Tensor(np.array(d["chol_params"]), requires_grad=True),
            dof_raw=dc.Tensor(float(d["dof_raw"]), requires_grad=d["learn_dof"]),
            learn_dof=d["learn_dof"], mu=np.array(d["mu"]),
            sigma=np.array(d["sigma"]), marginal_mode=d["marginal_mode"])
        if d.get("reference") is not None:
            model.reference = [np.array(col) for col in d["reference"]]
        return cfg, params, model


def snapshot(params: enc.EncoderParams, model: dep.DependencyModel,
             enc_config: enc.EncoderConfig, train_config: TrainConfig,
             epoch: int, threshold: float | None = None) -> Checkpoint:
    dependency = {
        "family": model.family,
        "base": model.base,
        "latent_dim": model.latent_dim,
        "chol_params": model.chol_params.data.copy(),
        "dof_raw": float(model.dof_raw.data),
        "learn_dof": model.learn_dof,
        "marginal_mode": model.marginal_mode,
        "mu": model.mu.copy(),
        "sigma": model.sigma.copy(),
        "reference": None if model.reference is None
        else [col.copy() for col in model.reference],
    }
    tc = asdict(train_config)
    tc["encoder"] = None if train_config.encoder is None else asdict(train_config.encoder)
    return Checkpoint(
        version=CHECKPOINT_VERSION,
        encoder_config=asdict(enc_config),
        encoder_arrays={k: t.data.copy() for k, t in params.items()},
        dependency=dependency,
        train_config=tc,
        epoch=epoch,
        threshold=threshold,
    )


def _array_manifest(arr: np.ndarray) -> dict:
    arr = np.asarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "values": arr.ravel().tolist()}


def _array_restore(doc: dict, name: str) -> np.ndarray:
    shape = tuple(doc["shape"])
    values = np.asarray(doc["values"], dtype=np.float64)
    if values.size != int(np.prod(shape)):
        raise CheckpointFormatError(
            f"array {name!r}: {values.size} values do not fill shape {shape}")
    return values.reshape(shape)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """JSON manifest; float64 values round-trip exactly via repr digits."""
    d = dict(ckpt.dependency)
    d["chol_params"] = _array_manifest(d["chol_params"])
    d["mu"] = _array_manifest(d["mu"])
    d["sigma"] = _array_manifest(d["sigma"])
    if d["reference"] is not None:
        d["reference"] = [_array_manifest(col) for col in d["reference"]]
    doc = {
        "version": ckpt.version,
        "encoder_config": ckpt.encoder_config,
        "encoder_arrays": {k: _array_manifest(v)
                           for k, v in ckpt.encoder_arrays.items()},
        "dependency": d,
        "train_config": ckpt.train_config,
        "epoch": ckpt.epoch,
        "threshold": ckpt.threshold,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> Checkpoint:
    with open(path) as fh:
        doc = json.load(fh)
    version = doc.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"unsupported checkpoint version {version!r}, "
            f"expected {CHECKPOINT_VERSION}")
    d = dict(doc["dependency"])
    d["chol_params"] = _array_restore(d["chol_params"], "chol_params")
    d["mu"] = _array_restore(d["mu"], "mu")
    d["sigma"] = _array_restore(d["sigma"], "sigma")
    if d["reference"] is not None:
        d["reference"] = [_array_restore(col, f"reference[{j}]")
                          for j, col in enumerate(d["reference"])]
    arrays = {k: _array_restore(v, k) for k, v in doc["encoder_arrays"].items()}
    return Checkpoint(
        version=version,
        encoder_config=doc["encoder_config"],
        encoder_arrays=arrays,
        dependency=d,
        train_config=doc["train_config"],
        epoch=doc["epoch"],
        threshold=doc["threshold"],
    )


def _resolve_encoder_config(config: TrainConfig, input_dim: int) -> enc.EncoderConfig:
    if config.encoder is not None:
        if config.encoder.input_dim != input_dim:
            raise ValueError(
                f"encoder input_dim {config.encoder.input_dim} does not match "
                f"data dimension {input_dim}")
        return config.encoder
    return enc.EncoderConfig(input_dim=input_dim)


def train(train_set: FrameSet, val_set: FrameSet | None,
          config: TrainConfig, epoch_hook=None):
    """Full training loop; returns (best checkpoint, per-epoch history).

    epoch_hook(epoch, params, model, entry), when given, runs after each
    epoch's bookkeeping and may add custom diagnostics to the history entry.

    Per epoch: recompute (mu, sigma) from normal-frame latents, shuffle, run
    batch updates, then record the class-mean log-densities and validation
    metrics. The checkpoint with the best validation F1 wins; without a
    usable validation set the final state is returned.
    """
    config.validate()
    config = replace(config, encoder=_resolve_encoder_config(
        config, train_set.frames.shape[2]))
    if config.baseline:
        # the marginal-only baseline is the plain-encoder ablation: it trains
        # by likelihood ascent alone, without the contrastive anomaly term
        config = replace(config, loss=replace(config.loss, anomaly_weight=0.0))
    enc_config = config.encoder
    params = enc.init_encoder(enc_config, config.seed)
    model = dep.DependencyModel.create(
        config.family, config.base, enc_config.latent_dim, dof=config.dof,
        learn_dof=config.learn_dof, marginal_mode=config.marginal_mode)

    history: list[dict] = []
    if config.epochs == 0:
        return snapshot(params, model, enc_config, config, epoch=0), history

    frames, labels = train_set.frames, train_set.labels
    if labels.max() == 0 and config.injection_rate > 0:
        frames, labels = inject_pseudo_anomalies(
            frames, labels, config.injection_rate, config.seed + 7)

    rng = np.random.default_rng(config.seed + 1)
    optimizer = Adam(params.leaves() + model.learnable_leaves(),
                     learning_rate=config.learning_rate, beta1=config.beta1,
                     beta2=config.beta2, eps=config.adam_eps,
                     grad_clip=config.grad_clip)
    n = frames.shape[0]
    mu_state = None
    best_f1, best_ckpt = -1.0, None

    for epoch in range(config.epochs):
        optimizer.learning_rate = config.learning_rate * config.lr_decay ** epoch
        latents = encode_frames(frames, params, enc_config)
        z_norm = latents[labels == 0]
        if z_norm.shape[0] == 0:
            raise TrainingDivergedError(f"epoch {epoch}: no normal frames")
        model.set_standardization(z_norm.mean(axis=0),
                                  np.maximum(z_norm.std(axis=0), 1e-8))
        if model.marginal_mode == "empirical":
            model.set_reference(z_norm)

        order = rng.permutation(n)
        norm_sum = anom_sum = 0.0
        for batch_no, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            try:
                breakdown = train_batch(frames[idx], labels[idx], params,
                                        model, config, optimizer,
                                        mu_state=mu_state, dropout_rng=rng)
            except (dc.NumericOverflowError, ValueError) as err:
                raise TrainingDivergedError(
                    f"epoch {epoch}, batch {batch_no}: {err}") from err
            if not math.isfinite(breakdown.total):
                raise TrainingDivergedError(
                    f"epoch {epoch}, batch {batch_no}: non-finite loss")
            mu_state = breakdown.mu_norm_used
            norm_sum += breakdown.normal_logp_sum
            anom_sum += breakdown.anomaly_logp_sum

        n_anom = int(labels.sum())
        entry = {
            "epoch": epoch,
            "normal_mean": norm_sum / (n - n_anom),
            "anomaly_mean": anom_sum / n_anom if n_anom else float("nan"),
        }
        if val_set is not None and len(np.unique(val_set.labels)) == 2:
            val_scores = score_frames(val_set.frames, params, enc_config,
                                      model, baseline=config.baseline)
            tau, f1 = ev.select_threshold(val_scores, val_set.labels)
            rep = ev.classification_metrics(val_scores, val_set.labels, tau)
            entry["f1"] = rep.f1
            entry["auc_roc"] = rep.auc_roc
            if f1 > best_f1:
                best_f1 = f1
                best_ckpt = snapshot(params, model, enc_config, config,
                                     epoch=epoch + 1, threshold=tau)
        if epoch_hook is not None:
            epoch_hook(epoch, params, model, entry)
        history.append(entry)

    if best_ckpt is None:
        best_ckpt = snapshot(params, model, enc_config, config,
                             epoch=config.epochs)
    return best_ckpt, history
