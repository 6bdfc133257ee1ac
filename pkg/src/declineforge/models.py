"""Model zoo: 3D ViT reconstruction autoencoder, frozen-encoder FC head,
from-scratch 3D CNN baseline and per-group tabular autoencoder."""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch import nn

from .errors import ArgumentError, ConfigError, DataError, InvariantError, ShapeError, TrainingDivergedError
from .metrics import ssim3d
from .nncore import (
    DTYPE,
    Conv3d,
    LayerNorm,
    Linear,
    ParamStore,
    TrainConfig,
    TransformerBlock,
    adam_step,
    init_transformer_weights,
    mse_loss,
    parameter_checksum,
    seeded,
    softmax_cross_entropy,
)
from .synthcohort import FEATURE_GROUP_INDEX, TabularRecord, feature_matrix
from .volio import Volume

logger = logging.getLogger(__name__)

N_CLASSES = 4
INTENSITY_SCALE = 255.0
CNN_MIN_DIM = 16
EpochCallback = Callable[[int, float], None]


class ViTConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    vol_dims: Tuple[int, int, int] = (32, 32, 32)
    patch_size: int = Field(8, ge=1)
    embed_dim: int = Field(64, ge=1)
    depth: int = Field(4, ge=1)
    heads: int = Field(4, ge=1)
    mlp_ratio: float = Field(4.0, gt=0)
    dropout_rate: float = Field(0.0, ge=0, lt=1)

    @model_validator(mode="after")
    def _check(self):
        if any(d % self.patch_size for d in self.vol_dims):
            raise ConfigError(f"patch_size {self.patch_size} does not divide vol_dims {self.vol_dims}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by heads={self.heads}")
        return self

    @property
    def grid(self) -> Tuple[int, int, int]:
        return tuple(d // self.patch_size for d in self.vol_dims)

    @property
    def n_tokens(self) -> int:
        return int(np.prod(self.grid))


@dataclass
class Embedding:
    subject_id: str
    vector: np.ndarray


@dataclass
class ReconHistory:
    train_mse: List[float] = field(default_factory=list)
    monitor_ssim: List[float] = field(default_factory=list)

    def __len__(self):
        return len(self.train_mse)

    def append(self, mse: float, ssim: float) -> None:
        self.train_mse.append(mse)
        self.monitor_ssim.append(ssim)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "epoch": np.arange(1, len(self) + 1),
                "train_mse": self.train_mse,
                "monitor_ssim": self.monitor_ssim,
            }
        )

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "ReconHistory":
        return cls(list(frame["train_mse"].astype(float)), list(frame["monitor_ssim"].astype(float)))


class ViTAutoencoder(nn.Module):
    """Patch embedding + pre-norm transformer encoder + linear unpatch decoder."""

    ENCODER_PARTS = ("patch_embed", "pos_embed", "blocks", "norm")

    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.cfg = cfg
        d, p = cfg.embed_dim, cfg.patch_size
        self.patch_embed = Conv3d(1, d, p, stride=p)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.n_tokens, d, dtype=DTYPE))
        self.drop = nn.Dropout(cfg.dropout_rate)
        self.blocks = nn.ModuleList(
            TransformerBlock(d, cfg.heads, cfg.mlp_ratio, cfg.dropout_rate) for _ in range(cfg.depth)
        )
        self.norm = LayerNorm(d)
        self.decoder = Linear(d, p ** 3)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """(N, 1, X, Y, Z) volumes to (N, tokens, d) final-block tokens."""
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)
        tokens = self.drop(tokens + self.pos_embed)
        for block in self.blocks:
            tokens = block(tokens)
        return self.norm(tokens)

    def decode(self, tokens: torch.Tensor) -> torch.Tensor:
        n = tokens.shape[0]
        p = self.cfg.patch_size
        gx, gy, gz = self.cfg.grid
        patches = self.decoder(tokens).reshape(n, gx, gy, gz, p, p, p)
        return patches.permute(0, 1, 4, 2, 5, 3, 6).reshape(n, 1, gx * p, gy * p, gz * p)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))

    def encoder_parameters(self):
        return [p for name, p in self.named_parameters() if name.split(".")[0] in self.ENCODER_PARTS]

    def encoder_state(self) -> Dict[str, torch.Tensor]:
        return {k: v for k, v in self.state_dict().items() if k.split(".")[0] in self.ENCODER_PARTS}


def build_vit(cfg: ViTConfig, seed: int = 0) -> ViTAutoencoder:
    with seeded(seed):
        model = ViTAutoencoder(cfg)
        init_transformer_weights(model.blocks)
        with torch.no_grad():
            nn.init.trunc_normal_(model.pos_embed, std=0.02, a=-0.04, b=0.04)
    logger.debug("built ViT: %d tokens, %d parameters", cfg.n_tokens, sum(p.numel() for p in model.parameters()))
    return model


def volumes_to_tensor(volumes: Sequence[Volume], dims: Optional[Sequence[int]] = None) -> torch.Tensor:
    """Stack volumes as (N, 1, X, Y, Z) float64 scaled to [0, 1]."""
    if not volumes:
        raise ArgumentError("need at least one volume")
    expected = tuple(dims) if dims is not None else volumes[0].dims
    for v in volumes:
        if v.dims != expected:
            raise ShapeError("volumes", v.dims, expected)
    stacked = np.stack([v.data for v in volumes]).astype(np.float64) / INTENSITY_SCALE
    return torch.from_numpy(stacked).unsqueeze(1)


def _batches(n: int, batch_size: int, shuffle: bool) -> List[torch.Tensor]:
    order = torch.randperm(n) if shuffle else torch.arange(n)
    return list(order.split(batch_size))


def _reconstruct(model: ViTAutoencoder, x: torch.Tensor, batch_size: int) -> torch.Tensor:
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = torch.cat([model(x[b]) for b in _batches(x.shape[0], batch_size, False)])
    model.train(was_training)
    return out


def monitor_ssim(model: ViTAutoencoder, x: torch.Tensor, target: torch.Tensor, batch_size: int = 4) -> float:
    recon = _reconstruct(model, x, batch_size).clamp(0.0, 1.0)
    scores = [
        ssim3d(r[0].numpy(), t[0].numpy(), data_range=1.0) for r, t in zip(recon, target)
    ]
    return float(np.mean(scores))


def pretrain_reconstruction(
    model: ViTAutoencoder,
    inputs: Sequence[Volume],
    train_cfg: TrainConfig,
    targets: Optional[Sequence[Volume]] = None,
    monitor: Optional[Sequence[Volume]] = None,
    on_epoch: Optional[EpochCallback] = None,
) -> ReconHistory:
    """Minimize MSE between reconstructions and targets.

    Without ``targets`` every input reconstructs itself. ``monitor`` volumes
    are only scored (SSIM) after each epoch; by default the first few targets.
    """
    dims = model.cfg.vol_dims
    x = volumes_to_tensor(inputs, dims)
    y = volumes_to_tensor(targets, dims) if targets is not None else x
    if y.shape != x.shape:
        raise ShapeError("pretrain_reconstruction", x.shape, y.shape)
    mon = volumes_to_tensor(monitor, dims) if monitor else y[: min(4, y.shape[0])]

    history = ReconHistory()
    if train_cfg.epochs == 0:
        return history
    store = ParamStore(model, lr=train_cfg.learning_rate)
    n = x.shape[0]
    with seeded(train_cfg.seed):
        for epoch in range(1, train_cfg.epochs + 1):
            model.train()
            total = 0.0
            for batch in _batches(n, train_cfg.batch_size, shuffle=True):
                store.zero_grad()
                loss = mse_loss(model(x[batch]), y[batch])
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(epoch, float(loss), "vit")
                loss.backward()
                adam_step(store)
                total += float(loss) * len(batch)
            epoch_mse = total / n
            ssim = monitor_ssim(model, mon, mon, train_cfg.batch_size)
            history.append(epoch_mse, ssim)
            logger.debug("vit epoch %d: mse=%.6f ssim=%.4f", epoch, epoch_mse, ssim)
            if on_epoch is not None:
                on_epoch(epoch, epoch_mse)
    model.eval()
    logger.info("pretraining done: mse %.5f -> %.5f, ssim %.4f",
                history.train_mse[0], history.train_mse[-1], history.monitor_ssim[-1])
    return history


def encode_pooled(model: ViTAutoencoder, volumes: Sequence[Volume], batch_size: int = 8) -> torch.Tensor:
    x = volumes_to_tensor(volumes, model.cfg.vol_dims)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        pooled = torch.cat([model.encode(x[b]).mean(dim=1) for b in _batches(x.shape[0], batch_size, False)])
    model.train(was_training)
    return pooled


def extract_embeddings(
    model: ViTAutoencoder,
    volumes: Sequence[Volume],
    subject_ids: Optional[Sequence[str]] = None,
) -> List[Embedding]:
    ids = list(subject_ids) if subject_ids is not None else [str(i) for i in range(len(volumes))]
    if len(ids) != len(volumes):
        raise ArgumentError(f"{len(ids)} subject ids for {len(volumes)} volumes")
    pooled = encode_pooled(model, volumes).numpy()
    return [Embedding(sid, vec.copy()) for sid, vec in zip(ids, pooled)]


def embeddings_to_frame(embeddings: Sequence[Embedding]) -> pd.DataFrame:
    d = len(embeddings[0].vector) if embeddings else 0
    frame = pd.DataFrame(np.vstack([e.vector for e in embeddings]) if embeddings else np.empty((0, d)),
                         columns=[f"e{i}" for i in range(d)])
    frame.insert(0, "subject_id", [e.subject_id for e in embeddings])
    return frame


def embeddings_from_frame(frame: pd.DataFrame) -> List[Embedding]:
    cols = [c for c in frame.columns if c != "subject_id"]
    values = frame[cols].to_numpy(dtype=np.float64)
    return [Embedding(str(s), v) for s, v in zip(frame["subject_id"], values)]


# Classifier heads


class FcHead(nn.Module):
    """d -> 128 -> 32 -> 4 with ReLU and dropout, on standardized embeddings."""

    def __init__(self, d: int, hidden: Sequence[int] = (128, 32), dropout: float = 0.3):
        super().__init__()
        self.register_buffer("shift", torch.zeros(d, dtype=DTYPE))
        self.register_buffer("scale", torch.ones(d, dtype=DTYPE))
        sizes = [d, *hidden]
        self.hidden = nn.ModuleList(Linear(a, b) for a, b in zip(sizes[:-1], sizes[1:]))
        self.out = Linear(sizes[-1], N_CLASSES)
        self.drop = nn.Dropout(dropout)

    def fit_standardizer(self, z: torch.Tensor) -> None:
        std = z.std(dim=0, unbiased=False)
        self.shift.copy_(z.mean(dim=0))
        self.scale.copy_(torch.where(std > 0, std, torch.ones_like(std)))

    def forward(self, z):
        h = (z - self.shift) / self.scale
        for layer in self.hidden:
            h = self.drop(F.relu(layer(h)))
        return self.out(h)

    def predict_proba(self, z: torch.Tensor) -> np.ndarray:
        was_training = self.training
        self.eval()
        with torch.no_grad():
            probs = torch.softmax(self(z), dim=1).numpy()
        self.train(was_training)
        return probs


def _train_classifier(
    net: nn.Module,
    store: ParamStore,
    x: torch.Tensor,
    labels: torch.Tensor,
    train_cfg: TrainConfig,
    name: str,
    on_epoch: Optional[EpochCallback] = None,
) -> List[float]:
    losses = []
    n = x.shape[0]
    with seeded(train_cfg.seed):
        for epoch in range(1, train_cfg.epochs + 1):
            net.train()
            total = 0.0
            for batch in _batches(n, train_cfg.batch_size, shuffle=True):
                store.zero_grad()
                loss = softmax_cross_entropy(net(x[batch]), labels[batch])
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(epoch, float(loss), name)
                loss.backward()
                adam_step(store)
                total += float(loss) * len(batch)
            losses.append(total / n)
            logger.debug("%s epoch %d: loss=%.6f", name, epoch, losses[-1])
            if on_epoch is not None:
                on_epoch(epoch, losses[-1])
    net.eval()
    return losses


def _labels_tensor(labels: Sequence[int], n: int) -> torch.Tensor:
    y = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    if y.shape != (n,):
        raise ArgumentError(f"{y.numel()} labels for {n} samples")
    if n and (int(y.min()) < 0 or int(y.max()) >= N_CLASSES):
        raise ArgumentError(f"labels must lie in [0, {N_CLASSES})")
    return y


def accuracy(probs: np.ndarray, labels: Sequence[int]) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


def fit_fc_head(
    features: torch.Tensor,
    labels: Sequence[int],
    train_cfg: TrainConfig,
    hidden: Sequence[int] = (128, 32),
    on_epoch: Optional[EpochCallback] = None,
) -> FcHead:
    features = features.to(DTYPE)
    y = _labels_tensor(labels, features.shape[0])
    with seeded(train_cfg.seed):
        head = FcHead(features.shape[1], hidden, train_cfg.dropout_rate)
    head.fit_standardizer(features)
    store = ParamStore(head, lr=train_cfg.learning_rate)
    _train_classifier(head, store, features, y, train_cfg, "fc_head", on_epoch)
    return head


@dataclass
class FcClassifier:
    encoder: ViTAutoencoder
    head: FcHead

    def predict_proba(self, volumes: Sequence[Volume]) -> np.ndarray:
        return self.head.predict_proba(encode_pooled(self.encoder, volumes))


@dataclass
class FcResult:
    classifier: FcClassifier
    train_accuracy: float
    val_probabilities: np.ndarray


def train_fc_head(
    model: ViTAutoencoder,
    volumes: Sequence[Volume],
    labels: Sequence[int],
    train_cfg: TrainConfig,
    val_volumes: Sequence[Volume] = (),
    hidden: Sequence[int] = (128, 32),
    on_epoch: Optional[EpochCallback] = None,
) -> FcResult:
    """Train only the head on pooled embeddings of a frozen encoder."""
    before = parameter_checksum(model)
    frozen = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        train_z = encode_pooled(model, volumes)
        head = fit_fc_head(train_z, labels, train_cfg, hidden, on_epoch)
        val_probs = (
            head.predict_proba(encode_pooled(model, val_volumes))
            if len(val_volumes) else np.empty((0, N_CLASSES))
        )
    finally:
        for p, flag in zip(model.parameters(), frozen):
            p.requires_grad_(flag)
    if parameter_checksum(model) != before:
        raise InvariantError("encoder parameters changed while training the classifier head")
    train_acc = accuracy(head.predict_proba(train_z), labels)
    logger.info("fc head: train accuracy %.3f", train_acc)
    return FcResult(FcClassifier(model, head), train_acc, val_probs)


class CnnConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    variant: Literal["two_rate", "single_rate"] = "two_rate"
    channels: Tuple[int, int, int, int] = (8, 16, 32, 64)
    backbone_lr: float = Field(1e-4, gt=0)
    head_lr: float = Field(1e-2, gt=0)


class CnnBaseline(nn.Module):
    """Four stride-2 3x3x3 conv blocks, global average pool, linear 4-way head."""

    def __init__(self, channels: Sequence[int] = (8, 16, 32, 64)):
        super().__init__()
        sizes = [1, *channels]
        self.backbone = nn.ModuleList(Conv3d(a, b, 3, stride=2, padding=1) for a, b in zip(sizes[:-1], sizes[1:]))
        self.head = Linear(sizes[-1], N_CLASSES)

    def forward(self, x):
        for conv in self.backbone:
            x = F.relu(conv(x))
        return self.head(x.mean(dim=(2, 3, 4)))


def cnn_param_store(model: CnnBaseline, cnn_cfg: CnnConfig, train_cfg: Optional[TrainConfig] = None) -> ParamStore:
    if cnn_cfg.variant == "two_rate":
        return ParamStore(model, lr=cnn_cfg.head_lr,
                          group_lrs={"backbone": cnn_cfg.backbone_lr, "head": cnn_cfg.head_lr})
    lr = train_cfg.learning_rate if train_cfg is not None else cnn_cfg.backbone_lr
    return ParamStore(model, lr=lr)


@dataclass
class CnnClassifier:
    model: CnnBaseline
    train_accuracy: float
    losses: List[float]

    def predict_proba(self, volumes: Sequence[Volume]) -> np.ndarray:
        x = volumes_to_tensor(volumes)
        self.model.eval()
        with torch.no_grad():
            logits = torch.cat([self.model(x[b]) for b in _batches(x.shape[0], 8, False)])
        return torch.softmax(logits, dim=1).numpy()


def train_cnn_baseline(
    volumes: Sequence[Volume],
    labels: Sequence[int],
    train_cfg: TrainConfig,
    cnn_cfg: CnnConfig = CnnConfig(),
    on_epoch: Optional[EpochCallback] = None,
) -> CnnClassifier:
    x = volumes_to_tensor(volumes)
    if min(x.shape[2:]) < CNN_MIN_DIM:
        raise ConfigError(f"CNN baseline needs volumes of at least {CNN_MIN_DIM}^3, got {tuple(x.shape[2:])}")
    y = _labels_tensor(labels, x.shape[0])
    with seeded(train_cfg.seed):
        model = CnnBaseline(cnn_cfg.channels)
    store = cnn_param_store(model, cnn_cfg, train_cfg)
    losses = _train_classifier(model, store, x, y, train_cfg, f"cnn_{cnn_cfg.variant}", on_epoch)
    classifier = CnnClassifier(model, 0.0, losses)
    classifier.train_accuracy = accuracy(classifier.predict_proba(volumes), labels)
    logger.info("cnn %s: train accuracy %.3f", cnn_cfg.variant, classifier.train_accuracy)
    return classifier


# Tabular route


def latent_dim(n_features: int) -> int:
    return min(8, math.ceil(n_features / 2))


class TabularAutoencoder(nn.Module):
    def __init__(self, n_in: int, hidden: int = 8):
        super().__init__()
        self.latent = latent_dim(n_in)
        self.enc1 = Linear(n_in, hidden)
        self.enc2 = Linear(hidden, self.latent)
        self.dec1 = Linear(self.latent, hidden)
        self.dec2 = Linear(hidden, n_in)

    def encode(self, x):
        return self.enc2(F.relu(self.enc1(x)))

    def forward(self, x):
        return self.dec2(F.relu(self.dec1(self.encode(x))))


@dataclass
class TabularEncoder:
    """Train-fitted imputation, standardization and encoder for one feature group."""

    group: str
    medians: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    model: TabularAutoencoder
    reconstruction_mse: float = float("nan")

    def prepare(self, records: Sequence[TabularRecord]) -> torch.Tensor:
        X = feature_matrix(records, self.group)
        X = np.where(np.isnan(X), self.medians, X)
        return torch.from_numpy((X - self.mean) / self.std)

    def transform(self, records: Sequence[TabularRecord]) -> np.ndarray:
        self.model.eval()
        with torch.no_grad():
            return self.model.encode(self.prepare(records)).numpy()


@dataclass
class TabularLatents:
    latents: Dict[str, np.ndarray]
    encoder: TabularEncoder


def train_tabular_autoencoder(
    records: Sequence[TabularRecord],
    feature_group: str,
    train_cfg: TrainConfig,
    train_ids: Optional[Sequence[str]] = None,
) -> TabularLatents:
    """Fit on ``train_ids`` (all records by default); latents for every record."""
    if feature_group not in FEATURE_GROUP_INDEX:
        raise ArgumentError(f"unknown feature group '{feature_group}'")
    names = FEATURE_GROUP_INDEX[feature_group].names
    wanted = set(train_ids) if train_ids is not None else None
    train_records = [r for r in records if wanted is None or r.subject_id in wanted]
    if not train_records:
        raise ArgumentError("no training records for the tabular autoencoder")
    X = feature_matrix(train_records, feature_group)
    for j, name in enumerate(names):
        if np.all(np.isnan(X[:, j])):
            raise DataError(f"feature column '{name}' is missing for every training subject")
    medians = np.nanmedian(X, axis=0)
    X = np.where(np.isnan(X), medians, X)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1.0)

    with seeded(train_cfg.seed):
        model = TabularAutoencoder(len(names))
    encoder = TabularEncoder(feature_group, medians, mean, std, model)
    x = torch.from_numpy((X - mean) / std)
    store = ParamStore(model, lr=train_cfg.learning_rate)
    with seeded(train_cfg.seed):
        for epoch in range(1, train_cfg.epochs + 1):
            model.train()
            for batch in _batches(x.shape[0], train_cfg.batch_size, shuffle=True):
                store.zero_grad()
                loss = mse_loss(model(x[batch]), x[batch])
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(epoch, float(loss), f"tabular_ae[{feature_group}]")
                loss.backward()
                adam_step(store)
    model.eval()
    with torch.no_grad():
        encoder.reconstruction_mse = float(mse_loss(model(x), x))
    logger.debug("tabular ae %s: latent=%d mse=%.5f", feature_group, model.latent, encoder.reconstruction_mse)
    latents = encoder.transform(records)
    return TabularLatents({r.subject_id: z for r, z in zip(records, latents)}, encoder)
