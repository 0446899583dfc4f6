"""Multiview multi-task network: five convolutional view branches, feature
masking of the concatenated embedding, cross-view fusion (dense or
transformer), and joint classification + glucose-regression heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autonn as nn
from .autonn import ParamStore, Tensor
from .errors import InvalidConfig, LeakageDetected, NonFiniteLoss, ShapeMismatch
from .synthcohort import VIEWS

VARIANTS = ("single_view", "multiview", "multiview_mrfo", "full")


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    branch_channels: tuple = (8, 16, 32)
    embed_dim: int = 32
    fusion_dim: int = 64
    fusion_layers: int = 2
    fusion_heads: int = 4
    lambda_reg: float = 1.0
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidConfig(f"unknown variant {self.variant!r}")
        if self.fusion_dim % self.fusion_heads:
            raise InvalidConfig("fusion_dim must be divisible by fusion_heads")
        if self.embed_dim < 1 or self.lambda_reg < 0:
            raise InvalidConfig("embed_dim >= 1 and lambda_reg >= 0 required")
        size = self.input_size
        for _ in self.branch_channels:
            if size % 2:
                raise InvalidConfig("input_size must halve through every block")
            size //= 2

    @property
    def views(self) -> tuple:
        return ("straight",) if self.variant == "single_view" else VIEWS

    @property
    def mask_dim(self) -> int:
        return len(self.views) * self.embed_dim

    @property
    def uses_transformer(self) -> bool:
        return self.variant == "full"

    @property
    def uses_mrfo(self) -> bool:
        return self.variant in ("multiview_mrfo", "full")


@dataclass(frozen=True)
class Hyper:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 30
    finetune_epochs: int = 10


@dataclass
class Prediction:
    class_probs: np.ndarray
    glucose_mgdl: float


def _he_uniform(rng, fan_in: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def build_model(config: ModelConfig, seed: int,
                fpg_mean: float = 0.0, fpg_sd: float = 1.0) -> ParamStore:
    """He-uniform conv/dense weights, zero biases, unit layer-norm gains.

    Fold-level glucose normalization constants ride along as non-trainable
    parameters so checkpoints are self-contained.
    """
    rng = np.random.default_rng(seed)
    store = ParamStore()
    c = config
    for view in c.views:
        in_ch = 1
        for i, out_ch in enumerate(c.branch_channels):
            fan_in = in_ch * 9
            store.add(f"branch.{view}.conv{i}.w",
                      _he_uniform(rng, fan_in, (out_ch, in_ch, 3, 3)))
            store.add(f"branch.{view}.conv{i}.b", np.zeros((out_ch, 1, 1)))
            in_ch = out_ch
        store.add(f"branch.{view}.embed.w",
                  _he_uniform(rng, in_ch, (in_ch, c.embed_dim)))
        store.add(f"branch.{view}.embed.b", np.zeros(c.embed_dim))

    if c.uses_transformer:
        for view in c.views:
            store.add(f"fuse.proj.{view}.w",
                      _he_uniform(rng, c.embed_dim, (c.embed_dim, c.fusion_dim)))
            store.add(f"fuse.proj.{view}.b", np.zeros(c.fusion_dim))
        d = c.fusion_dim
        for layer in range(c.fusion_layers):
            pre = f"fuse.layer{layer}"
            for ln in ("ln1", "ln2"):
                store.add(f"{pre}.{ln}.gamma", np.ones(d))
                store.add(f"{pre}.{ln}.beta", np.zeros(d))
            for w in ("wq", "wk", "wv", "wo"):
                store.add(f"{pre}.attn.{w}", _he_uniform(rng, d, (d, d)))
            store.add(f"{pre}.ffn.w1", _he_uniform(rng, d, (d, 2 * d)))
            store.add(f"{pre}.ffn.b1", np.zeros(2 * d))
            store.add(f"{pre}.ffn.w2", _he_uniform(rng, 2 * d, (2 * d, d)))
            store.add(f"{pre}.ffn.b2", np.zeros(d))
    else:
        store.add("fuse.dense.w",
                  _he_uniform(rng, c.mask_dim, (c.mask_dim, c.fusion_dim)))
        store.add("fuse.dense.b", np.zeros(c.fusion_dim))

    store.add("head.cls.w", _he_uniform(rng, c.fusion_dim, (c.fusion_dim, 3)))
    store.add("head.cls.b", np.zeros(3))
    store.add("head.reg.w", _he_uniform(rng, c.fusion_dim, (c.fusion_dim, 1)))
    store.add("head.reg.b", np.zeros(1))
    store.add("norm.fpg_mean", np.array([fpg_mean]), trainable=False)
    store.add("norm.fpg_sd", np.array([fpg_sd]), trainable=False)
    return store


def _branch_forward(store: ParamStore, view: str, x: Tensor, config: ModelConfig,
                    acts: dict | None):
    for i in range(len(config.branch_channels)):
        x = nn.conv2d(x, store[f"branch.{view}.conv{i}.w"], stride=1, padding=1)
        x = nn.add(x, store[f"branch.{view}.conv{i}.b"])
        x = nn.relu(x)
        if acts is not None:
            acts[(view, i)] = x
        x = nn.max_pool2(x)
    x = nn.global_avg_pool(x)
    return nn.dense_affine(x, store[f"branch.{view}.embed.w"],
                           store[f"branch.{view}.embed.b"])


def forward_batch(store: ParamStore, views_x: np.ndarray, config: ModelConfig,
                  mask: np.ndarray | None = None, capture_acts: bool = False):
    """Forward pass over a batch.

    views_x: (batch, num_views, size, size) in branch-view order.
    Returns (logits Tensor (b,3), z-score Tensor (b,), activations dict).
    """
    c = config
    b = views_x.shape[0]
    if views_x.shape[1] != len(c.views):
        raise ShapeMismatch(f"expected {len(c.views)} views, got {views_x.shape[1]}")
    if mask is not None and mask.shape != (c.mask_dim,):
        raise ShapeMismatch(f"mask must have length {c.mask_dim}")
    acts: dict | None = {} if capture_acts else None

    embeds = []
    for vi, view in enumerate(c.views):
        x = Tensor(views_x[:, vi:vi + 1])
        embeds.append(_branch_forward(store, view, x, c, acts))
    emb = nn.concat(embeds, axis=1)  # (b, views*embed_dim)
    if mask is not None:
        emb = nn.mul(emb, Tensor(mask))

    if c.uses_transformer:
        tokens = []
        for vi, view in enumerate(c.views):
            part = nn.slice_axis(emb, 1, vi * c.embed_dim, (vi + 1) * c.embed_dim)
            tok = nn.dense_affine(part, store[f"fuse.proj.{view}.w"],
                                  store[f"fuse.proj.{view}.b"])
            tokens.append(nn.reshape(tok, (b, 1, c.fusion_dim)))
        x = nn.concat(tokens, axis=1)  # (b, views, fusion_dim)
        for layer in range(c.fusion_layers):
            pre = f"fuse.layer{layer}"
            h = nn.layer_norm(x, store[f"{pre}.ln1.gamma"], store[f"{pre}.ln1.beta"])
            attn_out, _ = nn.multi_head_self_attention(
                h, store[f"{pre}.attn.wq"], store[f"{pre}.attn.wk"],
                store[f"{pre}.attn.wv"], store[f"{pre}.attn.wo"], c.fusion_heads)
            x = nn.add(x, attn_out)
            h = nn.layer_norm(x, store[f"{pre}.ln2.gamma"], store[f"{pre}.ln2.beta"])
            h = nn.dense_affine(h, store[f"{pre}.ffn.w1"], store[f"{pre}.ffn.b1"])
            h = nn.relu(h)
            h = nn.dense_affine(h, store[f"{pre}.ffn.w2"], store[f"{pre}.ffn.b2"])
            x = nn.add(x, h)
        fused = nn.mean_axis(x, axis=1)
    else:
        fused = nn.relu(nn.dense_affine(emb, store["fuse.dense.w"], store["fuse.dense.b"]))

    logits = nn.dense_affine(fused, store["head.cls.w"], store["head.cls.b"])
    z = nn.reshape(nn.dense_affine(fused, store["head.reg.w"], store["head.reg.b"]), (b,))
    return logits, z, acts


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict(store: ParamStore, views_x: np.ndarray, config: ModelConfig,
            mask: np.ndarray | None = None) -> Prediction:
    """Single-participant inference: one joint pass over the views."""
    logits, z, _ = forward_batch(store, views_x[None], config, mask)
    probs = _softmax_rows(logits.data)[0]
    mean = float(store["norm.fpg_mean"].data[0])
    sd = float(store["norm.fpg_sd"].data[0])
    return Prediction(class_probs=probs, glucose_mgdl=float(z.data[0]) * sd + mean)


def composite_loss(logits: Tensor, z_pred: Tensor, labels, fpg_true,
                   lambda_reg: float, fpg_mean: float, fpg_sd: float) -> Tensor:
    """Cross-entropy plus lambda * MSE on the z-scored glucose target."""
    n = logits.data.shape[0]
    if z_pred.data.shape[0] != n or len(labels) != n:
        raise ShapeMismatch("batch sizes disagree")
    ce = nn.softmax_cross_entropy(logits, labels)
    z_true = (np.asarray(fpg_true, dtype=np.float64) - fpg_mean) / fpg_sd
    if lambda_reg == 0.0:
        return ce
    mse = nn.mean_all(nn.square(nn.sub(z_pred, Tensor(z_true))))
    return nn.add(ce, nn.scale(mse, lambda_reg))


@dataclass
class FoldData:
    """Preprocessed per-participant tensors for one cross-validation round."""

    views_x: dict  # pid -> (num_views, size, size) float array
    labels: dict  # pid -> class index
    fpg: dict  # pid -> mg/dL


def fpg_stats(data: FoldData, pids) -> tuple:
    vals = np.array([data.fpg[p] for p in pids])
    sd = float(vals.std(ddof=0))
    return float(vals.mean()), sd if sd > 0 else 1.0


def train_fold(data: FoldData, train_ids, val_ids, test_ids,
               config: ModelConfig, hyper: Hyper, seed: int,
               mask: np.ndarray | None = None,
               initial: ParamStore | None = None,
               epochs: int | None = None):
    """Mini-batch Adam on the composite loss; returns the best-validation
    parameter snapshot and the per-epoch history.

    Raises LeakageDetected if any test participant reaches the training or
    validation stream.
    """
    train_ids = list(train_ids)
    val_ids = list(val_ids)
    test_set = set(test_ids)
    overlap = (set(train_ids) | set(val_ids)) & test_set
    if overlap:
        raise LeakageDetected(f"test participants in training stream: {sorted(overlap)}")

    fpg_mean, fpg_sd = fpg_stats(data, train_ids)
    if initial is None:
        store = build_model(config, seed, fpg_mean, fpg_sd)
    else:
        store = initial
        store["norm.fpg_mean"].data = np.array([fpg_mean])
        store["norm.fpg_sd"].data = np.array([fpg_sd])

    def batch_arrays(pids):
        x = np.stack([data.views_x[p] for p in pids])
        y = np.array([data.labels[p] for p in pids], dtype=np.int64)
        g = np.array([data.fpg[p] for p in pids])
        return x, y, g

    def eval_loss(pids):
        x, y, g = batch_arrays(pids)
        logits, z, _ = forward_batch(store, x, config, mask)
        loss = composite_loss(logits, z, y, g, config.lambda_reg, fpg_mean, fpg_sd)
        preds = logits.data.argmax(axis=1)
        return float(loss.data), float(np.mean(preds == y))

    rng = np.random.default_rng(seed + 1)
    n_epochs = hyper.epochs if epochs is None else epochs
    history = []
    best_val = np.inf
    best_snap = store.snapshot()
    for epoch in range(n_epochs):
        order = rng.permutation(len(train_ids))
        epoch_loss = 0.0
        batches = 0
        for start in range(0, len(train_ids), hyper.batch_size):
            pids = [train_ids[i] for i in order[start:start + hyper.batch_size]]
            x, y, g = batch_arrays(pids)
            store.zero_grad()
            logits, z, _ = forward_batch(store, x, config, mask)
            loss = composite_loss(logits, z, y, g, config.lambda_reg, fpg_mean, fpg_sd)
            if not np.isfinite(loss.data):
                raise NonFiniteLoss(f"loss diverged at epoch {epoch}")
            loss.backward()
            store.adam_step(hyper.lr)
            epoch_loss += float(loss.data)
            batches += 1
        if val_ids:
            val_loss, val_acc = eval_loss(val_ids)
        else:
            val_loss, val_acc = epoch_loss / max(batches, 1), float("nan")
        history.append({"epoch": epoch, "train_loss": epoch_loss / max(batches, 1),
                        "val_loss": val_loss, "val_accuracy": val_acc})
        if val_loss < best_val:
            best_val = val_loss
            best_snap = store.snapshot()
    store.restore(best_snap)
    return store, history


def extract_embeddings(store: ParamStore, data: FoldData, pids,
                       config: ModelConfig) -> np.ndarray:
    """Concatenated multiview embeddings from the frozen branches."""
    x = np.stack([data.views_x[p] for p in pids])
    embeds = []
    for vi, view in enumerate(config.views):
        t = _branch_forward(store, view, Tensor(x[:, vi:vi + 1]), config, None)
        embeds.append(t.data)
    return np.concatenate(embeds, axis=1)
