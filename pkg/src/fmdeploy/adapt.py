"""Adaptation strategies: masked-reconstruction SSL, fine-tuning, frozen heads, boosted baseline.

Only the train side of a split ever touches trainable state, normalization or
imputation statistics. Every stochastic choice (batch order, SSL masks, dropout,
head init) is drawn from generators seeded by ``TrainConfig.seed``.
"""
from __future__ import annotations

import hashlib
import logging
import math
import pickle
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from sklearn.ensemble import HistGradientBoostingClassifier
from torch import nn
from torch.nn import functional as F

from fmdeploy.data import (
    TASK_CLASSES,
    UNKNOWN,
    BandSchema,
    Dataset,
    NormStats,
    SampleArrays,
    compute_normalization_stats,
)
from fmdeploy.encoder import (
    PixelEncoder,
    as_tensors,
    build_encoder,
    clone_encoder,
    encoder_from_meta,
    encoder_meta,
    read_npz,
    run_chunked,
    state_arrays,
    write_npz,
)
from fmdeploy.splits import DatasetSplit

log = logging.getLogger(__name__)

MODES = ("finetune", "ssl_then_finetune", "frozen_head", "random_init_finetune", "boosted_raw")
CLASSIFIER_FORMAT = "fmdeploy.classifier/1"


@dataclass(frozen=True)
class TrainConfig:
    task: str = "cropland_binary"
    mode: str = "finetune"
    epochs: int = 8
    batch_size: int = 128
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    ssl_mask_ratio: float = 0.5
    ssl_epochs: int = 2
    seed: int = 0
    class_weighting: bool = False
    # boosted baseline
    n_trees: int = 200
    tree_depth: int = 6
    tree_learning_rate: float = 0.1

    def validate(self) -> None:
        if self.task not in TASK_CLASSES:
            raise ValueError(f"unknown task {self.task!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0 < self.ssl_mask_ratio < 1:
            raise ValueError("ssl_mask_ratio must be in (0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0 or self.ssl_epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# --- shared training loop ------------------------------------------------------------


def _cosine_lr(base: float, step: int, total: int) -> float:
    return base * 0.5 * (1.0 + math.cos(math.pi * step / max(total, 1)))


def _fit(
    params: Sequence[nn.Parameter],
    n_samples: int,
    config: TrainConfig,
    epochs: int,
    batch_loss: Callable[[np.ndarray, torch.Generator], tuple[torch.Tensor, dict]],
    seed_offset: int = 0,
    on_epoch: Callable[[int, dict], None] | None = None,
) -> None:
    """AdamW with per-step cosine decay (no warmup) over shuffled minibatches."""
    if epochs == 0:
        return
    seed = config.seed * 1_000_003 + seed_offset
    torch.manual_seed(seed)  # dropout
    order_gen = torch.Generator().manual_seed(seed)
    aux_gen = torch.Generator().manual_seed(seed + 1)
    opt = torch.optim.AdamW(
        params, lr=config.learning_rate, betas=(0.9, 0.999), weight_decay=config.weight_decay
    )
    steps_per_epoch = math.ceil(n_samples / config.batch_size)
    total, step = epochs * steps_per_epoch, 0
    for epoch in range(1, epochs + 1):
        perm = torch.randperm(n_samples, generator=order_gen).numpy()
        sums: dict[str, float] = {}
        for start in range(0, n_samples, config.batch_size):
            for g in opt.param_groups:
                g["lr"] = _cosine_lr(config.learning_rate, step, total)
            loss, stats = batch_loss(perm[start : start + config.batch_size], aux_gen)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            for k, v in stats.items():
                sums[k] = sums.get(k, 0.0) + v
        if on_epoch is not None:
            on_epoch(epoch, {k: v / steps_per_epoch for k, v in sums.items()})


# --- self-supervised masked reconstruction -------------------------------------------


def ssl_token_mask(
    mask: torch.Tensor, slices: dict[str, slice], ratio: float, gen: torch.Generator
) -> torch.Tensor:
    """Pick ``floor(ratio * n_observed)`` observed dynamic tokens per sample to hide.

    Returns a ``[B, T, G]`` bool tensor of hidden tokens. At least one observed
    token always stays visible.
    """
    obs = torch.stack([mask[..., sl].any(dim=-1) for sl in slices.values()], dim=-1)
    b, t, g = obs.shape
    flat = obs.reshape(b, t * g)
    n_obs = flat.sum(dim=1)
    k = torch.clamp(torch.floor(ratio * n_obs.double()).long(), min=1)
    k = torch.minimum(k, n_obs - 1).clamp(min=0)
    scores = torch.rand(b, t * g, generator=gen, dtype=torch.float64)
    scores = torch.where(flat, scores, torch.full_like(scores, 2.0))
    ranks = scores.argsort(dim=1).argsort(dim=1)
    return (ranks < k[:, None]).reshape(b, t, g)


def masked_reconstruction_loss(pred: torch.Tensor, target: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Mean squared error over positions where ``weight`` is True (other positions are ignored)."""
    sq = torch.where(weight, (pred - torch.where(weight, target, torch.zeros_like(target))) ** 2, 0.0)
    return sq.sum() / weight.sum().clamp(min=1)


class ReconstructionHead(nn.Module):
    def __init__(self, encoder: PixelEncoder, seed: int):
        super().__init__()
        d = encoder.embed_dim
        self.slices = dict(encoder.dyn_slices)
        self.decoders = nn.ModuleDict({k: nn.Linear(d, sl.stop - sl.start) for k, sl in self.slices.items()})
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for lin in self.decoders.values():
                nn.init.trunc_normal_(lin.weight, std=0.02, a=-0.04, b=0.04, generator=gen)
                nn.init.zeros_(lin.bias)

    def forward(self, tokens: torch.Tensor, n_timesteps: int) -> torch.Tensor:
        """Reconstruct ``[B, T, n_dynamic_bands]`` from encoder output tokens."""
        outs = []
        for gi, (name, _) in enumerate(self.slices.items()):
            part = tokens[:, gi * n_timesteps : (gi + 1) * n_timesteps]
            outs.append(self.decoders[name](part))
        return torch.cat(outs, dim=-1)


def ssl_loss(
    encoder: PixelEncoder,
    decoder: ReconstructionHead,
    batch: tuple[torch.Tensor, ...],
    ratio: float,
    gen: torch.Generator,
) -> torch.Tensor:
    dynamic, mask, static, months, latlon = batch
    hidden = ssl_token_mask(mask, encoder.dyn_slices, ratio, gen)
    band_hidden = torch.cat(
        [hidden[..., gi : gi + 1].expand(-1, -1, sl.stop - sl.start) for gi, sl in enumerate(encoder.dyn_slices.values())],
        dim=-1,
    )
    visible = mask & ~band_hidden
    tokens, _ = encoder.forward_tokens(dynamic, visible, static, months, latlon)
    pred = decoder(tokens, dynamic.shape[1])
    return masked_reconstruction_loss(pred, dynamic.to(pred.dtype), band_hidden & mask)


def _probe_loss(encoder, decoder, arrays: SampleArrays, ratio: float, seed: int) -> float:
    """SSL loss on a fixed probe subset with fixed masks, in inference mode."""
    enc_mode, dec_mode = encoder.training, decoder.training
    encoder.eval()
    decoder.eval()
    gen = torch.Generator().manual_seed(seed)
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(arrays), 256):
            batch = as_tensors(arrays.take(np.arange(start, min(start + 256, len(arrays)))))
            n = batch[0].shape[0]
            total += float(ssl_loss(encoder, decoder, batch, ratio, gen)) * n
            count += n
    encoder.train(enc_mode)
    decoder.train(dec_mode)
    return total / max(count, 1)


def ssl_pretrain(
    encoder: PixelEncoder,
    unlabeled: Dataset,
    config: TrainConfig,
    epochs: int | None = None,
    probe_size: int = 1024,
) -> tuple[PixelEncoder, list[dict]]:
    """Masked-reconstruction pretraining on a copy of ``encoder``.

    Labels are ignored. The returned curve starts with the probe loss before
    training (epoch 0) followed by one row per epoch. ``epochs`` defaults to
    ``config.epochs``.
    """
    config.validate()
    epochs = config.epochs if epochs is None else epochs
    if epochs == 0:
        return clone_encoder(encoder), []
    if len(unlabeled) < config.batch_size:
        raise ValueError(f"SSL dataset has {len(unlabeled)} samples, fewer than one batch ({config.batch_size})")
    model = clone_encoder(encoder)
    if model.norm_stats is None:
        model.norm_stats = compute_normalization_stats(unlabeled)
    arrays = model.norm_stats.apply(unlabeled.arrays)
    decoder = ReconstructionHead(model, seed=config.seed + 17)
    probe_idx = np.random.default_rng(config.seed).permutation(len(arrays))[:probe_size]
    probe = arrays.take(np.sort(probe_idx))
    probe_seed = config.seed + 29

    curve = [{"epoch": 0, "side": "probe", "loss": _probe_loss(model, decoder, probe, config.ssl_mask_ratio, probe_seed)}]
    model.train()
    decoder.train()

    def batch_loss(idx, gen):
        loss = ssl_loss(model, decoder, as_tensors(arrays.take(idx)), config.ssl_mask_ratio, gen)
        return loss, {"loss": loss.item()}

    def on_epoch(epoch, stats):
        row = {"epoch": epoch, "side": "probe", "loss": _probe_loss(model, decoder, probe, config.ssl_mask_ratio, probe_seed)}
        row["train_loss"] = stats["loss"]
        curve.append(row)
        log.info("ssl epoch %d: train %.4f probe %.4f", epoch, stats["loss"], row["loss"])

    _fit(list(model.parameters()) + list(decoder.parameters()), len(arrays), config, epochs, batch_loss, 7, on_epoch)
    model.eval()
    _check_finite(curve)
    return model, curve


def _check_finite(curve: list[dict]) -> None:
    for row in curve:
        for k, v in row.items():
            if isinstance(v, float) and not math.isfinite(v):
                raise FloatingPointError(f"non-finite {k} in training curve at epoch {row.get('epoch')}")


# --- classifiers ---------------------------------------------------------------------


@dataclass(eq=False)
class TrainedClassifier:
    kind: str  # "encoder_head" | "boosted_trees"
    task: str
    classes: tuple[str, ...]
    schema: BandSchema
    encoder: PixelEncoder | None = None
    head: nn.Linear | None = None
    booster: HistGradientBoostingClassifier | None = None
    impute_means: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def curve(self) -> list[dict]:
        return self.provenance.get("curve", [])


@dataclass(frozen=True)
class Prediction:
    classes: tuple[str, ...]
    index: np.ndarray  # [N]
    probs: np.ndarray  # [N, K]

    @property
    def labels(self) -> list[str]:
        return [self.classes[i] for i in self.index]


def _task_side(dataset: Dataset, ids: Sequence[str], task: str) -> tuple[Dataset, np.ndarray]:
    """Samples among ``ids`` with a known task label, and their class indices."""
    classes = TASK_CLASSES[task]
    sub = dataset.subset(ids).filter(lambda s: s.label(task) != UNKNOWN)
    y = np.array([classes.index(s.label(task)) for s in sub], dtype=np.int64)
    return sub, y


def _check_train_side(sub: Dataset, y: np.ndarray, task: str) -> None:
    classes = TASK_CLASSES[task]
    if len(sub) == 0:
        raise ValueError("train side has no samples with a known task label")
    missing = [c for i, c in enumerate(classes) if not (y == i).any()]
    if missing:
        warnings.warn(f"classes absent from train side: {missing}", stacklevel=3)


def _class_weights(y: np.ndarray, k: int) -> np.ndarray:
    counts = np.bincount(y, minlength=k).astype(np.float64)
    w = np.where(counts > 0, len(y) / (k * np.maximum(counts, 1)), 0.0)
    return w


def fingerprint(dataset: Dataset) -> str:
    """Cheap content hash of ids, arrays and labels."""
    h = hashlib.sha256()
    a = dataset.arrays
    h.update("\n".join(dataset.ids).encode())
    for arr in (a.dynamic, a.mask, a.static, a.latlon):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update("|".join(f"{s.label_cropland},{s.label_croptype},{s.country},{s.year}" for s in dataset).encode())
    return h.hexdigest()


def _head_logits(head: nn.Linear, emb: torch.Tensor, task: str) -> torch.Tensor:
    out = head(emb)
    return out[:, 0] if task == "cropland_binary" else out


def _task_loss(logits, y, task, weights: torch.Tensor | None):
    if task == "cropland_binary":
        yf = y.to(logits.dtype)
        if weights is None:
            return F.binary_cross_entropy_with_logits(logits, yf)
        return F.binary_cross_entropy_with_logits(logits, yf, weight=weights[y])
    return F.cross_entropy(logits, y, weight=weights)


def _new_head(d: int, task: str, seed: int) -> nn.Linear:
    n_out = 1 if task == "cropland_binary" else len(TASK_CLASSES[task])
    head = nn.Linear(d, n_out)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        nn.init.trunc_normal_(head.weight, std=0.02, a=-0.04, b=0.04, generator=gen)
        nn.init.zeros_(head.bias)
    return head


def finetune(
    encoder: PixelEncoder,
    labeled: Dataset,
    split: DatasetSplit,
    config: TrainConfig,
    ssl_data: Dataset | None = None,
) -> TrainedClassifier:
    """Attach a linear head and train it (with or without the encoder) on the train side.

    ``config.mode`` selects the variant: ``finetune`` (encoder + head),
    ``frozen_head`` (head on fixed embeddings), ``random_init_finetune`` (fresh
    encoder of the same config) or ``ssl_then_finetune`` (masked-reconstruction
    rounds on ``ssl_data`` minus validation ids and held-out countries or years, then ``finetune``).
    """
    config.validate()
    task, mode = config.task, config.mode
    if mode == "boosted_raw":
        return train_boosted_baseline(labeled, split, config)
    train, y_np = _task_side(labeled, split.train_ids, task)
    _check_train_side(train, y_np, task)

    ssl_curve: list[dict] = []
    if mode == "random_init_finetune":
        model = build_encoder(encoder.config, seed=config.seed)
    elif mode == "ssl_then_finetune":
        if ssl_data is None:
            raise ValueError("ssl_then_finetune needs ssl_data")
        val = set(split.val_ids)
        held_c = set(split.holdout.get("countries", ()))
        held_y = set(split.holdout.get("years", ()))
        pool = ssl_data.filter(lambda s: s.sample_id not in val and s.country not in held_c and s.year not in held_y)
        model, ssl_curve = ssl_pretrain(encoder, pool, config, epochs=config.ssl_epochs)
    else:
        model = clone_encoder(encoder)
    if model.norm_stats is None:
        model.norm_stats = compute_normalization_stats(train)

    arrays = model.norm_stats.apply(train.arrays)
    k = len(TASK_CLASSES[task])
    weights = torch.as_tensor(_class_weights(y_np, k), dtype=torch.float32) if config.class_weighting else None
    head = _new_head(model.embed_dim, task, config.seed + 3)
    y = torch.as_tensor(y_np)
    curve: list[dict] = []

    def on_epoch(epoch, stats):
        curve.append({"epoch": epoch, "side": "train", "loss": stats["loss"], "accuracy": stats["accuracy"]})
        log.info("%s epoch %d: loss %.4f acc %.3f", mode, epoch, stats["loss"], stats["accuracy"])

    def _acc(logits, yb):
        pred = (logits > 0).long() if task == "cropland_binary" else logits.argmax(dim=1)
        return float((pred == yb).double().mean())

    if mode == "frozen_head":
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        emb = torch.as_tensor(run_chunked(model, arrays), dtype=torch.float32)

        def batch_loss(idx, gen):
            logits = _head_logits(head, emb[idx], task)
            loss = _task_loss(logits, y[idx], task, weights)
            return loss, {"loss": loss.item(), "accuracy": _acc(logits.detach(), y[idx])}

        _fit(list(head.parameters()), len(train), config, config.epochs, batch_loss, 11, on_epoch)
    else:
        model.train()
        head.train()

        def batch_loss(idx, gen):
            emb = model(*as_tensors(arrays.take(idx)))
            logits = _head_logits(head, emb, task)
            loss = _task_loss(logits, y[idx], task, weights)
            return loss, {"loss": loss.item(), "accuracy": _acc(logits.detach(), y[idx])}

        _fit(list(model.parameters()) + list(head.parameters()), len(train), config, config.epochs, batch_loss, 11, on_epoch)

    _check_finite(curve)
    _check_finite(ssl_curve)
    model.eval()
    head.eval()
    for p in list(model.parameters()) + list(head.parameters()):
        p.requires_grad_(False)
    return TrainedClassifier(
        kind="encoder_head",
        task=task,
        classes=TASK_CLASSES[task],
        schema=model.config.schema,
        encoder=model,
        head=head,
        provenance={
            "config": config.to_dict(),
            "split_id": split.split_id,
            "dataset": fingerprint(labeled),
            "curve": curve,
            "ssl_curve": ssl_curve,
        },
    )


# --- boosted baseline ----------------------------------------------------------------


def raw_features(arrays: SampleArrays, impute_means: np.ndarray) -> np.ndarray:
    """Flattened ``[T*B dynamic | S static | T*B missing indicators]`` with mean imputation."""
    n = len(arrays)
    filled = np.where(arrays.mask, arrays.dynamic, impute_means[None, None, :])
    missing = (~arrays.mask).astype(np.float64)
    return np.concatenate([filled.reshape(n, -1), arrays.static, missing.reshape(n, -1)], axis=1)


def train_boosted_baseline(labeled: Dataset, split: DatasetSplit, config: TrainConfig) -> TrainedClassifier:
    """Gradient-boosted trees on the raw timeseries (mean-imputed, with missingness flags)."""
    config.validate()
    task = config.task
    train, y = _task_side(labeled, split.train_ids, task)
    _check_train_side(train, y, task)
    if len(np.unique(y)) < 2:
        raise ValueError("boosted baseline needs at least two classes on the train side")
    a = train.arrays
    counts = a.mask.sum(axis=(0, 1))
    sums = np.where(a.mask, a.dynamic, 0.0).sum(axis=(0, 1))
    impute = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    X = raw_features(a, impute)
    model = HistGradientBoostingClassifier(
        max_iter=config.n_trees,
        max_depth=config.tree_depth,
        max_leaf_nodes=2**config.tree_depth,
        learning_rate=config.tree_learning_rate,
        early_stopping=False,
        random_state=config.seed,
    )
    sw = _class_weights(y, len(TASK_CLASSES[task]))[y] if config.class_weighting else None
    model.fit(X, y, sample_weight=sw)
    train_acc = float((model.predict(X) == y).mean())
    return TrainedClassifier(
        kind="boosted_trees",
        task=task,
        classes=TASK_CLASSES[task],
        schema=labeled.schema,
        booster=model,
        impute_means=impute,
        provenance={
            "config": replace(config, mode="boosted_raw").to_dict(),
            "split_id": split.split_id,
            "dataset": fingerprint(labeled),
            "curve": [{"epoch": config.n_trees, "side": "train", "accuracy": train_acc}],
        },
    )


# --- inference -----------------------------------------------------------------------


def _softmax64(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_arrays(classifier: TrainedClassifier, arrays: SampleArrays) -> Prediction:
    k = len(classifier.classes)
    if arrays.dynamic.shape[-1] != len(classifier.schema.dynamic_bands) or arrays.static.shape[-1] != len(
        classifier.schema.static_bands
    ):
        raise ValueError("samples do not match the classifier's band schema")
    if len(arrays) == 0:
        return Prediction(classifier.classes, np.zeros(0, np.int64), np.zeros((0, k)))
    if classifier.kind == "boosted_trees":
        proba = classifier.booster.predict_proba(raw_features(arrays, classifier.impute_means))
        probs = np.zeros((len(arrays), k))
        probs[:, classifier.booster.classes_] = proba
    else:
        enc, head, task = classifier.encoder, classifier.head, classifier.task
        norm = enc.norm_stats.apply(arrays)
        logits = run_chunked(lambda *t: head(enc(*t)), norm)
        if task == "cropland_binary":
            p = 1.0 / (1.0 + np.exp(-logits[:, 0]))
            probs = np.stack([1.0 - p, p], axis=1)
        else:
            probs = _softmax64(logits)
    return Prediction(classifier.classes, np.argmax(probs, axis=1), probs)


def predict(classifier: TrainedClassifier, samples: Dataset | SampleArrays) -> Prediction:
    """Per-sample class (argmax, lowest index wins ties) and probability vector."""
    if isinstance(samples, Dataset):
        if samples.schema != classifier.schema:
            raise ValueError("dataset band schema differs from the classifier's")
        samples = samples.arrays
    return predict_arrays(classifier, samples)


# --- artifacts -----------------------------------------------------------------------


def save_classifier(classifier: TrainedClassifier, path: str | Path) -> None:
    meta = {
        "format": CLASSIFIER_FORMAT,
        "kind": classifier.kind,
        "task": classifier.task,
        "classes": list(classifier.classes),
        "schema": classifier.schema.to_dict(),
        "provenance": classifier.provenance,
    }
    params: dict[str, np.ndarray] = {}
    if classifier.kind == "encoder_head":
        meta["encoder"] = encoder_meta(classifier.encoder)
        params.update(state_arrays(classifier.encoder, "encoder."))
        params.update(state_arrays(classifier.head, "head."))
    else:
        params["booster"] = np.frombuffer(pickle.dumps(classifier.booster, protocol=4), dtype=np.uint8)
        params["impute_means"] = classifier.impute_means
    write_npz(path, meta, params)


def load_classifier(path: str | Path) -> TrainedClassifier:
    """Load a classifier artifact. Boosted artifacts are unpickled: load trusted files only."""
    meta, params = read_npz(path)
    if meta.get("format") != CLASSIFIER_FORMAT:
        raise ValueError(f"{path}: not a classifier artifact (format={meta.get('format')!r})")
    common = dict(
        kind=meta["kind"],
        task=meta["task"],
        classes=tuple(meta["classes"]),
        schema=BandSchema.from_dict(meta["schema"]),
        provenance=meta["provenance"],
    )
    if meta["kind"] == "encoder_head":
        enc = encoder_from_meta(meta["encoder"], params, "encoder.")
        enc.eval()
        n_out = params["head.weight"].shape[0]
        head = nn.Linear(enc.embed_dim, n_out)
        head.load_state_dict({k[5:]: torch.from_numpy(v) for k, v in params.items() if k.startswith("head.")})
        head.eval()
        return TrainedClassifier(encoder=enc, head=head, **common)
    booster = pickle.loads(params["booster"].tobytes())
    return TrainedClassifier(booster=booster, impute_means=params["impute_means"], **common)


def train_variant(
    mode: str,
    base_encoder: PixelEncoder,
    labeled: Dataset,
    split: DatasetSplit,
    config: TrainConfig,
    ssl_data: Dataset | None = None,
) -> TrainedClassifier:
    """Dispatch one model variant of an experiment."""
    config = replace(config, mode=mode)
    if mode == "boosted_raw":
        return train_boosted_baseline(labeled, split, config)
    return finetune(base_encoder, labeled, split, config, ssl_data=ssl_data)
