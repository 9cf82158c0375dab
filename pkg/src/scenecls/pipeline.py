"""Dataset handling and the training loop.

Training operates on segments (each inheriting its clip's label), runs a
fixed number of epochs of Adadelta over shuffled mini-batches, validates
after every epoch with clip-level fused macro accuracy, and keeps the
parameter snapshot of the best validation epoch (earliest on ties). No
learning-rate schedule, no early stopping.
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluation, features, models, nn
from .audio import downmix_mono, load_wav, normalize_amplitude, resample
from .evaluation import CLASS_INDEX

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during fitting."""


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str

    @property
    def label_index(self) -> int:
        return CLASS_INDEX[self.label]


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple
    root: Path  # clip paths resolve relative to the manifest's directory

    def __len__(self):
        return len(self.entries)


def load_manifest(path) -> DatasetManifest:
    """Parse a tab-separated `relative/path<TAB>scene_label` file.

    Labels outside the fixed 15-class vocabulary and duplicated paths are
    rejected with the offending row number.
    """
    path = Path(path)
    entries = []
    seen = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected `path<TAB>label`, got {line!r}")
            clip, label = parts[0].strip(), parts[1].strip()
            if label not in CLASS_INDEX:
                raise ValueError(f"{path}:{lineno}: unknown scene label {label!r}")
            if clip in seen:
                raise ValueError(f"{path}:{lineno}: duplicate clip path {clip!r}")
            seen.add(clip)
            entries.append(ManifestEntry(clip, label))
    if not entries:
        log.warning("manifest %s is empty", path)
    return DatasetManifest(tuple(entries), path.parent)


@dataclass
class TrainConfig:
    model: str
    train_manifest: str = ""
    val_manifest: str = ""
    cache_dir: str = ""
    checkpoint_dir: str = "."
    batch_size: int = 256
    epochs: int = 200
    seed: int = 0
    lr: float = 1.0
    rho: float = 0.95
    eps: float = 1e-6
    dropout: float = 0.5

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.model not in models.MODEL_NAMES:
            raise ValueError(
                f"unknown model {self.model!r}; valid: {', '.join(models.MODEL_NAMES)}"
            )

    @property
    def variant(self) -> features.FeatureVariant:
        return _model_variant(self.model)


def _model_variant(model_name: str) -> features.FeatureVariant:
    return features.V2 if model_name == "cnn-v1" else features.V1


_INT_KEYS = {"batch_size", "epochs", "seed"}
_FLOAT_KEYS = {"lr", "rho", "eps", "dropout"}


def parse_config(path) -> TrainConfig:
    """Read a key=value config file; # starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = (t.strip() for t in line.split("=", 1))
            if key in _INT_KEYS:
                values[key] = int(value)
            elif key in _FLOAT_KEYS:
                values[key] = float(value)
            elif key == "variant":
                values[key] = value  # validated against the model below
            else:
                values[key] = value
    variant = values.pop("variant", None)
    try:
        cfg = TrainConfig(**values)
    except TypeError as exc:
        raise ValueError(f"{path}: {exc}") from exc
    if variant is not None and variant != _model_variant(cfg.model).id:
        raise ValueError(
            f"{path}: model {cfg.model} uses variant {_model_variant(cfg.model).id}, "
            f"config says {variant}"
        )
    return cfg


@dataclass
class SegmentDataset:
    """Per-clip segment stacks ready for a model: (clips, segments, frames, mels)."""

    segments: np.ndarray
    labels: np.ndarray  # (clips,) int64 class indices
    clip_ids: list

    def __post_init__(self):
        if self.segments.shape[0] != len(self.labels) or len(self.labels) != len(self.clip_ids):
            raise ValueError("clip count mismatch between segments, labels and ids")

    @property
    def n_clips(self):
        return self.segments.shape[0]

    def flat_segments(self):
        """All segments and their inherited clip labels, in clip order."""
        n_clips, n_seg = self.segments.shape[:2]
        flat = self.segments.reshape(n_clips * n_seg, *self.segments.shape[2:])
        return flat, np.repeat(self.labels, n_seg)


def cache_path(cache_dir, clip_path: str, variant: features.FeatureVariant) -> Path:
    """Cache file keyed by the clip's manifest path and the feature variant."""
    digest = hashlib.sha1(clip_path.encode("utf-8")).hexdigest()[:16]
    stem = Path(clip_path).stem
    return Path(cache_dir) / f"{stem}.{digest}.{variant.id}.lmsf"


def extract_clip(wav_path, variant: features.FeatureVariant) -> features.LogMelSpectrogram:
    """WAV file to log-mel: decode, downmix, peak-normalize, resample."""
    clip = normalize_amplitude(downmix_mono(load_wav(wav_path)))
    return features.log_mel(resample(clip, variant.sample_rate), variant)


def clip_features(entry: ManifestEntry, manifest: DatasetManifest,
                  variant: features.FeatureVariant, cache_dir=None) -> features.LogMelSpectrogram:
    """Fetch one clip's spectrogram, via the cache when possible."""
    wav = manifest.root / entry.path
    if cache_dir is None:
        return extract_clip(wav, variant)
    cpath = cache_path(cache_dir, entry.path, variant)
    if cpath.exists() and (not wav.exists() or os.path.getmtime(cpath) >= os.path.getmtime(wav)):
        spec = features.load_features(cpath)
        if spec.variant.id != variant.id:
            raise ValueError(f"{cpath}: cached variant {spec.variant.id}, expected {variant.id}")
        return spec
    spec = extract_clip(wav, variant)
    cpath.parent.mkdir(parents=True, exist_ok=True)
    tmp = cpath.with_name(cpath.name + f".tmp{os.getpid()}")  # unique per worker
    features.save_features(tmp, spec)
    os.replace(tmp, cpath)
    return spec


def build_dataset(manifest: DatasetManifest, variant: features.FeatureVariant,
                  cache_dir=None) -> SegmentDataset:
    segs, labels, ids = [], [], []
    for entry in manifest.entries:
        spec = clip_features(entry, manifest, variant, cache_dir)
        segs.append(features.segment(spec, entry.path).segments)
        labels.append(entry.label_index)
        ids.append(entry.path)
    if not segs:
        raise ValueError("manifest contains no clips")
    return SegmentDataset(np.stack(segs), np.array(labels, dtype=np.int64), ids)


def make_batches(n_segments: int, batch_size: int, seed: int):
    """Infinite per-epoch generator of shuffled index batches.

    Every segment appears exactly once per epoch; the final short batch is
    kept. The generator's RNG is seeded once, so batch order is a pure
    function of (seed, epoch).
    """
    if n_segments == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(n_segments)
        yield [perm[i : i + batch_size] for i in range(0, n_segments, batch_size)]


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)  # (epoch, loss, seg_acc, val_macro)
    best_epoch: int = -1

    def record(self, loss: float, seg_acc: float, val_macro: float) -> bool:
        """Append one epoch; returns True when it is the new best (strict)."""
        epoch = len(self.epochs)
        self.epochs.append((epoch, loss, seg_acc, val_macro))
        is_best = self.best_epoch < 0 or val_macro > self.epochs[self.best_epoch][3]
        if is_best:
            self.best_epoch = epoch
        return is_best

    def write_csv(self, path) -> None:
        lines = ["epoch,train_loss,train_seg_acc,val_macro_acc"]
        lines += [
            f"{epoch},{loss:.8f},{seg_acc:.6f},{val_macro:.6f}"
            for epoch, loss, seg_acc, val_macro in self.epochs
        ]
        evaluation.write_text_atomic(path, "\n".join(lines) + "\n")


def _model_input(x: np.ndarray, graph: nn.ModelGraph) -> np.ndarray:
    return x[..., None] if len(graph.input_shape) == 3 else x


def validate(graph: nn.ModelGraph, dataset: SegmentDataset) -> float:
    """Clip-level fused macro accuracy; never touches parameters or stats."""
    pairs = [
        (dataset.labels[i], evaluation.predict_clip(graph, dataset.segments[i]))
        for i in range(dataset.n_clips)
    ]
    return evaluation.macro_accuracy(evaluation.confusion(pairs))


def train(graph: nn.ModelGraph, train_set: SegmentDataset, val_set: SegmentDataset,
          config: TrainConfig) -> TrainHistory:
    """Fit the graph, leaving it loaded with the best-validation snapshot.

    The snapshot is atomic: parameters, batch-norm running statistics and
    Adadelta accumulators all come from the same epoch.
    """
    overlap = set(train_set.clip_ids) & set(val_set.clip_ids)
    if overlap:
        raise ValueError(f"clips present in both train and validation: {sorted(overlap)[:3]}")

    seeds = np.random.SeedSequence(config.seed).spawn(2)
    graph.seed_dropout(config.seed)
    xs, ys = train_set.flat_segments()
    xs = _model_input(xs, graph)
    batches = make_batches(len(ys), config.batch_size, int(seeds[1].generate_state(1)[0]))
    opt = nn.Adadelta(graph.parameters(), lr=config.lr, rho=config.rho, eps=config.eps)

    history = TrainHistory()
    best_state = None
    for epoch in range(config.epochs):
        loss_sum = 0.0
        correct = 0
        for b, idx in enumerate(next(batches)):
            loss, probs = nn.loss_and_gradients(graph, xs[idx], ys[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            opt.step()
            loss_sum += loss * len(idx)
            correct += int((np.argmax(probs, axis=1) == ys[idx]).sum())
        val_macro = validate(graph, val_set)
        if history.record(loss_sum / len(ys), correct / len(ys), val_macro):
            best_state = graph.snapshot()
        log.info(
            "%s epoch %d: loss %.4f seg_acc %.3f val_macro %.3f",
            graph.name, epoch, *history.epochs[-1][1:],
        )
    graph.load_state(best_state)
    return history


def run_training(config: TrainConfig):
    """Config-driven entry: build model and datasets, fit, save artifacts.

    Returns (graph, history, checkpoint path, history path).
    """
    graph = models.build_model(config.model, seed=config.seed)
    cache = config.cache_dir or None
    train_set = build_dataset(load_manifest(config.train_manifest), graph.variant, cache)
    val_set = build_dataset(load_manifest(config.val_manifest), graph.variant, cache)
    history = train(graph, train_set, val_set, config)

    ckpt_dir = Path(config.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    ckpt = ckpt_dir / f"{config.model}.spck"
    hist = ckpt_dir / f"{config.model}.history.csv"
    models.save_model(graph, ckpt)
    history.write_csv(hist)
    return graph, history, ckpt, hist
