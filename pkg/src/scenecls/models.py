"""Model zoo: three small CNN families over log-mel segments, 15 scene classes.

Registry names bind each architecture to the feature variant it consumes:

    cnn-v1     LeNet-style, 3x3 kernels, 44.1 kHz features (V2, 43x64)
    cnn-v2-1   LeNet-style, 3x3 kernels, 16 kHz features (V1, 111x64)
    cnn-v2-2   LeNet-style, 5x5 kernels, V1
    cnn-v2-3   LeNet-style, 7x7 kernels, V1
    squeezenet mini SqueezeNet with 6 fire modules, V1
    cnn-1d     time-only convolutions, mel bins as channels, V1

Builders accept width/unit overrides so tests can exercise the same
topologies at reduced size; defaults are the full configurations.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .features import V1, V2, VARIANTS, FeatureVariant

N_CLASSES = 15


def _graph_2d(name, variant, layers):
    return nn.ModelGraph(name, layers, (variant.segment_frames, variant.n_mels, 1), variant)


def build_lenet(kernel_size: int, variant: FeatureVariant, *, seed: int = 0,
                base_filters: int = 8, dense_units: int = 512,
                dropout_rate: float = 0.5, name: str | None = None) -> nn.ModelGraph:
    """Three Conv-BN-ReLU blocks with doubling filters, two 3x2 max pools,
    then Dropout, Dense(dense_units)+ReLU, Dense(15), Softmax."""
    if kernel_size % 2 == 0:
        raise ValueError("kernel size must be odd")
    rng = np.random.default_rng(seed)
    k = kernel_size
    f = base_filters
    h, w = variant.segment_frames, variant.n_mels
    h1, w1 = h // 3, w // 2
    h2, w2 = h1 // 3, w1 // 2
    layers = [
        nn.Conv2D(1, f, k, k, rng), nn.BatchNorm(f), nn.ReLU(),
        nn.MaxPool2D(3, 2),
        nn.Conv2D(f, 2 * f, k, k, rng), nn.BatchNorm(2 * f), nn.ReLU(),
        nn.MaxPool2D(3, 2),
        nn.Conv2D(2 * f, 4 * f, k, k, rng), nn.BatchNorm(4 * f), nn.ReLU(),
        nn.Dropout(dropout_rate),
        nn.Flatten(),
        nn.Dense(h2 * w2 * 4 * f, dense_units, rng), nn.ReLU(),
        nn.Dense(dense_units, N_CLASSES, rng),
        nn.Softmax(),
    ]
    return _graph_2d(name or f"lenet-{k}x{k}-{variant.id}", variant, layers)


def build_squeezenet_mini(variant: FeatureVariant = V1, *, seed: int = 0,
                          width: float = 1.0, dropout_rate: float = 0.5,
                          name: str | None = None) -> nn.ModelGraph:
    """Entry conv plus six fire modules separated by 2x2 pools, closed by a
    1x1 conv to 15 channels, global average pooling and softmax."""
    rng = np.random.default_rng(seed)

    def ch(n):
        return max(1, round(n * width))

    fires = [(16, 64), (16, 64), (32, 128), (32, 128), (48, 192), (64, 256)]
    fires = [(ch(s), ch(e)) for s, e in fires]
    f0 = ch(64)
    layers = [
        nn.Conv2D(1, f0, 3, 3, rng), nn.BatchNorm(f0), nn.ReLU(),
        nn.MaxPool2D(2, 2),
        nn.Fire(f0, *fires[0], rng),
        nn.Fire(2 * fires[0][1], *fires[1], rng),
        nn.MaxPool2D(2, 2),
        nn.Fire(2 * fires[1][1], *fires[2], rng),
        nn.Fire(2 * fires[2][1], *fires[3], rng),
        nn.MaxPool2D(2, 2),
        nn.Fire(2 * fires[3][1], *fires[4], rng),
        nn.Fire(2 * fires[4][1], *fires[5], rng),
        nn.Dropout(dropout_rate),
        nn.Conv2D(2 * fires[5][1], N_CLASSES, 1, 1, rng), nn.BatchNorm(N_CLASSES), nn.ReLU(),
        nn.GlobalAvgPool(),
        nn.Softmax(),
    ]
    return _graph_2d(name or f"squeezenet-{variant.id}", variant, layers)


def build_cnn1d(variant: FeatureVariant = V1, *, seed: int = 0, width: float = 1.0,
                dense_units: int = 512, dropout_rate: float = 0.5,
                name: str | None = None) -> nn.ModelGraph:
    """Width-5 convolutions over time only; the 64 mel bins enter as channels."""
    rng = np.random.default_rng(seed)

    def ch(n):
        return max(1, round(n * width))

    t2 = variant.segment_frames // 3 // 3
    layers = [
        nn.Conv1D(variant.n_mels, ch(64), 5, rng), nn.BatchNorm(ch(64)), nn.ReLU(),
        nn.MaxPool1D(3),
        nn.Conv1D(ch(64), ch(128), 5, rng), nn.BatchNorm(ch(128)), nn.ReLU(),
        nn.MaxPool1D(3),
        nn.Conv1D(ch(128), ch(256), 5, rng), nn.BatchNorm(ch(256)), nn.ReLU(),
        nn.Dropout(dropout_rate),
        nn.Flatten(),
        nn.Dense(t2 * ch(256), dense_units, rng), nn.ReLU(),
        nn.Dense(dense_units, N_CLASSES, rng),
        nn.Softmax(),
    ]
    return nn.ModelGraph(
        name or f"cnn1d-{variant.id}", layers, (variant.segment_frames, variant.n_mels), variant
    )


MODEL_NAMES = ("cnn-v1", "cnn-v2-1", "cnn-v2-2", "cnn-v2-3", "squeezenet", "cnn-1d")


def build_model(model_name: str, seed: int = 0) -> nn.ModelGraph:
    """Build a registry model with its bound feature variant."""
    builders = {
        "cnn-v1": lambda: build_lenet(3, V2, seed=seed, name="cnn-v1"),
        "cnn-v2-1": lambda: build_lenet(3, V1, seed=seed, name="cnn-v2-1"),
        "cnn-v2-2": lambda: build_lenet(5, V1, seed=seed, name="cnn-v2-2"),
        "cnn-v2-3": lambda: build_lenet(7, V1, seed=seed, name="cnn-v2-3"),
        "squeezenet": lambda: build_squeezenet_mini(V1, seed=seed, name="squeezenet"),
        "cnn-1d": lambda: build_cnn1d(V1, seed=seed, name="cnn-1d"),
    }
    if model_name not in builders:
        raise ValueError(f"unknown model {model_name!r}; valid: {', '.join(MODEL_NAMES)}")
    return builders[model_name]()


def param_count(graph: nn.ModelGraph) -> int:
    """Trainable parameters: conv kernels/biases, BN gains/shifts, dense weights/biases."""
    return sum(p.value.size for p in graph.parameters())


# ---------------------------------------------------------------------------
# Canonical textual model spec: one line per layer plus a small header. The
# string round-trips through parse_model_spec and is embedded in checkpoints
# so a saved model carries its exact architecture and variant.
# ---------------------------------------------------------------------------


def format_model_spec(graph: nn.ModelGraph) -> str:
    lines = [
        f"name {graph.name}",
        f"variant {graph.variant.id}",
        "input " + " ".join(str(d) for d in graph.input_shape),
    ]
    lines += [layer.spec_line() for layer in graph.layers]
    return "\n".join(lines) + "\n"


def parse_model_spec(text: str, seed: int = 0) -> nn.ModelGraph:
    """Rebuild a graph (fresh parameters) from its canonical spec string."""
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if len(lines) < 4 or not lines[0].startswith("name ") \
            or not lines[1].startswith("variant ") or not lines[2].startswith("input "):
        raise nn.CheckpointError("model spec must start with name/variant/input lines")
    name = lines[0].split(None, 1)[1]
    variant_id = lines[1].split()[1]
    if variant_id not in VARIANTS:
        raise nn.CheckpointError(f"unknown variant {variant_id!r}")
    variant = VARIANTS[variant_id]
    input_shape = tuple(int(t) for t in lines[2].split()[1:])

    rng = np.random.default_rng(seed)
    shape = input_shape
    layers = []
    for ln in lines[3:]:
        parts = ln.split()
        kind, args = parts[0], [p for p in parts[1:]]
        if kind == "conv2d":
            cout, kh, kw = map(int, args)
            layers.append(nn.Conv2D(shape[2], cout, kh, kw, rng))
            shape = (shape[0], shape[1], cout)
        elif kind == "conv1d":
            cout, k = map(int, args)
            layers.append(nn.Conv1D(shape[1], cout, k, rng))
            shape = (shape[0], cout)
        elif kind == "batchnorm":
            layers.append(nn.BatchNorm(shape[-1]))
        elif kind == "relu":
            layers.append(nn.ReLU())
        elif kind == "maxpool2d":
            ph, pw = map(int, args)
            layers.append(nn.MaxPool2D(ph, pw))
            shape = (shape[0] // ph, shape[1] // pw, shape[2])
        elif kind == "maxpool1d":
            (p,) = map(int, args)
            layers.append(nn.MaxPool1D(p))
            shape = (shape[0] // p, shape[1])
        elif kind == "globalavgpool":
            layers.append(nn.GlobalAvgPool())
            shape = (shape[-1],)
        elif kind == "dropout":
            layers.append(nn.Dropout(float(args[0])))
        elif kind == "flatten":
            layers.append(nn.Flatten())
            shape = (int(np.prod(shape)),)
        elif kind == "dense":
            units = int(args[0])
            layers.append(nn.Dense(shape[0], units, rng))
            shape = (units,)
        elif kind == "softmax":
            layers.append(nn.Softmax())
        elif kind == "fire":
            sq, ex = map(int, args)
            layers.append(nn.Fire(shape[2], sq, ex, rng))
            shape = (shape[0], shape[1], 2 * ex)
        else:
            raise nn.CheckpointError(f"unknown layer kind {kind!r} in model spec")
    return nn.ModelGraph(name, layers, input_shape, variant)


def save_model(graph: nn.ModelGraph, path) -> None:
    nn.write_checkpoint(path, format_model_spec(graph), graph.state_tensors())


def load_model(path) -> nn.ModelGraph:
    """Rebuild a graph from a checkpoint, restoring parameters, running
    statistics and optimizer accumulators."""
    spec_text, tensors = nn.read_checkpoint(path)
    graph = parse_model_spec(spec_text)
    graph.load_state(tensors)
    return graph
