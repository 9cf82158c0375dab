"""Shared test utilities: WAV writing, synthetic clips, reference
convolutions and a finite-difference gradient harness."""

import struct

import numpy as np

from scenecls import nn
from scenecls.audio import AudioClip


def write_wav(path, samples, rate, bits=16, audio_format=1):
    """Write integer PCM WAV. ``samples`` is (channels, n) float in [-1, 1)."""
    samples = np.asarray(samples, dtype=np.float64)
    channels, n = samples.shape
    full = 1 << (bits - 1)
    ints = np.clip(np.round(samples * full), -full, full - 1).astype(np.int64)
    interleaved = ints.T.reshape(-1)
    if bits == 16:
        payload = interleaved.astype("<i2").tobytes()
    elif bits == 24:
        as32 = interleaved.astype("<i4").tobytes()
        payload = b"".join(as32[i : i + 3] for i in range(0, len(as32), 4))
    else:
        raise ValueError(bits)
    block = channels * bits // 8
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack(
        "<IHHIIHH", 16, audio_format, channels, rate, rate * block, block, bits
    )
    header += b"data" + struct.pack("<I", len(payload))
    with open(path, "wb") as fh:
        fh.write(header + payload)


def sine_clip(freq, rate=16000, duration=10.0, amp=0.8, rng=None):
    t = np.arange(int(rate * duration)) / rate
    x = amp * np.sin(2 * np.pi * freq * t)
    if rng is not None:
        x = x + 0.01 * rng.standard_normal(len(t))
        x = x / np.max(np.abs(x))
    return AudioClip(x[None, :], rate)


def band_noise_clip(rng, low=500.0, high=6000.0, rate=16000, duration=10.0):
    n = int(rate * duration)
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1 / rate)
    spec[(freqs < low) | (freqs > high)] = 0.0
    x = np.fft.irfft(spec, n=n)
    return AudioClip((x / np.max(np.abs(x)))[None, :], rate)


def conv2d_reference(x, kernels, bias):
    """Same-padded stride-1 convolution by explicit loops. x is (H, W, Cin)."""
    h, w, cin = x.shape
    cout, kh, kw, _ = kernels.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    out = np.zeros((h, w, cout))
    for c in range(cout):
        for i in range(h):
            for j in range(w):
                acc = bias[c]
                for a in range(kh):
                    for b in range(kw):
                        ii, jj = i + a - ph, j + b - pw
                        if 0 <= ii < h and 0 <= jj < w:
                            for d in range(cin):
                                acc += x[ii, jj, d] * kernels[c, a, b, d]
                out[i, j, c] = acc
    return out


def conv1d_reference(x, kernels, bias):
    """Same-padded stride-1 1-D convolution by explicit loops. x is (T, Cin)."""
    t, cin = x.shape
    cout, k, _ = kernels.shape
    p = (k - 1) // 2
    out = np.zeros((t, cout))
    for c in range(cout):
        for i in range(t):
            acc = bias[c]
            for a in range(k):
                ii = i + a - p
                if 0 <= ii < t:
                    for d in range(cin):
                        acc += x[ii, d] * kernels[c, a, d]
            out[i, c] = acc
    return out


def _walk_layers(layers):
    for layer in layers:
        if isinstance(layer, nn.Fire):
            yield layer._relu_sq
            yield layer._relu_e1
            yield layer._relu_e3
        else:
            yield layer


def _kink_signature(graph):
    """ReLU masks and pool routing of the most recent forward pass."""
    sigs = []
    for layer in _walk_layers(graph.layers):
        if isinstance(layer, nn.ReLU):
            sigs.append(layer._mask.copy())
        elif isinstance(layer, (nn.MaxPool2D, nn.MaxPool1D)):
            sigs.append(layer._cache[0].copy())
    return sigs


def _loss_of(graph, x, y, dropout_seed):
    graph.seed_dropout(dropout_seed)
    probs = graph.forward(x, train=True)
    loss, _ = nn.cross_entropy(probs, y)
    return loss


def jitter_params(graph, seed, lo=0.02, hi=0.1):
    """Move parameters off their symmetric init so no activation sits exactly
    on a ReLU kink (zero biases otherwise leave dead positions at 0.0)."""
    rng = np.random.default_rng(seed)
    for p in graph.parameters():
        p.value += rng.uniform(lo, hi, p.value.shape) * rng.choice([-1.0, 1.0], p.value.shape)


def gradcheck_model(graph, x, y, n_coords=6, h=1e-5, seed=3, dropout_seed=7):
    """Central-difference check of every parameter tensor's gradient.

    Returns (worst relative error, coords checked, coords skipped). A probed
    coordinate is skipped only when the ReLU/pool routing differs between the
    two perturbed forward passes, i.e. the finite-difference interval crosses
    a kink where the loss is not differentiable. The skip decision never
    looks at the analytic gradient, so it cannot hide a backward bug.
    """
    rng = np.random.default_rng(seed)
    graph.seed_dropout(dropout_seed)
    nn.loss_and_gradients(graph, x, y)
    worst, checked, skipped = 0.0, 0, 0
    for p in graph.parameters():
        flat = p.value.reshape(-1)
        gflat = p.grad.reshape(-1)
        for i in rng.choice(flat.size, size=min(n_coords, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + h
            lp = _loss_of(graph, x, y, dropout_seed)
            sig_p = _kink_signature(graph)
            flat[i] = orig - h
            lm = _loss_of(graph, x, y, dropout_seed)
            sig_m = _kink_signature(graph)
            flat[i] = orig
            if any(not np.array_equal(a, b) for a, b in zip(sig_p, sig_m)):
                skipped += 1
                continue
            checked += 1
            num = (lp - lm) / (2 * h)
            ana = gflat[i]
            if abs(num) < 1e-8 and abs(ana) < 1e-8:
                continue
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana)))
    return worst, checked, skipped


def gradcheck_layer(layer, x, n_coords=10, h=1e-6, seed=0, train=True):
    """Projection-loss FD check of one layer's input and parameter gradients."""
    rng = np.random.default_rng(seed)
    out = layer.forward(x, train)
    weights = rng.standard_normal(out.shape)

    def loss():
        return float((layer.forward(x, train) * weights).sum())

    gin = layer.backward(weights)
    worst = 0.0
    targets = [(x.reshape(-1), gin.reshape(-1))]
    targets += [(p.value.reshape(-1), None) for _, p in layer.named_params()]
    for t_i, (flat, gflat) in enumerate(targets):
        if gflat is None:
            layer.forward(x, train)
            layer.backward(weights)
            gflat = layer.named_params()[t_i - 1][1].grad.reshape(-1)
        for i in rng.choice(flat.size, size=min(n_coords, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss()
            flat[i] = orig - h
            lm = loss()
            flat[i] = orig
            num = (lp - lm) / (2 * h)
            ana = gflat[i]
            if abs(num) < 1e-9 and abs(ana) < 1e-9:
                continue
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana)))
    return worst
