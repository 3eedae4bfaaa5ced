"""Acoustic front end: log mel filterbanks, a pitch stand-in, and the
windowing/DCT plumbing feeding the stacked bottleneck extractor.

Frame geometry everywhere: 25 ms windows at a 10 ms shift, so a signal
of N samples yields 1 + floor((N - window) / shift) frames.  The
bottleneck input pipeline follows the classic recipe: 11-frame
trajectories per dimension, Hamming-weighted, DCT-II (orthonormal)
truncated to coefficients 0..5, giving 37 x 6 = 222 inputs.
"""

from dataclasses import dataclass, field

import numpy as np

RAW_DIM = 37          # 24 log mel bands + 13 pitch-ish dims
STAGE1_WINDOW = 11
DCT_KEPT = 6
STAGE2_WINDOW = 21
STAGE2_STRIDE = 5


@dataclass
class SbnConfig:
    mel_bands: int = 24
    pitch_dims: int = 13
    stack1: int = STAGE1_WINDOW
    dct_coeffs: int = DCT_KEPT
    bn1_dim: int = 80
    stack2: int = STAGE2_WINDOW
    stride: int = STAGE2_STRIDE
    bn2_dim: int = 30
    hidden_dim: int = 64          # production-scale nets use 1500; desk default
    hidden_layers: int = 3        # sigmoid layers before the linear BN
    learn_rate: float = 0.5
    joint_decay: float = 0.5      # joint-phase lr halves per epoch; full-rate updates tear up stage 1
    clip_norm: float = 5.0
    stage1_epochs: int = 3
    joint_epochs: int = 3

    def __post_init__(self):
        if (self.mel_bands + self.pitch_dims) * self.dct_coeffs != 222:
            raise ValueError("stage-1 input must come out at 222 dims")
        if self.stack1 % 2 != 1 or self.stack2 % 2 != 1:
            raise ValueError("stacking windows must be odd")

    @property
    def raw_dim(self):
        return self.mel_bands + self.pitch_dims

    @property
    def stage1_in(self):
        return self.raw_dim * self.dct_coeffs

    @property
    def stage2_in(self):
        return self.stack2 * self.bn1_dim


def _hz_to_mel(f):
    return 1127.0 * np.log1p(np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (np.expm1(np.asarray(m, dtype=np.float64) / 1127.0))


def mel_filterbank(bands, nfft, rate):
    """Triangular filters evaluated at FFT bin centers, (bands, nfft//2+1)."""
    nyquist = rate / 2.0
    edges = _mel_to_hz(np.linspace(0.0, _hz_to_mel(nyquist), bands + 2))
    bin_hz = np.arange(nfft // 2 + 1) * rate / nfft
    fb = np.zeros((bands, nfft // 2 + 1))
    for m in range(bands):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (bin_hz - lo) / (mid - lo)
        down = (hi - bin_hz) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    if np.any(fb.sum(axis=1) == 0.0):
        raise ValueError(f"empty mel filter with {bands} bands, nfft {nfft}, rate {rate}")
    return fb


def _frame(signal, window, shift):
    n = (len(signal) - window) // shift + 1
    frames = np.lib.stride_tricks.sliding_window_view(signal, window)[::shift]
    return frames[:n]


def compute_fbank(waveform, rate, bands=80, log_floor=1e-30):
    """Log mel filterbank energies, (frames, bands).

    25 ms window, 10 ms shift, Hamming, power spectrum on an FFT of
    2x the next power of two above the window (the oversampling keeps
    all 80 low-frequency filters non-empty at 8 kHz).
    """
    if rate not in (8000, 16000):
        raise ValueError(f"unsupported sample rate {rate}")
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("waveform must be 1-d")
    window = int(round(0.025 * rate))
    shift = int(round(0.010 * rate))
    if len(x) < window:
        raise ValueError(f"waveform of {len(x)} samples shorter than one {window}-sample window")
    nfft = 2 * int(2 ** np.ceil(np.log2(window)))
    frames = _frame(x, window, shift) * np.hamming(window)
    power = np.abs(np.fft.rfft(frames, n=nfft, axis=1)) ** 2
    fb = mel_filterbank(bands, nfft, rate)
    energies = power @ fb.T
    return np.log(np.maximum(energies, log_floor))


def pitch_standin(waveform, rate, dims=13):
    """Normalized frame autocorrelations at lags spanning 50..400 Hz.

    A placeholder for a real fundamental-frequency front end; only its
    shape contract (13 dims, fbank frame geometry) matters downstream.
    """
    if rate not in (8000, 16000):
        raise ValueError(f"unsupported sample rate {rate}")
    x = np.asarray(waveform, dtype=np.float64)
    window = int(round(0.025 * rate))
    shift = int(round(0.010 * rate))
    if len(x) < window:
        raise ValueError("waveform shorter than one window")
    lags = np.unique(np.round(np.linspace(rate / 400.0, rate / 50.0, dims)).astype(int))
    lags = lags[lags < window]
    frames = _frame(x, window, shift)
    out = np.zeros((frames.shape[0], dims))
    r0 = np.einsum("ij,ij->i", frames, frames)
    safe = np.where(r0 > 0.0, r0, 1.0)
    for k, lag in enumerate(lags[:dims]):
        rk = np.einsum("ij,ij->i", frames[:, lag:], frames[:, :-lag])
        out[:, k] = np.where(r0 > 0.0, rk / safe, 0.0)
    return out


def raw_sbn_features(waveform, rate, config=None):
    """24 log mel bands + 13 pitch dims = the 37-d bottleneck input."""
    config = config or SbnConfig()
    mel = compute_fbank(waveform, rate, bands=config.mel_bands)
    pitch = pitch_standin(waveform, rate, dims=config.pitch_dims)
    return np.concatenate([mel, pitch], axis=1)


def dct_basis(n, kept):
    """Orthonormal DCT-II analysis rows, (kept, n)."""
    k = np.arange(kept)[:, None]
    t = np.arange(n)[None, :]
    basis = np.sqrt(2.0 / n) * np.cos(np.pi * (t + 0.5) * k / n)
    basis[0] *= np.sqrt(0.5)
    return basis


def window_indices(T, width, stride=1):
    """Row indices of width-frame windows centered every `stride` frames,
    edges replicated; shape (ceil(T/stride), width)."""
    half = width // 2
    centers = np.arange(0, T, stride)
    return np.clip(centers[:, None] + np.arange(-half, half + 1)[None, :], 0, T - 1)


def stage1_input(raw):
    """(T, 37) -> (T, 222): Hamming-weighted 11-frame trajectory of every
    dimension, DCT-II, coefficients 0..5, flattened dimension-major."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != RAW_DIM:
        raise ValueError(f"stage-1 input wants (T, {RAW_DIM}), got {raw.shape}")
    T = raw.shape[0]
    idx = window_indices(T, STAGE1_WINDOW)
    windows = raw[idx]  # (T, 11, 37)
    weighted_basis = dct_basis(STAGE1_WINDOW, DCT_KEPT) * np.hamming(STAGE1_WINDOW)
    coeffs = np.einsum("kw,twd->tdk", weighted_basis, windows)
    return coeffs.reshape(T, RAW_DIM * DCT_KEPT)


def conversation_mean_subtract(sequences):
    """Remove the per-dimension mean pooled over all of one side's
    utterances.  Returns new arrays in the same order."""
    sequences = [np.asarray(s, dtype=np.float64) for s in sequences]
    if not sequences or sum(s.shape[0] for s in sequences) == 0:
        raise ValueError("mean subtraction needs at least one frame")
    mean = np.concatenate(sequences, axis=0).mean(axis=0)
    return [s - mean for s in sequences]


def stack_downsample(bn1):
    """(T, 80) -> (ceil(T/5), 1680): 21-frame stacks, every 5th center."""
    bn1 = np.asarray(bn1, dtype=np.float64)
    if bn1.ndim != 2 or bn1.shape[1] != 80:
        raise ValueError(f"stage-2 stacking wants (T, 80), got {bn1.shape}")
    T = bn1.shape[0]
    idx = window_indices(T, STAGE2_WINDOW, STAGE2_STRIDE)
    return bn1[idx].reshape(idx.shape[0], STAGE2_WINDOW * 80)
