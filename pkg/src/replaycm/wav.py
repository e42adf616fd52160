"""Mono 16-bit PCM WAV I/O on top of the stdlib ``wave`` module."""
import wave
from pathlib import Path

import numpy as np

from .dsp import Waveform


class WavFormatError(ValueError):
    pass


def read_wav(path) -> Waveform:
    path = Path(path)
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise WavFormatError(f"{path}: expected mono audio, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise WavFormatError(f"{path}: expected 16-bit PCM, got {8 * fh.getsampwidth()}-bit")
        if fh.getcomptype() != "NONE":
            raise WavFormatError(f"{path}: compressed WAV not supported")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def quantize(samples) -> np.ndarray:
    """Float samples in [-1, 1] to int16, rounding to nearest and clipping."""
    s = np.asarray(samples, dtype=np.float64)
    return np.clip(np.round(s * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path, w: Waveform) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(quantize(w.samples).tobytes())
