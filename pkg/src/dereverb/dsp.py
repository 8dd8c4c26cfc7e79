"""Time-domain signal plumbing.

Framing with 50% overlap, rectangular overlap-add, statistical room
impulse responses with exact T60 control, synthetic speech-like source
material, corpus generation, and 16-bit PCM WAV I/O.  All functions are
pure: identical arguments (including seeds) give bit-identical results.
"""

from __future__ import annotations

import json
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ConfigError

__all__ = [
    "AudioClip",
    "Rir",
    "ReverbSample",
    "AudioFormatError",
    "frame_signal",
    "overlap_add",
    "decay_envelope",
    "synth_rir",
    "apply_rir",
    "speech_like_signal",
    "generate_corpus",
    "read_wav",
    "write_wav",
    "write_corpus",
    "load_manifest",
    "load_manifest_samples",
]


class AudioFormatError(IOError):
    """Malformed or unsupported WAV content; the message names the field."""


@dataclass
class AudioClip:
    samples: np.ndarray  # float64, 1-D
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.size < 1:
            raise ValueError("AudioClip requires at least one sample")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class Rir:
    """Room impulse response: direct tap at ``direct_delay`` plus a decaying tail."""

    taps: np.ndarray
    direct_delay: int  # samples
    direct_gain: float
    t60: float  # seconds

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.float64).reshape(-1)


@dataclass
class ReverbSample:
    """Paired reverberant input and direct-path target with its T60 label."""

    input: AudioClip
    target: AudioClip
    t60: float
    seed: int
    direct_delay: int = 0
    direct_gain: float = 1.0

    def __post_init__(self):
        if len(self.input) != len(self.target):
            raise ValueError(
                f"input/target length mismatch: {len(self.input)} vs {len(self.target)}"
            )
        if self.input.sample_rate != self.target.sample_rate:
            raise ValueError("input/target sample rate mismatch")


# -- framing -----------------------------------------------------------------


def frame_signal(x, block_len: int) -> np.ndarray:
    """Slice a signal into 50%-overlapping blocks of ``block_len`` samples.

    Block l (1-based) spans samples [(l-1)*block_len/2, (l+1)*block_len/2).
    The tail is zero-padded so the final block is full; a signal of exactly
    ``block_len`` samples yields exactly one block.
    """
    if block_len % 2 != 0:
        raise ConfigError(f"block length must be even for 50% overlap, got {block_len}")
    samples = x.samples if isinstance(x, AudioClip) else np.asarray(x, dtype=np.float64).reshape(-1)
    hop = block_len // 2
    length = samples.size
    if length <= block_len:
        n_blocks = 1
    else:
        n_blocks = -(-(length - block_len) // hop) + 1  # ceil division
    padded_len = (n_blocks - 1) * hop + block_len
    padded = np.zeros(padded_len)
    padded[:length] = samples
    frames = np.empty((n_blocks, block_len))
    for i in range(n_blocks):
        frames[i] = padded[i * hop : i * hop + block_len]
    return frames


def overlap_add(frames: np.ndarray, hop: int | None = None) -> np.ndarray:
    """Sum shifted frames back into a signal (rectangular synthesis).

    Composing frame_signal then overlap_add multiplies interior samples
    (beyond the first and last half block) by exactly 2.
    """
    frames = np.asarray(frames, dtype=np.float64)
    n_blocks, block_len = frames.shape
    if hop is None:
        hop = block_len // 2
    out = np.zeros((n_blocks - 1) * hop + block_len)
    for j in range(block_len):
        out[j : j + hop * n_blocks : hop] += frames[:, j]
    return out


# -- room impulse responses ----------------------------------------------------


def decay_envelope(t60: float, tau: int, fs: int, length: int, tail_gain: float) -> np.ndarray:
    """Amplitude envelope of the statistical RIR tail.

    Zero up to and including the direct tap; for i > tau it decays as
    tail_gain * 10^(-3 (i - tau) / (fs * t60)), i.e. 60 dB down after
    exactly t60 seconds.
    """
    env = np.zeros(length)
    idx = np.arange(tau + 1, length)
    env[idx] = tail_gain * 10.0 ** (-3.0 * (idx - tau) / (fs * t60))
    return env


def synth_rir(
    t60: float,
    tau: int,
    alpha: float,
    fs: int,
    length: int,
    seed: int,
    tail_gain: float | None = None,
) -> Rir:
    """Statistical RIR: direct tap alpha at delay tau, then an exponentially
    decaying unit-variance white-noise tail with exact T60 control."""
    if t60 <= 0:
        raise ValueError(f"t60 must be positive, got {t60}")
    if tau < 0 or length <= tau:
        raise ValueError(f"need 0 <= tau < length, got tau={tau}, length={length}")
    if alpha <= 0:
        raise ValueError(f"direct gain must be positive, got {alpha}")
    if tail_gain is None:
        tail_gain = 0.5 * alpha
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(length)
    taps = decay_envelope(t60, tau, fs, length, tail_gain) * noise
    taps[tau] = alpha
    return Rir(taps=taps, direct_delay=tau, direct_gain=alpha, t60=t60)


def apply_rir(s: AudioClip, h: Rir) -> tuple[AudioClip, AudioClip]:
    """Convolve a dry clip with an RIR.

    Returns the reverberant signal (full linear convolution truncated to
    the clip length) and the direct-path target alpha * s delayed by tau.
    """
    x = np.convolve(s.samples, h.taps)[: len(s)]
    s_dir = np.zeros(len(s))
    tau = h.direct_delay
    if tau < len(s):
        s_dir[tau:] = h.direct_gain * s.samples[: len(s) - tau]
    return AudioClip(x, s.sample_rate), AudioClip(s_dir, s.sample_rate)


# -- synthetic source material --------------------------------------------------


def speech_like_signal(duration_s: float, fs: int, rng: np.random.Generator) -> np.ndarray:
    """Synthetic speech-like source: 3-5 amplitude-modulated harmonics on a
    random f0 in [80, 300] Hz plus band-limited noise, gated by voiced
    segments with silence gaps.  The first segment is always voiced."""
    n = int(round(duration_s * fs))
    t = np.arange(n) / fs

    f0 = rng.uniform(80.0, 300.0)
    n_harm = int(rng.integers(3, 6))
    harm = np.zeros(n)
    for k in range(1, n_harm + 1):
        phase = rng.uniform(0.0, 2.0 * np.pi)
        harm += (1.0 / k) * np.sin(2.0 * np.pi * k * f0 * t + phase)

    # syllabic-rate amplitude modulation
    am_rate = rng.uniform(2.0, 6.0)
    am = 0.55 + 0.45 * np.sin(2.0 * np.pi * am_rate * t + rng.uniform(0.0, 2.0 * np.pi))

    # band-limited noise: white noise through a short moving average
    noise = rng.standard_normal(n)
    ma = np.ones(5) / 5.0
    noise = np.convolve(noise, ma, mode="same")

    # voiced/silent gating with 5 ms ramps
    gate = np.zeros(n)
    ramp = max(1, int(0.005 * fs))
    pos = 0
    voiced = True
    while pos < n:
        seg_s = rng.uniform(0.2, 0.6) if voiced else rng.uniform(0.05, 0.2)
        seg = min(n - pos, int(seg_s * fs))
        if voiced and seg > 0:
            gate[pos : pos + seg] = 1.0
            r = min(ramp, seg // 2)
            if r > 0:
                gate[pos : pos + r] *= np.linspace(0.0, 1.0, r)
                gate[pos + seg - r : pos + seg] *= np.linspace(1.0, 0.0, r)
        pos += seg
        voiced = not voiced

    sig = (harm * am + 0.08 * noise) * gate
    peak = np.abs(sig).max()
    if peak > 0:
        sig *= 0.5 / peak
    return sig


def generate_corpus(
    count: int,
    duration_s: float,
    fs: int,
    t60_range: tuple[float, float],
    seed: int,
) -> list[ReverbSample]:
    """Deterministically generate paired reverberant/direct-path samples.

    T60 labels are stratified over ``t60_range`` (one jittered draw per
    equal-width stratum, order shuffled) so small corpora still cover the
    whole range.  Direct-path delay is drawn from [8, 40] samples and gain
    from [0.3, 1.0] per sample.
    """
    lo, hi = t60_range
    if not (0.0 < lo < hi <= 1.0):
        raise ValueError(f"t60 range must satisfy 0 < lo < hi <= 1.0, got {t60_range}")
    master = np.random.default_rng(seed)
    strata = master.permutation(count)
    children = np.random.SeedSequence(seed).spawn(count)
    samples = []
    for i in range(count):
        rng = np.random.default_rng(children[i])
        t60 = lo + (strata[i] + rng.uniform(0.0, 1.0)) * (hi - lo) / count
        tau = int(rng.integers(8, 41))
        alpha = rng.uniform(0.3, 1.0)
        dry = AudioClip(speech_like_signal(duration_s, fs, rng), fs)
        rir_len = tau + int(np.ceil(1.25 * t60 * fs))
        rir = synth_rir(t60, tau, alpha, fs, rir_len, seed=int(rng.integers(2**31)))
        x, s_dir = apply_rir(dry, rir)
        samples.append(
            ReverbSample(input=x, target=s_dir, t60=float(t60), seed=seed, direct_delay=tau, direct_gain=float(alpha))
        )
    return samples


# -- WAV I/O ---------------------------------------------------------------------


def write_wav(path, clip: AudioClip) -> None:
    """Write a clip as 16-bit PCM mono little-endian RIFF/WAVE."""
    data = np.clip(clip.samples, -1.0, 1.0)
    pcm = np.round(data * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(pcm.tobytes())


def read_wav(path) -> AudioClip:
    """Read a 16-bit PCM mono WAV file."""
    try:
        with wave.open(str(path), "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            n = w.getnframes()
            raw = w.readframes(n)
    except (wave.Error, EOFError, struct.error) as exc:
        raise AudioFormatError(f"malformed WAV header in {path}: {exc}") from exc
    if channels != 1:
        raise AudioFormatError(f"unsupported channel count {channels} in {path}: expected mono")
    if width != 2:
        raise AudioFormatError(f"unsupported sample width {width * 8} bit in {path}: expected 16-bit PCM")
    if len(raw) < 2 * n:
        raise AudioFormatError(f"truncated data chunk in {path}: expected {2 * n} bytes, got {len(raw)}")
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioClip(pcm.astype(np.float64) / 32767.0, rate)


# -- corpus manifests --------------------------------------------------------------


def write_corpus(samples: list[ReverbSample], out_dir) -> Path:
    """Write WAV pairs plus a JSON-lines manifest; returns the manifest path.

    Each manifest line: {"path_in", "path_target", "t60", "seed"} with paths
    relative to the manifest's directory.  Input and target share a common
    normalisation gain so their SISDR relationship is preserved.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for i, sample in enumerate(samples):
            peak = max(np.abs(sample.input.samples).max(), np.abs(sample.target.samples).max())
            gain = 0.95 / peak if peak > 0.95 else 1.0
            name_in = f"clip_{i:04d}_in.wav"
            name_target = f"clip_{i:04d}_target.wav"
            write_wav(out / name_in, AudioClip(sample.input.samples * gain, sample.input.sample_rate))
            write_wav(out / name_target, AudioClip(sample.target.samples * gain, sample.target.sample_rate))
            fh.write(
                json.dumps(
                    {"path_in": name_in, "path_target": name_target, "t60": sample.t60, "seed": sample.seed}
                )
                + "\n"
            )
    return manifest


def load_manifest(path) -> list[dict]:
    manifest = Path(path)
    records = []
    with open(manifest) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            for key in ("path_in", "path_target", "t60"):
                if key not in rec:
                    raise ValueError(f"manifest line {line_no} missing field '{key}'")
            records.append(rec)
    return records


def load_manifest_samples(path) -> list[ReverbSample]:
    """Load the WAV pairs referenced by a manifest (paths resolved relative
    to the manifest file)."""
    manifest = Path(path)
    base = manifest.parent
    samples = []
    for rec in load_manifest(manifest):
        clip_in = read_wav(base / rec["path_in"])
        clip_target = read_wav(base / rec["path_target"])
        samples.append(
            ReverbSample(
                input=clip_in,
                target=clip_target,
                t60=float(rec["t60"]),
                seed=int(rec.get("seed", 0)),
            )
        )
    return samples
