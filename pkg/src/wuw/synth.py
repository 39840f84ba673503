"""Synthetic keyword-spotting task: chirp keywords against shaped noise.

Generates WAV files plus a JSONL manifest so the full pipeline (training,
evaluation, streaming detection, verification) can run without a speech
corpus. Everything is driven by one seed and fully reproducible.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np
from scipy.signal import chirp as chirp_sweep
from scipy.signal import lfilter

from .audio import CANONICAL_RATE_HZ, AudioClip, write_wav

CHIRP_F0_HZ = 1000.0
CHIRP_F1_HZ = 4000.0


def _shaped_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    """Low-frequency-weighted noise; the negative/background texture."""
    white = rng.standard_normal(n)
    colored = lfilter([1.0], [1.0, -0.9], white)
    return colored / np.max(np.abs(colored))


def chirp_keyword(
    rng: np.random.Generator,
    duration_s: float = 0.6,
    rate: int = CANONICAL_RATE_HZ,
) -> np.ndarray:
    """The synthetic wake word: a rising sweep under a Hann envelope."""
    t = np.arange(int(duration_s * rate)) / rate
    tone = chirp_sweep(t, f0=CHIRP_F0_HZ, f1=CHIRP_F1_HZ, t1=duration_s)
    envelope = np.hanning(t.size)
    return tone * envelope * rng.uniform(0.6, 0.9)


def make_positive_clip(
    rng: np.random.Generator, clip_s: float = 2.0, rate: int = CANONICAL_RATE_HZ
) -> tuple[AudioClip, float, float]:
    """A clip holding one keyword at a random position over a quiet floor.

    Returns (clip, start_s, end_s) of the keyword span.
    """
    n = int(clip_s * rate)
    floor = 0.01 * _shaped_noise(rng, n)
    keyword = chirp_keyword(rng, rate=rate)
    start = int(rng.integers(0, n - keyword.size + 1))
    samples = floor.copy()
    samples[start : start + keyword.size] += keyword
    return (
        AudioClip(samples, rate),
        start / rate,
        (start + keyword.size) / rate,
    )


def make_negative_clip(
    rng: np.random.Generator, clip_s: float = 2.0, rate: int = CANONICAL_RATE_HZ
) -> AudioClip:
    """A keyword-free clip: a shaped-noise burst over the same quiet floor."""
    n = int(clip_s * rate)
    floor = 0.01 * _shaped_noise(rng, n)
    burst = 0.7 * _shaped_noise(rng, int(0.6 * rate))
    start = int(rng.integers(0, n - burst.size + 1))
    samples = floor.copy()
    samples[start : start + burst.size] += burst * np.hanning(burst.size)
    return AudioClip(samples, rate)


def make_noise_clip(
    rng: np.random.Generator, clip_s: float = 3.0, rate: int = CANONICAL_RATE_HZ
) -> AudioClip:
    """A mixing-noise clip."""
    return AudioClip(0.8 * _shaped_noise(rng, int(clip_s * rate)), rate)


def make_chirp_task(
    out_dir,
    n_train: int = 500,
    n_valid: int = 100,
    n_test: int = 100,
    seed: int = 0,
    rate: int = CANONICAL_RATE_HZ,
) -> Path:
    """Write the synthetic corpus and return the manifest path.

    Each split is roughly 40% keyword clips (with spans), 40% negative
    bursts, and 20% mixing-noise clips.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    for split, count in (("train", n_train), ("valid", n_valid), ("test", n_test)):
        for i in range(count):
            kind = i % 5
            name = f"{split}_{i:04d}.wav"
            record: dict = {"path": name, "split": split}
            if kind < 2:
                clip, start_s, end_s = make_positive_clip(rng, rate=rate)
                record.update(label="wuw", start_s=round(start_s, 6),
                              end_s=round(end_s, 6))
            elif kind < 4:
                clip = make_negative_clip(rng, rate=rate)
                record.update(label="other")
            else:
                clip = make_noise_clip(rng, rate=rate)
                record.update(label="noise")
            write_wav(clip, out / name, encoding="float32")
            lines.append(json.dumps(record, sort_keys=True))
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def make_stream(
    rng: np.random.Generator,
    n_keywords: int = 20,
    gap_s: float = 3.0,
    snr_db: float = 20.0,
    rate: int = CANONICAL_RATE_HZ,
) -> tuple[AudioClip, list[int]]:
    """A long background-noise stream with keywords injected ``gap_s`` apart
    at a fixed SNR. Returns the stream and each keyword's start sample.

    The first keyword starts after one full gap, so detectors with a warmup
    window see pure background first.
    """
    gap = int(gap_s * rate)
    total = gap * (n_keywords + 1)
    background = 0.05 * _shaped_noise(rng, total)
    stream = background.copy()
    starts = []
    noise_power = float(np.mean(np.square(background)))
    for k in range(n_keywords):
        keyword = chirp_keyword(rng, rate=rate)
        start = gap * (k + 1)
        kw_power = float(np.mean(np.square(keyword)))
        gain = np.sqrt(noise_power * 10.0 ** (snr_db / 10.0) / kw_power)
        stream[start : start + keyword.size] += gain * keyword
        starts.append(start)
    peak = np.max(np.abs(stream))
    return AudioClip(stream / peak, rate), starts


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        description="Generate the synthetic chirp-keyword corpus."
    )
    parser.add_argument("out_dir")
    parser.add_argument("--train", type=int, default=500)
    parser.add_argument("--valid", type=int, default=100)
    parser.add_argument("--test", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    manifest = make_chirp_task(
        args.out_dir, n_train=args.train, n_valid=args.valid, n_test=args.test,
        seed=args.seed,
    )
    print(manifest)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
