"""Synthetic speech-like corpus with known phone and speaker factors.

Utterances are Markov chains over phone templates, rendered frame-by-frame
through a per-speaker affine transform plus Gaussian noise.  Speaker identity
is therefore a well-defined, removable factor, which is what makes the
probing and conversion experiments downstream meaningful.

Also houses log-Mel extraction (so real audio can enter the same pipeline)
and the on-disk corpus layout: one VQAU feature file per utterance plus a
JSON manifest per split.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .io import (FeatureSequence, read_features, write_features, write_json,
                 read_json)

TRANSITION_ROW_TOL = 1e-9
MAX_TRANSFORM_COND = 1e6
LOG_FLOOR = 1e-10


@dataclass
class FeatureParams:
    """STFT / mel filterbank parameters."""

    sample_rate_hz: int = 16000
    hop_ms: float = 10.0
    win_ms: float = 25.0
    n_fft: int = 512
    n_mels: int = 40

    @property
    def hop(self) -> int:
        return int(round(self.sample_rate_hz * self.hop_ms / 1000.0))

    @property
    def win(self) -> int:
        return int(round(self.sample_rate_hz * self.win_ms / 1000.0))

    @property
    def frame_rate_hz(self) -> float:
        return self.sample_rate_hz / self.hop


@dataclass
class GeneratorSpec:
    """Everything needed to deterministically synthesize a corpus."""

    n_phones: int = 20
    n_speakers: int = 12
    phone_template_dim: int = 40     # mel bands; must equal features.n_mels
    mean_phone_duration: int = 8     # frames
    duration_jitter: int = 3         # +- frames, uniform
    phones_per_utterance: int = 60
    noise_sigma: float = 0.25
    speaker_gain_strength: float = 0.45
    speaker_bias_strength: float = 1.0
    markov_transition: np.ndarray | None = None   # derived from seed when None
    features: FeatureParams = field(default_factory=FeatureParams)
    seed: int = 0

    def validate(self) -> None:
        if self.n_phones < 3:
            raise ValueError("need at least 3 phones so triphones exist")
        if self.n_speakers < 1:
            raise ValueError("need at least one speaker")
        if self.phone_template_dim != self.features.n_mels:
            raise ValueError("phone_template_dim must equal the mel band count")
        if self.mean_phone_duration < 2:
            raise ValueError("mean phone duration must be >= 2 frames")
        if self.duration_jitter >= self.mean_phone_duration:
            raise ValueError("duration jitter must be below the mean duration")
        if self.markov_transition is not None:
            check_transition_matrix(self.markov_transition, self.n_phones)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["markov_transition"] = (None if self.markov_transition is None
                                  else np.asarray(self.markov_transition).tolist())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        d = dict(d)
        feats = FeatureParams(**d.pop("features"))
        trans = d.pop("markov_transition", None)
        spec = cls(features=feats, markov_transition=(
            None if trans is None else np.asarray(trans, dtype=np.float64)), **d)
        return spec


def check_transition_matrix(p: np.ndarray, n_phones: int) -> None:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (n_phones, n_phones):
        raise ValueError(f"transition matrix must be {n_phones}x{n_phones}")
    if np.any(p < 0):
        raise ValueError("transition probabilities must be nonnegative")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > TRANSITION_ROW_TOL):
        raise ValueError("transition matrix rows must sum to 1")


@dataclass
class Utterance:
    features: FeatureSequence
    phone_labels: np.ndarray                 # (n_frames,) int
    phone_segments: list                     # [(phone, start, end), ...]
    speaker: int
    utterance_id: str

    def check_labels(self) -> None:
        """Segments must tile [0, n_frames) and agree with per-frame labels."""
        pos = 0
        for phone, start, end in self.phone_segments:
            if start != pos or end <= start:
                raise ValueError(f"segments do not tile the frame axis at {start}")
            if np.any(self.phone_labels[start:end] != phone):
                raise ValueError("per-frame labels disagree with segments")
            pos = end
        if pos != self.features.n_frames:
            raise ValueError("segments do not cover all frames")


@dataclass
class DerivedGenerator:
    """Seed-derived corpus structure shared by every utterance."""

    templates: np.ndarray     # (n_phones, dim)
    transition: np.ndarray    # (n_phones, n_phones) row-stochastic
    stationary: np.ndarray    # (n_phones,)
    gains: np.ndarray         # (n_speakers, dim, dim)
    biases: np.ndarray        # (n_speakers, dim)


def derive_generator(spec: GeneratorSpec) -> DerivedGenerator:
    """Materialize templates, the phone chain, and speaker transforms."""
    spec.validate()
    dim = spec.phone_template_dim
    rng = np.random.default_rng([spec.seed, 0xC0])

    # smooth random spectra so templates resemble log-mel shapes
    raw = rng.normal(size=(spec.n_phones, dim))
    kernel = np.exp(-0.5 * (np.arange(-4, 5) / 1.5) ** 2)
    kernel /= kernel.sum()
    templates = np.stack([np.convolve(row, kernel, mode="same") for row in raw])
    templates /= templates.std(axis=1, keepdims=True)

    if spec.markov_transition is not None:
        transition = np.asarray(spec.markov_transition, dtype=np.float64).copy()
    else:
        # no self-transitions: segment durations already model phone length
        alpha = rng.gamma(shape=0.8, scale=1.0, size=(spec.n_phones, spec.n_phones))
        np.fill_diagonal(alpha, 0.0)
        transition = alpha / alpha.sum(axis=1, keepdims=True)
    check_transition_matrix(transition, spec.n_phones)

    gains = np.empty((spec.n_speakers, dim, dim))
    biases = np.empty((spec.n_speakers, dim))
    for s in range(spec.n_speakers):
        for _ in range(100):
            g = np.eye(dim) + spec.speaker_gain_strength * \
                rng.normal(size=(dim, dim)) / np.sqrt(dim)
            if np.linalg.cond(g) < MAX_TRANSFORM_COND:
                break
        else:
            raise ValueError("could not draw an invertible speaker transform")
        gains[s] = g
        biases[s] = spec.speaker_bias_strength * rng.normal(size=dim)

    return DerivedGenerator(templates=templates, transition=transition,
                            stationary=stationary_distribution(transition),
                            gains=gains, biases=biases)


def stationary_distribution(transition: np.ndarray, iters: int = 500) -> np.ndarray:
    """Stationary distribution by power iteration from the uniform vector."""
    v = np.full(transition.shape[0], 1.0 / transition.shape[0])
    for _ in range(iters):
        v = v @ transition
        v /= v.sum()
    return v


def split_speaker_pools(spec: GeneratorSpec) -> tuple[list[int], list[int]]:
    """Disjoint train/test speaker ids; test speakers are never trained on."""
    n = spec.n_speakers
    if n == 1:
        return [0], []
    if n == 2:
        return [0], [1]
    n_test = int(min(max(2, round(n / 4)), n - 1))
    return list(range(n - n_test)), list(range(n - n_test, n))


def render_segments(spec: GeneratorSpec, derived: DerivedGenerator,
                    segments: list, speaker: int,
                    noise_rng: np.random.Generator | None = None) -> FeatureSequence:
    """Render a phone segmentation through one speaker's transform.

    With noise_rng=None the rendering is noiseless; this is the reference
    the speaker-conversion evaluation compares against.
    """
    n_frames = segments[-1][2]
    dim = spec.phone_template_dim
    frames = np.empty((n_frames, dim))
    gain = derived.gains[speaker]
    bias = derived.biases[speaker]
    for phone, start, end in segments:
        frames[start:end] = derived.templates[phone] @ gain.T + bias
    if noise_rng is not None and spec.noise_sigma > 0:
        frames += spec.noise_sigma * noise_rng.normal(size=frames.shape)
    return FeatureSequence(frames=frames.astype(np.float32),
                           frame_rate_hz=spec.features.frame_rate_hz)


def _sample_segments(spec: GeneratorSpec, derived: DerivedGenerator,
                     rng: np.random.Generator) -> tuple[list, np.ndarray]:
    phones = np.empty(spec.phones_per_utterance, dtype=np.int64)
    phones[0] = rng.choice(spec.n_phones, p=derived.stationary)
    for i in range(1, spec.phones_per_utterance):
        phones[i] = rng.choice(spec.n_phones, p=derived.transition[phones[i - 1]])
    segments = []
    labels = []
    pos = 0
    for phone in phones:
        dur = spec.mean_phone_duration
        if spec.duration_jitter > 0:
            dur += int(rng.integers(-spec.duration_jitter, spec.duration_jitter + 1))
        dur = max(dur, 2)
        segments.append((int(phone), pos, pos + dur))
        labels.extend([int(phone)] * dur)
        pos += dur
    return segments, np.asarray(labels, dtype=np.int64)


def generate_corpus(spec: GeneratorSpec, n_utterances: int, split: str = "train",
                    derived: DerivedGenerator | None = None
                    ) -> tuple[list[Utterance], list[dict]]:
    """Generate one split of the synthetic corpus.

    Deterministic for a fixed (spec, split): every utterance draws from its
    own seed stream, so generation order (or parallelism) cannot change the
    output.  Returns the utterances and their manifest entries.
    """
    if n_utterances < 1:
        raise ValueError("n_utterances must be >= 1")
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    derived = derived or derive_generator(spec)
    train_pool, test_pool = split_speaker_pools(spec)
    pool = train_pool if split == "train" else test_pool
    if split == "test" and spec.n_speakers < 2:
        raise ValueError("test split needs at least 2 speakers in the spec")

    split_code = 0 if split == "train" else 1
    utterances = []
    manifest = []
    for i in range(n_utterances):
        rng = np.random.default_rng([spec.seed, 0xA1, split_code, i])
        speaker = int(pool[rng.integers(len(pool))])
        segments, labels = _sample_segments(spec, derived, rng)
        feats = render_segments(spec, derived, segments, speaker, noise_rng=rng)
        utt_id = f"{split}-{i:04d}"
        utt = Utterance(features=feats, phone_labels=labels,
                        phone_segments=segments, speaker=speaker,
                        utterance_id=utt_id)
        utt.check_labels()
        utterances.append(utt)
        manifest.append({
            "utterance_id": utt_id,
            "speaker": speaker,
            "path": f"{utt_id}.vqau",
            "n_frames": feats.n_frames,
            "segments": [[p, s, e] for p, s, e in segments],
        })
    return utterances, manifest


def write_corpus(corpus_dir, split: str, utterances: list[Utterance],
                 manifest: list[dict]) -> None:
    """Write one split: VQAU feature files plus manifest.json."""
    split_dir = os.path.join(os.fspath(corpus_dir), split)
    os.makedirs(split_dir, exist_ok=True)
    for utt, entry in zip(utterances, manifest):
        write_features(os.path.join(split_dir, entry["path"]), utt.features)
    write_json(os.path.join(split_dir, "manifest.json"), manifest)


def load_corpus(corpus_dir, split: str) -> list[Utterance]:
    """Load a split written by write_corpus."""
    split_dir = os.path.join(os.fspath(corpus_dir), split)
    manifest = read_json(os.path.join(split_dir, "manifest.json"))
    utterances = []
    for entry in manifest:
        feats = read_features(os.path.join(split_dir, entry["path"]))
        segments = [(int(p), int(s), int(e)) for p, s, e in entry["segments"]]
        labels = np.empty(feats.n_frames, dtype=np.int64)
        for phone, start, end in segments:
            labels[start:end] = phone
        utt = Utterance(features=feats, phone_labels=labels,
                        phone_segments=segments, speaker=int(entry["speaker"]),
                        utterance_id=entry["utterance_id"])
        utt.check_labels()
        utterances.append(utt)
    return utterances


# ---------------------------------------------------------------------------
# log-Mel features for real audio
# ---------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(params: FeatureParams) -> np.ndarray:
    """Triangular mel filters (n_mels, n_fft//2 + 1), peak weight 1."""
    n_bins = params.n_fft // 2 + 1
    fft_freqs = np.linspace(0.0, params.sample_rate_hz / 2.0, n_bins)
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0),
                                  hz_to_mel(params.sample_rate_hz / 2.0),
                                  params.n_mels + 2))
    bank = np.zeros((params.n_mels, n_bins))
    for m in range(params.n_mels):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (fft_freqs - lo) / (center - lo)
        down = (hi - fft_freqs) / (hi - center)
        bank[m] = np.clip(np.minimum(up, down), 0.0, None)
    return bank


def mel_center_frequencies(params: FeatureParams) -> np.ndarray:
    """Peak frequency of each triangular filter, in Hz."""
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0),
                                  hz_to_mel(params.sample_rate_hz / 2.0),
                                  params.n_mels + 2))
    return edges[1:-1]


def log_mel(waveform: np.ndarray, params: FeatureParams) -> FeatureSequence:
    """STFT magnitudes -> triangular mel filterbank -> log(x + 1e-10)."""
    waveform = np.asarray(waveform, dtype=np.float64).reshape(-1)
    if waveform.size == 0:
        raise ValueError("empty waveform")
    win, hop = params.win, params.hop
    if params.n_mels > params.n_fft // 2 + 1:
        raise ValueError("n_mels cannot exceed n_fft/2 + 1")
    if params.n_fft < win:
        raise ValueError("n_fft must be at least the window length")
    if waveform.size < win:
        raise ValueError(f"waveform shorter than one window ({win} samples)")
    n_frames = 1 + (waveform.size - win) // hop
    window = np.hanning(win)
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = waveform[idx] * window
    spectrum = np.abs(np.fft.rfft(frames, n=params.n_fft, axis=1))
    mels = spectrum @ mel_filterbank(params).T
    out = np.log(mels + LOG_FLOOR)
    return FeatureSequence(frames=out.astype(np.float32),
                           frame_rate_hz=params.frame_rate_hz)
