"""Model assembly and training: VQ-CPC, the spectrogram VQ-VAE, and the
CPC-without-VQ ablation.

Both encoders halve the frame rate, so every utterance of T frames encodes
to ceil(T/2) codes.  The VQ-VAE decoder reconstructs log-mel frames
autoregressively (teacher-forced during training) from the upsampled code
sequence concatenated with a speaker embedding; swapping that embedding at
inference time is the voice-conversion path.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autograd as ag
from .io import (CodeSequence, FeatureSequence, FormatError, atomic_write_bytes,
                 pack_tensor_records, unpack_tensor_records)
from .objectives import CpcConfig, commitment_value, infonce_loss, vqvae_loss
from .quantize import (Codebook, codebook_perplexity, init_codebook, ema_update,
                       jitter_source_indices, quantize)

DOWNSAMPLE = 2


# ---------------------------------------------------------------------------
# Configurations
# ---------------------------------------------------------------------------

@dataclass
class VqCpcConfig:
    n_mels: int = 40
    conv_channels: int = 64
    conv_kernel: int = 4
    n_linear: int = 4
    code_dim: int = 32
    context_dim: int = 64
    codebook_size: int = 512
    ema_decay: float = 0.99
    quantize_enabled: bool = True    # off = plain CPC ablation
    horizon: int = 6
    n_negatives: int = 17
    sampling_mode: str = "within_speaker"
    group_size: int = 8
    init_seed: int = 0


@dataclass
class VqVaeConfig:
    n_mels: int = 40
    conv_channels: int = 64
    conv_kernel: int = 4
    n_conv: int = 5
    code_dim: int = 32
    codebook_size: int = 512
    ema_decay: float = 0.99
    jitter_p: float = 0.5
    speaker_dim: int = 16
    decoder_hidden: int = 128
    speakers: list = field(default_factory=list)   # training speaker ids
    init_seed: int = 0


@dataclass
class TrainConfig:
    """Shared training knobs; defaults mirror the reference setup scaled down.

    lr 4e-4 with linear warm-up from 1e-5 for the contrastive model, and
    milestone halving for the autoencoder.
    """

    steps: int = 2000
    batch_size: int = 16
    segment_frames: int = 128
    lr: float = 4e-4
    beta: float = 0.25
    schedule: str = "warmup"              # constant | warmup | halving
    warmup_start_lr: float = 1e-5
    warmup_steps: int = 200
    milestones: tuple = ()
    seed: int = 0
    log_every: int = 25
    codebook_delay: int = 0   # contrastive-only steps before the VQ kicks in
    metrics_path: str | None = None
    checkpoint_path: str | None = None
    checkpoint_every: int | None = None

    def make_schedule(self) -> ag.Schedule:
        if self.schedule == "warmup":
            return ag.Schedule("warmup", base_lr=self.lr,
                               warmup_start=self.warmup_start_lr,
                               warmup_steps=self.warmup_steps)
        if self.schedule == "halving":
            milestones = self.milestones or (int(self.steps * 0.6),
                                             int(self.steps * 0.8))
            return ag.Schedule("halving", base_lr=self.lr, milestones=milestones)
        return ag.Schedule("constant", base_lr=self.lr)


# ---------------------------------------------------------------------------
# VQ-CPC
# ---------------------------------------------------------------------------

class VqCpcModel:
    """Strided-conv + linear-stack encoder, VQ bottleneck, GRU context net."""

    kind = "vq_cpc"

    def __init__(self, cfg: VqCpcConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.init_seed, 0x5EED])
        c, f, k = cfg.conv_channels, cfg.n_mels, cfg.conv_kernel
        self.conv_w = ag.param(rng.normal(scale=1.0 / np.sqrt(f * k), size=(c, f, k)))
        self.conv_b = ag.param(np.zeros(c))
        self.ln_scales = [ag.param(np.ones(c)) for _ in range(cfg.n_linear + 1)]
        self.ln_biases = [ag.param(np.zeros(c)) for _ in range(cfg.n_linear + 1)]
        self.lin_ws = [ag.param(rng.normal(scale=1.0 / np.sqrt(c), size=(c, c)))
                       for _ in range(cfg.n_linear)]
        self.lin_bs = [ag.param(np.zeros(c)) for _ in range(cfg.n_linear)]
        self.proj_w = ag.param(rng.normal(scale=1.0 / np.sqrt(c), size=(c, cfg.code_dim)))
        self.proj_b = ag.param(np.zeros(cfg.code_dim))
        self.gru = ag.GruParams(cfg.code_dim, cfg.context_dim, rng)
        self.predictors = [
            ag.param(rng.normal(scale=1.0 / np.sqrt(cfg.context_dim),
                                size=(cfg.context_dim, cfg.code_dim)))
            for _ in range(cfg.horizon)]
        self.codebook: Codebook | None = None
        self.cpc = CpcConfig(horizon=cfg.horizon, n_negatives=cfg.n_negatives,
                             sampling_mode=cfg.sampling_mode,
                             group_size=cfg.group_size, predictors=self.predictors)

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self):
        out = [("enc.conv.w", self.conv_w), ("enc.conv.b", self.conv_b)]
        for i, (g, b) in enumerate(zip(self.ln_scales, self.ln_biases)):
            out += [(f"enc.ln{i}.g", g), (f"enc.ln{i}.b", b)]
        for i, (w, b) in enumerate(zip(self.lin_ws, self.lin_bs)):
            out += [(f"enc.lin{i}.w", w), (f"enc.lin{i}.b", b)]
        out += [("enc.proj.w", self.proj_w), ("enc.proj.b", self.proj_b),
                ("ctx.gru.wx", self.gru.wx), ("ctx.gru.wh", self.gru.wh),
                ("ctx.gru.b", self.gru.b)]
        out += [(f"cpc.w{m}", w) for m, w in enumerate(self.predictors, start=1)]
        return out

    def encoder(self, x) -> ag.Value:
        """x: (B, T, n_mels) -> continuous features (B, ceil(T/2), code_dim)."""
        h = ag.conv1d(x, self.conv_w, self.conv_b, stride=DOWNSAMPLE)
        h = ag.layer_norm(h, self.ln_scales[0], self.ln_biases[0])
        for i in range(self.cfg.n_linear):
            h = ag.relu(ag.linear(h, self.lin_ws[i], self.lin_bs[i]))
            h = ag.layer_norm(h, self.ln_scales[i + 1], self.ln_biases[i + 1])
        return ag.linear(h, self.proj_w, self.proj_b)

    def bottleneck(self, z: ag.Value, update_rng: np.random.Generator | None = None):
        """Quantize (B, T2, D); returns (zq Value, indices or None, commitment).

        With quantization disabled the bottleneck is the identity and the
        commitment term is zero.
        """
        if not self.cfg.quantize_enabled:
            return z, None, ag.constant(np.asarray(0.0))
        flat = z.data.reshape(-1, self.cfg.code_dim)
        if self.codebook is None:
            if update_rng is None:
                raise ValueError("codebook is uninitialized; encode after training "
                                 "or pass an rng to seed it")
            self.codebook = init_codebook(flat, self.cfg.codebook_size,
                                          decay=self.cfg.ema_decay, rng=update_rng)
        result = quantize(flat, self.codebook)
        zq = ag.straight_through(z, result.quantized.reshape(z.data.shape))
        commit = commitment_value(z, result.quantized)
        return zq, result.indices, commit

    def contexts(self, zq) -> ag.Value:
        return ag.gru(zq, self.gru)


# ---------------------------------------------------------------------------
# VQ-VAE
# ---------------------------------------------------------------------------

class VqVaeModel:
    """Five-conv encoder with batch norm, VQ bottleneck + jitter, GRU decoder."""

    kind = "vq_vae"

    def __init__(self, cfg: VqVaeConfig):
        if not cfg.speakers:
            raise ValueError("VqVaeConfig.speakers must list the training speakers")
        self.cfg = cfg
        rng = np.random.default_rng([cfg.init_seed, 0xAE])
        c, f, k = cfg.conv_channels, cfg.n_mels, cfg.conv_kernel
        self.conv_ws, self.conv_bs, self.bn_scales, self.bn_biases = [], [], [], []
        self.bn_states = []
        in_ch = f
        for i in range(cfg.n_conv):
            self.conv_ws.append(ag.param(
                rng.normal(scale=1.0 / np.sqrt(in_ch * k), size=(c, in_ch, k))))
            self.conv_bs.append(ag.param(np.zeros(c)))
            self.bn_scales.append(ag.param(np.ones(c)))
            self.bn_biases.append(ag.param(np.zeros(c)))
            self.bn_states.append(ag.BatchNormState(c))
            in_ch = c
        self.proj_w = ag.param(rng.normal(scale=1.0 / np.sqrt(c), size=(c, cfg.code_dim)))
        self.proj_b = ag.param(np.zeros(cfg.code_dim))
        self.speaker_table = ag.param(
            rng.normal(scale=0.1, size=(len(cfg.speakers), cfg.speaker_dim)))
        dec_in = cfg.code_dim + cfg.speaker_dim + cfg.n_mels
        self.dec_gru = ag.GruParams(dec_in, cfg.decoder_hidden, rng)
        self.out_w = ag.param(rng.normal(scale=1.0 / np.sqrt(cfg.decoder_hidden),
                                         size=(cfg.decoder_hidden, cfg.n_mels)))
        self.out_b = ag.param(np.zeros(cfg.n_mels))
        self.codebook: Codebook | None = None
        self._speaker_row = {int(s): i for i, s in enumerate(cfg.speakers)}

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self):
        out = []
        for i in range(self.cfg.n_conv):
            out += [(f"enc.conv{i}.w", self.conv_ws[i]),
                    (f"enc.conv{i}.b", self.conv_bs[i]),
                    (f"enc.bn{i}.g", self.bn_scales[i]),
                    (f"enc.bn{i}.b", self.bn_biases[i])]
        out += [("enc.proj.w", self.proj_w), ("enc.proj.b", self.proj_b),
                ("spk.table", self.speaker_table),
                ("dec.gru.wx", self.dec_gru.wx), ("dec.gru.wh", self.dec_gru.wh),
                ("dec.gru.b", self.dec_gru.b),
                ("dec.out.w", self.out_w), ("dec.out.b", self.out_b)]
        return out

    def buffers(self):
        out = []
        for i, st in enumerate(self.bn_states):
            out += [(f"enc.bn{i}.running_mean", st.running_mean),
                    (f"enc.bn{i}.running_var", st.running_var)]
        return out

    def speaker_row(self, speaker: int) -> int:
        try:
            return self._speaker_row[int(speaker)]
        except KeyError:
            raise ValueError(f"unknown speaker id {speaker}; model was trained on "
                             f"{sorted(self._speaker_row)}") from None

    def encoder(self, x, training: bool) -> ag.Value:
        h = ag.as_value(x)
        for i in range(self.cfg.n_conv):
            stride = DOWNSAMPLE if i == 0 else 1
            h = ag.conv1d(h, self.conv_ws[i], self.conv_bs[i], stride=stride)
            h = ag.batch_norm(h, self.bn_scales[i], self.bn_biases[i],
                              self.bn_states[i], training=training)
            h = ag.relu(h)
        return ag.linear(h, self.proj_w, self.proj_b)

    def bottleneck(self, z: ag.Value, update_rng: np.random.Generator | None = None):
        flat = z.data.reshape(-1, self.cfg.code_dim)
        if self.codebook is None:
            if update_rng is None:
                raise ValueError("codebook is uninitialized")
            self.codebook = init_codebook(flat, self.cfg.codebook_size,
                                          decay=self.cfg.ema_decay, rng=update_rng)
        result = quantize(flat, self.codebook)
        zq = ag.straight_through(z, result.quantized.reshape(z.data.shape))
        commit = commitment_value(z, result.quantized)
        return zq, result.indices, commit

    def decode(self, zq: ag.Value, speaker_rows: np.ndarray, targets: np.ndarray,
               jitter_rng: np.random.Generator | None = None) -> ag.Value:
        """Teacher-forced reconstruction of (B, T, n_mels) targets.

        zq: bottleneck output (B, T2, code_dim).  Jitter (when an rng is
        given) is applied directly after the bottleneck, on code vectors.
        """
        n_batch, t2, d = zq.data.shape
        t_out = targets.shape[1]
        flat = ag.reshape(zq, (n_batch * t2, d))
        if jitter_rng is not None and self.cfg.jitter_p > 0:
            src = np.stack([b * t2 + jitter_source_indices(t2, self.cfg.jitter_p,
                                                           jitter_rng)
                            for b in range(n_batch)])
            flat = ag.reshape(ag.embedding(flat, src), (n_batch * t2, d))
        up = np.minimum(np.arange(t_out) // DOWNSAMPLE, t2 - 1)
        up_idx = (np.arange(n_batch)[:, None] * t2) + up[None, :]
        cond = ag.embedding(flat, up_idx)                       # (B, T, D)
        spk = ag.embedding(self.speaker_table, speaker_rows)    # (B, E)
        spk_rep = ag.repeat_axis(spk, 1, t_out)                 # (B, T, E)
        prev = np.concatenate([np.zeros((n_batch, 1, self.cfg.n_mels)),
                               targets[:, :-1, :]], axis=1)
        dec_in = ag.concat([cond, spk_rep, ag.constant(prev)], axis=-1)
        h = ag.gru(dec_in, self.dec_gru)
        return ag.linear(h, self.out_w, self.out_b)

    def generate(self, code_vectors: np.ndarray, speaker_row: int,
                 n_frames: int) -> np.ndarray:
        """Free-running decoder: feed back its own previous output frame."""
        t2, d = code_vectors.shape
        up = np.minimum(np.arange(n_frames) // DOWNSAMPLE, t2 - 1)
        cond = code_vectors[up]
        spk = self.speaker_table.data[speaker_row]
        wx, wh, b = self.dec_gru.wx.data, self.dec_gru.wh.data, self.dec_gru.b.data
        h = np.zeros((1, self.cfg.decoder_hidden))
        x_prev = np.zeros(self.cfg.n_mels)
        out = np.empty((n_frames, self.cfg.n_mels))
        for t in range(n_frames):
            inp = np.concatenate([cond[t], spk, x_prev])[None, :]
            h, _ = ag.gru_cell_arrays(inp @ wx + b, h, wh)
            x_prev = h[0] @ self.out_w.data + self.out_b.data
            out[t] = x_prev
        return out


# ---------------------------------------------------------------------------
# Encoding and conversion
# ---------------------------------------------------------------------------

@dataclass
class EncodeResult:
    """Discrete codes plus the continuous probe-point representations."""

    codes: CodeSequence | None        # None for the no-VQ ablation
    code_vectors: FeatureSequence     # quantized vectors (or z when no VQ)
    pre_quant: FeatureSequence        # encoder output before quantization
    aux: FeatureSequence              # context vectors (CPC) / pre-quant (VAE)


def encode(model, features: FeatureSequence) -> EncodeResult:
    """Encode one utterance into codes at half the feature frame rate."""
    if features.dim != model.cfg.n_mels:
        raise ValueError(f"feature dim {features.dim} does not match the "
                         f"checkpoint ({model.cfg.n_mels} mel bands)")
    x = features.frames.astype(np.float64)[None, :, :]
    rate = features.frame_rate_hz / DOWNSAMPLE
    if isinstance(model, VqVaeModel):
        z = model.encoder(x, training=False)
    else:
        z = model.encoder(x)
    z2 = z.data[0]
    pre = FeatureSequence(z2.astype(np.float32), rate)
    if getattr(model.cfg, "quantize_enabled", True):
        if model.codebook is None:
            raise ValueError("model has no codebook; train before encoding")
        result = quantize(z2, model.codebook)
        codes = CodeSequence(result.indices.astype(np.uint32), rate)
        vectors = result.quantized
    else:
        codes = None
        vectors = z2
    code_vectors = FeatureSequence(vectors.astype(np.float32), rate)
    if isinstance(model, VqCpcModel):
        ctx = ag.gru(vectors[None, :, :], model.gru).data[0]
        aux = FeatureSequence(ctx.astype(np.float32), rate)
    else:
        aux = pre
    return EncodeResult(codes=codes, code_vectors=code_vectors,
                        pre_quant=pre, aux=aux)


def convert_speaker(model: VqVaeModel, features: FeatureSequence,
                    target_speaker: int) -> FeatureSequence:
    """Re-render an utterance's code sequence in a target training voice."""
    row = model.speaker_row(target_speaker)
    enc = encode(model, features)
    out = model.generate(enc.code_vectors.frames.astype(np.float64), row,
                         features.n_frames)
    return FeatureSequence(out.astype(np.float32), features.frame_rate_hz)


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

class SegmentSampler:
    """Samples fixed-length segments, optionally grouped by speaker."""

    def __init__(self, utterances, segment_frames: int, rng: np.random.Generator):
        self.segment_frames = segment_frames
        self.rng = rng
        self.utterances = [u for u in utterances
                           if u.features.n_frames >= segment_frames]
        if not self.utterances:
            raise ValueError(f"no utterance reaches {segment_frames} frames")
        self.by_speaker = {}
        for i, u in enumerate(self.utterances):
            self.by_speaker.setdefault(u.speaker, []).append(i)

    def _cut(self, utt_index: int) -> np.ndarray:
        u = self.utterances[utt_index]
        start = int(self.rng.integers(0, u.features.n_frames - self.segment_frames + 1))
        return u.features.frames[start:start + self.segment_frames].astype(np.float64)

    def sample(self, n_segments: int, group_size: int, per_speaker_groups: bool):
        """Returns (batch (n, L, F), speakers (n,), groups (n,))."""
        if n_segments % group_size:
            raise ValueError("batch size must be a multiple of the group size")
        segs, speakers, groups = [], [], []
        speaker_ids = sorted(self.by_speaker)
        for g in range(n_segments // group_size):
            if per_speaker_groups:
                spk = speaker_ids[int(self.rng.integers(len(speaker_ids)))]
                pool = self.by_speaker[spk]
                idx = self.rng.integers(0, len(pool), size=group_size)
                chosen = [pool[j] for j in idx]
            else:
                chosen = self.rng.integers(0, len(self.utterances), size=group_size)
            for j in chosen:
                segs.append(self._cut(int(j)))
                speakers.append(self.utterances[int(j)].speaker)
                groups.append(g)
        return (np.stack(segs), np.asarray(speakers, dtype=np.int64),
                np.asarray(groups, dtype=np.int64))


class MetricsLog:
    """Accumulates per-step metric dicts; written as JSON lines at the end."""

    def __init__(self, path=None):
        self.path = path
        self.entries = []

    def append(self, **entry):
        self.entries.append(entry)

    def dump(self, suffix: str = "") -> None:
        if self.path is None:
            return
        text = "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.entries)
        atomic_write_bytes(os.fspath(self.path) + suffix, text.encode())


def _abort_if_nonfinite(loss_value: float, step: int, log: MetricsLog):
    if np.isfinite(loss_value):
        return
    log.dump(suffix=".abort")
    raise ag.NumericError(
        f"non-finite loss at step {step}; metrics dumped for diagnosis")


def train_vq_cpc(utterances, model: VqCpcModel, tcfg: TrainConfig):
    """Train with the contrastive objective; returns (model, metrics list)."""
    code_frames = -(-tcfg.segment_frames // DOWNSAMPLE)
    if code_frames <= 2 * model.cfg.horizon:
        raise ValueError("segment too short: need more than 2*horizon code frames")
    rng = np.random.default_rng([tcfg.seed, 0xC9C])
    sampler = SegmentSampler(utterances, tcfg.segment_frames, rng)
    within = model.cfg.sampling_mode == "within_speaker"
    opt = ag.Adam(model.parameters(), schedule=tcfg.make_schedule())
    log = MetricsLog(tcfg.metrics_path)

    for step in range(1, tcfg.steps + 1):
        batch, speakers, groups = sampler.sample(
            tcfg.batch_size, model.cfg.group_size, per_speaker_groups=within)
        z = model.encoder(batch)
        if model.cfg.quantize_enabled and step <= tcfg.codebook_delay:
            # collapse mitigation: let the encoder settle before the codebook
            # is seeded from (now meaningful) activations
            zq, indices, commit = z, None, ag.constant(np.asarray(0.0))
        else:
            zq, indices, commit = model.bottleneck(z, update_rng=rng)
        contexts = model.contexts(zq)
        nce, diag = infonce_loss(zq, contexts, model.cpc, rng=rng,
                                 speakers=speakers, groups=groups)
        loss = ag.add(nce, ag.scale(commit, tcfg.beta))
        _abort_if_nonfinite(float(loss.data), step, log)
        opt.zero_grad()
        loss.backward()
        lr = opt.step()
        perplexity = None
        if indices is not None:
            ema_update(model.codebook, z.data.reshape(-1, model.cfg.code_dim),
                       indices)
            hist = np.bincount(indices, minlength=model.cfg.codebook_size)
            perplexity = codebook_perplexity(hist)
        if step % tcfg.log_every == 0 or step == tcfg.steps:
            log.append(step=step, loss=float(loss.data),
                       commitment=float(commit.data), perplexity=perplexity,
                       accuracy=diag.per_m_accuracy, lr=lr)
        if (tcfg.checkpoint_path and tcfg.checkpoint_every
                and step % tcfg.checkpoint_every == 0):
            save_checkpoint(tcfg.checkpoint_path, model, step)
    if tcfg.checkpoint_path:
        save_checkpoint(tcfg.checkpoint_path, model, tcfg.steps)
    log.dump()
    return model, log.entries


def train_vq_vae(utterances, model: VqVaeModel, tcfg: TrainConfig):
    """Train the autoencoder with reconstruction + commitment; jitter on."""
    rng = np.random.default_rng([tcfg.seed, 0xAE7])
    sampler = SegmentSampler(utterances, tcfg.segment_frames, rng)
    opt = ag.Adam(model.parameters(), schedule=tcfg.make_schedule())
    log = MetricsLog(tcfg.metrics_path)

    for step in range(1, tcfg.steps + 1):
        batch, speakers, _ = sampler.sample(tcfg.batch_size, 1,
                                            per_speaker_groups=False)
        speaker_rows = np.array([model.speaker_row(s) for s in speakers])
        z = model.encoder(batch, training=True)
        zq, indices, commit = model.bottleneck(z, update_rng=rng)
        recon = model.decode(zq, speaker_rows, batch, jitter_rng=rng)
        loss = vqvae_loss(recon, batch, commit, tcfg.beta)
        _abort_if_nonfinite(float(loss.data), step, log)
        opt.zero_grad()
        loss.backward()
        lr = opt.step()
        ema_update(model.codebook, z.data.reshape(-1, model.cfg.code_dim), indices)
        hist = np.bincount(indices, minlength=model.cfg.codebook_size)
        if step % tcfg.log_every == 0 or step == tcfg.steps:
            log.append(step=step, loss=float(loss.data),
                       commitment=float(commit.data),
                       perplexity=codebook_perplexity(hist),
                       mse=float(ag.mse(recon, ag.constant(batch)).data), lr=lr)
        if (tcfg.checkpoint_path and tcfg.checkpoint_every
                and step % tcfg.checkpoint_every == 0):
            save_checkpoint(tcfg.checkpoint_path, model, step)
    if tcfg.checkpoint_path:
        save_checkpoint(tcfg.checkpoint_path, model, tcfg.steps)
    log.dump()
    return model, log.entries


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CONFIG_TYPES = {"vq_cpc": (VqCpcConfig,), "vq_vae": (VqVaeConfig,)}


def _codebook_arrays(book: Codebook):
    return [("book.codes", book.codes), ("book.ema_counts", book.ema_counts),
            ("book.ema_sums", book.ema_sums),
            ("book.ever_assigned", book.ever_assigned.astype(np.float64))]


def save_checkpoint(path, model, step: int) -> None:
    """Persist a model: JSON header line + one VQAU record per tensor.

    Weights are canonicalized to float32 (the storage precision) in memory
    as well, so the live model and the reloaded model encode identically.
    """
    named = list(model.named_parameters())
    for _, p in named:
        p.data = p.data.astype(np.float32).astype(np.float64)
    arrays = [(name, p.data) for name, p in named]
    if isinstance(model, VqVaeModel):
        for name, buf in model.buffers():
            arrays.append((name, buf))
    if model.codebook is not None:
        book = model.codebook
        book.codes = book.codes.astype(np.float32).astype(np.float64)
        arrays.extend(_codebook_arrays(book))
    index, blob = pack_tensor_records(arrays)
    header = {"format": "vqunits-checkpoint", "version": 1, "model": model.kind,
              "config": asdict(model.cfg), "step": int(step),
              "has_codebook": model.codebook is not None, "params": index}
    atomic_write_bytes(path, json.dumps(header, sort_keys=True).encode() + b"\n" + blob)


def load_checkpoint(path):
    """Rebuild a model from a checkpoint file; returns (model, step)."""
    with open(path, "rb") as fh:
        head_line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(head_line)
    except json.JSONDecodeError as e:
        raise FormatError(f"bad checkpoint header: {e}") from None
    if header.get("format") != "vqunits-checkpoint" or header.get("version") != 1:
        raise FormatError("not a vqunits checkpoint")
    kind = header["model"]
    if kind == "vq_cpc":
        model = VqCpcModel(VqCpcConfig(**header["config"]))
    elif kind == "vq_vae":
        model = VqVaeModel(VqVaeConfig(**header["config"]))
    else:
        raise FormatError(f"unknown model kind {kind!r}")
    tensors = unpack_tensor_records(header["params"], blob)
    for name, p in model.named_parameters():
        arr = tensors[name]
        if arr.shape != p.data.shape:
            raise FormatError(f"checkpoint tensor {name} has shape {arr.shape}, "
                              f"model expects {p.data.shape}")
        p.data = arr
    if isinstance(model, VqVaeModel):
        for i, st in enumerate(model.bn_states):
            st.running_mean = tensors[f"enc.bn{i}.running_mean"]
            st.running_var = tensors[f"enc.bn{i}.running_var"]
    if header["has_codebook"]:
        model.codebook = Codebook(
            codes=tensors["book.codes"],
            decay=model.cfg.ema_decay,
            ema_counts=tensors["book.ema_counts"],
            ema_sums=tensors["book.ema_sums"],
            ever_assigned=tensors["book.ever_assigned"] > 0.5)
    return model, int(header["step"])
