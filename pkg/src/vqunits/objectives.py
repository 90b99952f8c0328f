"""Training losses: contrastive prediction (InfoNCE) and reconstruction.

The InfoNCE loss scores each future code against a sampled candidate set
(one positive plus negatives) using per-horizon predictor matrices.
Negatives come from groups of segments; within-speaker mode restricts the
pool to the anchor segment's speaker, across-speaker mode uses the whole
group, which is what makes the two sampling regimes comparable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag


@dataclass
class CpcConfig:
    """Contrastive-prediction hyperparameters.

    horizon: how many future steps are predicted (M).
    n_negatives: negatives per prediction; the candidate set also holds the
        positive, so softmax normalization runs over n_negatives + 1 codes.
    predictors: the M trainable (d_context, d_code) matrices; models fill
        this in at build time.
    """

    horizon: int = 6
    n_negatives: int = 17
    sampling_mode: str = "within_speaker"
    group_size: int = 8
    predictors: list | None = None

    def validate(self) -> None:
        if self.horizon < 1:
            raise ValueError("prediction horizon must be >= 1")
        if self.n_negatives < 1:
            raise ValueError("need at least one negative example")
        if self.sampling_mode not in ("within_speaker", "across_speaker"):
            raise ValueError(f"unknown sampling mode {self.sampling_mode!r}")
        if self.sampling_mode == "across_speaker" and self.group_size < 2:
            raise ValueError("across-speaker sampling needs groups of >= 2 segments")


@dataclass
class NegativeSet:
    """Sampled candidate sets for every (segment, anchor t, horizon m).

    candidates[s, t, m-1] holds 1 + n_negatives indices into the flattened
    group frame pool (segment-major), with the positive always in slot 0.
    Pool provenance arrays allow auditing where each candidate came from.
    """

    candidates: np.ndarray        # (S, T_pred, M, 1 + n_negatives) int64
    pool_speakers: np.ndarray     # (S * T,) speaker id per pooled frame
    pool_utterances: np.ndarray   # (S * T,) utterance tag per pooled frame
    n_negatives: int

    def negative_speakers(self) -> np.ndarray:
        """Speaker id of every sampled negative (audit view)."""
        return self.pool_speakers[self.candidates[..., 1:]]

    def positive_speakers(self) -> np.ndarray:
        return self.pool_speakers[self.candidates[..., 0]]


def sample_negatives(speakers, n_frames: int, cfg: CpcConfig,
                     rng: np.random.Generator, utterance_ids=None,
                     groups=None) -> NegativeSet:
    """Draw candidate sets for a group (or batch of groups) of segments.

    speakers: (S,) speaker id per segment; all segments have n_frames frames.
    groups: optional (S,) group assignment; negatives never cross groups.
    Negatives are sampled uniformly without replacement from the eligible
    pool, which excludes the positive frame itself.  Raises if the eligible
    pool is smaller than n_negatives.
    """
    cfg.validate()
    speakers = np.asarray(speakers)
    n_segments = speakers.shape[0]
    m_max = cfg.horizon
    if n_frames <= m_max:
        raise ValueError(f"segments of {n_frames} frames leave no prediction "
                         f"targets for horizon {m_max}")
    t_pred = n_frames - m_max
    groups = np.zeros(n_segments, dtype=np.int64) if groups is None \
        else np.asarray(groups)
    if utterance_ids is None:
        utterance_ids = np.arange(n_segments)
    utterance_ids = np.asarray(utterance_ids)

    pool_speakers = np.repeat(speakers, n_frames)
    pool_utterances = np.repeat(utterance_ids, n_frames)
    pool_groups = np.repeat(groups, n_frames)

    n_cand = 1 + cfg.n_negatives
    candidates = np.empty((n_segments, t_pred, m_max, n_cand), dtype=np.int64)
    cells = t_pred * m_max
    # positives for segment s: pool index s*T + (t + m)
    offsets = (np.arange(t_pred)[:, None] + np.arange(1, m_max + 1)[None, :]).reshape(-1)

    for s in range(n_segments):
        eligible = pool_groups == groups[s]
        if cfg.sampling_mode == "within_speaker":
            eligible &= pool_speakers == speakers[s]
        pool_idx = np.flatnonzero(eligible)
        if pool_idx.size - 1 < cfg.n_negatives:
            raise ValueError(
                f"negative sampling pool exhausted: {pool_idx.size - 1} eligible "
                f"frames < {cfg.n_negatives} negatives (enlarge the group or "
                f"reduce n_negatives)")
        pos_in_pool = np.full(n_segments * n_frames, -1, dtype=np.int64)
        pos_in_pool[pool_idx] = np.arange(pool_idx.size)
        positives = s * n_frames + offsets          # (cells,)
        keys = rng.random((cells, pool_idx.size))
        keys[np.arange(cells), pos_in_pool[positives]] = np.inf
        picks = np.argpartition(keys, cfg.n_negatives - 1, axis=1)[:, :cfg.n_negatives]
        cand = np.concatenate([positives[:, None], pool_idx[picks]], axis=1)
        candidates[s] = cand.reshape(t_pred, m_max, n_cand)

    return NegativeSet(candidates=candidates, pool_speakers=pool_speakers,
                       pool_utterances=pool_utterances,
                       n_negatives=cfg.n_negatives)


@dataclass
class InfoNceDiagnostics:
    per_m_accuracy: list[float]
    n_anchors: int

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.per_m_accuracy))


def infonce_loss(codes, contexts, cfg: CpcConfig,
                 rng: np.random.Generator | None = None,
                 predictors: list | None = None, speakers=None, groups=None,
                 negatives: NegativeSet | None = None):
    """Contrastive future-code classification loss.

    codes: (T, d_code) or (S, T, d_code), Value or array.
    contexts: matching (.., T, d_context).
    Averages over all anchors t <= T - horizon - 1 and over the horizon.
    Returns (loss Value, InfoNceDiagnostics).  The diagnostic accuracy is
    the fraction of anchors where the positive strictly outscores every
    negative.
    """
    cfg.validate()
    codes = ag.as_value(codes)
    contexts = ag.as_value(contexts)
    if codes.data.ndim == 2:
        codes = ag.reshape(codes, (1,) + codes.data.shape)
        contexts = ag.reshape(contexts, (1,) + contexts.data.shape)
    n_segments, t_len, d_code = codes.data.shape
    if contexts.data.shape[:2] != (n_segments, t_len):
        raise ValueError("contexts must align with codes frame-for-frame")
    m_max = cfg.horizon
    if t_len <= m_max:
        raise ValueError(f"sequence length {t_len} leaves no prediction targets "
                         f"for horizon {m_max}")
    predictors = predictors if predictors is not None else cfg.predictors
    if predictors is None or len(predictors) != m_max:
        raise ValueError("need one predictor matrix per horizon step")

    if negatives is None:
        if rng is None:
            raise ValueError("an rng is required when negatives are sampled here")
        if speakers is None:
            speakers = np.zeros(n_segments, dtype=np.int64)
        negatives = sample_negatives(speakers, t_len, cfg, rng, groups=groups)

    t_pred = t_len - m_max
    pool = ag.reshape(codes, (n_segments * t_len, d_code))
    anchors = ag.slice_time(contexts, 0, t_pred)   # (S, T_pred, d_context)
    n_cand = 1 + cfg.n_negatives
    targets = np.zeros(n_segments * t_pred, dtype=np.int64)  # positive in slot 0

    losses = []
    per_m_acc = []
    for m in range(1, m_max + 1):
        pred = ag.linear(anchors, predictors[m - 1])            # (S, Tp, d_code)
        idx = negatives.candidates[:, :, m - 1, :]              # (S, Tp, n_cand)
        cand = ag.embedding(pool, idx)                          # (S, Tp, n_cand, D)
        pred_rep = ag.repeat_axis(pred, 2, n_cand)
        scores = ag.sum_axis(ag.mul(pred_rep, cand), -1)        # (S, Tp, n_cand)
        logits = ag.reshape(scores, (n_segments * t_pred, n_cand))
        losses.append(ag.softmax_cross_entropy(logits, targets))
        sc = logits.data
        per_m_acc.append(float(np.mean(sc[:, 0] > sc[:, 1:].max(axis=1))))

    total = losses[0]
    for piece in losses[1:]:
        total = ag.add(total, piece)
    loss = ag.scale(total, 1.0 / m_max)
    return loss, InfoNceDiagnostics(per_m_accuracy=per_m_acc,
                                    n_anchors=n_segments * t_pred)


def commitment_value(z, quantized: np.ndarray):
    """(1/T) sum_t ||z_t - quantized_t||^2 as a graph node (sg on quantized)."""
    z = ag.as_value(z)
    n_frames = int(np.prod(z.data.shape[:-1]))
    diff = ag.sub(z, ag.constant(quantized.reshape(z.data.shape)))
    return ag.scale(ag.sum_all(ag.square(diff)), 1.0 / n_frames)


def vqvae_loss(reconstruction, target, commitment_loss, beta: float):
    """Reconstruction MSE plus beta-weighted commitment cost.

    The reconstruction term is mean squared error over spectrogram frames,
    the Gaussian surrogate for a sample-level log-likelihood.
    """
    recon = ag.as_value(reconstruction)
    target = ag.as_value(target)
    if recon.data.shape != target.data.shape:
        raise ValueError(f"shape mismatch {recon.data.shape} vs {target.data.shape}")
    commit = commitment_loss if isinstance(commitment_loss, ag.Value) \
        else ag.constant(np.asarray(float(commitment_loss)))
    return ag.add(ag.mse(recon, target), ag.scale(commit, beta))
