"""Zero-resource measurement stack.

ABX phone discrimination with DTW-aligned cosine distance, bitrate of the
discovered codes, speaker-probing classifiers at the pre-quantization and
code probe points, and alignment export for inspection.

Codes are always evaluated as their codebook vectors rather than raw
indices so the cosine/DTW metric applies to every representation
uniformly.
"""

from __future__ import annotations

import csv
import io as _stdio
import os
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .io import CodeSequence, atomic_write_text
from .models import encode as model_encode


# ---------------------------------------------------------------------------
# DTW with cosine frame cost
# ---------------------------------------------------------------------------

def cosine_cost_matrix(s1: np.ndarray, s2: np.ndarray) -> np.ndarray:
    """Pairwise 1 - cosine similarity.

    Convention for degenerate frames: a zero vector costs 1 against
    anything and 0 against another zero vector.
    """
    n1 = np.linalg.norm(s1, axis=1)
    n2 = np.linalg.norm(s2, axis=1)
    z1, z2 = n1 == 0.0, n2 == 0.0
    u1 = s1 / np.where(z1, 1.0, n1)[:, None]
    u2 = s2 / np.where(z2, 1.0, n2)[:, None]
    cost = 1.0 - u1 @ u2.T
    # rounding guard: identical frames must cost exactly 0, and the
    # per-node cost stays inside [0, 2]
    cost[np.abs(cost) < 1e-12] = 0.0
    np.clip(cost, 0.0, 2.0, out=cost)
    if z1.any() or z2.any():
        cost[z1, :] = 1.0
        cost[:, z2] = 1.0
        cost[np.ix_(z1, z2)] = 0.0
    return cost


def dtw_distance(s1: np.ndarray, s2: np.ndarray) -> float:
    """Average cosine cost along the minimal dynamic-time-warping path.

    Steps are (1,0), (0,1), (1,1); the cost of a path is the sum over its
    nodes (endpoints included) and the minimal-total path's cost is divided
    by its node count.  Ties between predecessors break diagonal-first.
    """
    s1 = np.asarray(s1, dtype=np.float64)
    s2 = np.asarray(s2, dtype=np.float64)
    if s1.ndim != 2 or s2.ndim != 2:
        raise ValueError("sequences must be 2-D (frames x dim)")
    if s1.shape[0] == 0 or s2.shape[0] == 0:
        raise ValueError("empty sequence")
    if s1.shape[1] != s2.shape[1]:
        raise ValueError(f"dimension mismatch {s1.shape[1]} vs {s2.shape[1]}")
    cost = cosine_cost_matrix(s1, s2)
    n, m = cost.shape
    acc = np.empty((n, m))
    acc[0, :] = np.cumsum(cost[0, :])
    acc[:, 0] = np.cumsum(cost[:, 0])
    for i in range(1, n):
        row = acc[i]
        prev = acc[i - 1]
        ci = cost[i]
        left = row[0]
        for j in range(1, m):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if left < best:
                best = left
            left = ci[j] + best
            row[j] = left
    # backtrack to count path nodes (diagonal preferred on exact ties)
    i, j, length = n - 1, m - 1, 1
    while i > 0 or j > 0:
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            d, u, l = acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1]
            if d <= u and d <= l:
                i, j = i - 1, j - 1
            elif u <= l:
                i -= 1
            else:
                j -= 1
        length += 1
    return float(acc[n - 1, m - 1] / length)


def score_triple(a: np.ndarray, b: np.ndarray, x: np.ndarray) -> float:
    """1 if X is DTW-closer to A than to B, 0.5 on an exact tie, else 0."""
    da, db = dtw_distance(a, x), dtw_distance(b, x)
    if da < db:
        return 1.0
    if da == db:
        return 0.5
    return 0.0


# ---------------------------------------------------------------------------
# ABX phone discrimination
# ---------------------------------------------------------------------------

@dataclass
class TriphoneInstance:
    context: tuple          # (left, center, right) phone ids
    speaker: int
    utterance_id: str
    rep: np.ndarray         # representation frames spanning the triphone


@dataclass
class AbxReport:
    error_rate: float                 # percent, macro-averaged over contexts
    per_context: dict                 # "l/cA/cB/r" -> {"error": %, "n": count}
    n_triples: int
    representation: str


def triphone_instances(utterances, reps: dict, rate_divisor: int
                       ) -> list[TriphoneInstance]:
    """Cut every consecutive 3-segment span out of the representations.

    reps maps utterance_id -> (frames, dim) array at the feature rate
    divided by rate_divisor.
    """
    out = []
    for utt in utterances:
        rep = reps[utt.utterance_id]
        segs = utt.phone_segments
        for i in range(len(segs) - 2):
            (p0, s0, _), (p1, _, _), (p2, _, e2) = segs[i], segs[i + 1], segs[i + 2]
            lo = s0 // rate_divisor
            hi = max(-(-e2 // rate_divisor), lo + 1)
            piece = rep[lo:hi]
            if piece.shape[0] == 0:
                continue
            out.append(TriphoneInstance(context=(p0, p1, p2), speaker=utt.speaker,
                                        utterance_id=utt.utterance_id, rep=piece))
    return out


def abx_error(utterances, reps: dict, rate_divisor: int = 1,
              rep_tag: str = "features", max_triples: int = 5000,
              seed: int = 0) -> AbxReport:
    """Across-speaker ABX: A and B share a speaker, X is a different speaker.

    A and X are instances of the same triphone; B differs in the center
    phone only.  Valid triples are sampled (seeded) up to max_triples and
    scores are macro-averaged per context pair, then over context pairs.
    """
    instances = triphone_instances(utterances, reps, rate_divisor)
    by_class: dict = {}
    for inst in instances:
        by_class.setdefault(inst.context, {}).setdefault(inst.speaker, []).append(inst)

    # group classes sharing (left, right); centers must differ
    by_lr: dict = {}
    for (l, c, r), speakers in by_class.items():
        by_lr.setdefault((l, r), {})[c] = speakers

    keys = []
    for (l, r), centers in by_lr.items():
        names = sorted(centers)
        for ca in names:
            a_speakers = set(centers[ca])
            if len(a_speakers) < 2:
                continue  # X needs a second speaker with the A class
            for cb in names:
                if cb == ca:
                    continue
                shared = sorted(a_speakers & set(centers[cb]))
                valid = [s for s in shared if len(a_speakers - {s}) > 0]
                if valid:
                    keys.append(((l, ca, r), (l, cb, r), valid))
    if not keys:
        raise ValueError("no valid ABX triples: need a second speaker sharing "
                         "triphone classes (is the split single-speaker?)")

    rng = np.random.default_rng(seed)
    per_key: dict = {}
    n_triples = 0
    for _ in range(max_triples):
        cls_a, cls_b, valid = keys[int(rng.integers(len(keys)))]
        s = valid[int(rng.integers(len(valid)))]
        x_speakers = sorted(set(by_class[cls_a]) - {s})
        sx = x_speakers[int(rng.integers(len(x_speakers)))]
        pick = lambda lst: lst[int(rng.integers(len(lst)))]
        a = pick(by_class[cls_a][s])
        b = pick(by_class[cls_b][s])
        x = pick(by_class[cls_a][sx])
        score = score_triple(a.rep, b.rep, x.rep)
        tag = f"{cls_a[0]}/{cls_a[1]}/{cls_b[1]}/{cls_a[2]}"
        tot, cnt = per_key.get(tag, (0.0, 0))
        per_key[tag] = (tot + score, cnt + 1)
        n_triples += 1

    per_context = {tag: {"error": 100.0 * (1.0 - tot / cnt), "n": cnt}
                   for tag, (tot, cnt) in sorted(per_key.items())}
    overall = float(np.mean([v["error"] for v in per_context.values()]))
    return AbxReport(error_rate=overall, per_context=per_context,
                     n_triples=n_triples, representation=rep_tag)


REP_POINTS = ("features", "code", "pre-quant", "aux")


def encode_representations(model, utterances, point: str) -> tuple[dict, int]:
    """Per-utterance representation arrays for a probe/ABX point.

    Returns (utt_id -> array, rate divisor relative to the feature rate).
    """
    if point not in REP_POINTS:
        raise ValueError(f"unknown representation {point!r}; pick from {REP_POINTS}")
    if point == "features":
        return {u.utterance_id: u.features.frames.astype(np.float64)
                for u in utterances}, 1
    reps = {}
    for u in utterances:
        enc = model_encode(model, u.features)
        arr = {"code": enc.code_vectors, "pre-quant": enc.pre_quant,
               "aux": enc.aux}[point]
        reps[u.utterance_id] = arr.frames.astype(np.float64)
    return reps, 2


# ---------------------------------------------------------------------------
# Bitrate
# ---------------------------------------------------------------------------

def bitrate(code_sequences, total_duration_s: float) -> float:
    """(total symbols x unigram entropy in bits) / duration in seconds."""
    if total_duration_s <= 0:
        raise ValueError("duration must be positive")
    arrays = []
    for seq in code_sequences:
        arr = seq.indices if isinstance(seq, CodeSequence) else np.asarray(seq)
        arrays.append(arr.astype(np.int64))
    if not arrays or sum(a.size for a in arrays) == 0:
        raise ValueError("no code symbols")
    pooled = np.concatenate(arrays)
    counts = np.bincount(pooled)
    probs = counts[counts > 0] / pooled.size
    entropy_bits = float(-(probs * np.log2(probs)).sum())
    return pooled.size * entropy_bits / total_duration_s


# ---------------------------------------------------------------------------
# Speaker probing
# ---------------------------------------------------------------------------

def speaker_probe(reps: list[np.ndarray], speakers: list[int], hidden: int = 256,
                  steps: int = 300, lr: float = 1e-3, batch_size: int = 32,
                  test_fraction: float = 0.2, max_frames: int = 128,
                  seed: int = 0) -> float:
    """Accuracy (%) of a one-hidden-layer probe predicting the speaker.

    Per-frame hidden layer with ReLU, mean-pooled over time, then a linear
    classifier; trained with Adam on an utterance-level train/test split
    stratified by speaker.  The representation is frozen.
    """
    speakers = np.asarray(speakers)
    classes = np.unique(speakers)
    if classes.size < 2:
        raise ValueError("speaker probe needs at least 2 speakers")
    rng = np.random.default_rng(seed)
    label_of = {int(s): i for i, s in enumerate(classes)}
    labels = np.array([label_of[int(s)] for s in speakers])

    crop = min(min(r.shape[0] for r in reps), max_frames)
    data = np.stack([r[:crop].astype(np.float64) for r in reps])
    # standardize so probe convergence does not depend on the rep's scale
    mu = data.mean(axis=(0, 1))
    sd = data.std(axis=(0, 1))
    data = (data - mu) / np.where(sd == 0, 1.0, sd)

    train_idx, test_idx = [], []
    for s in classes:
        idx = np.flatnonzero(speakers == s)
        idx = idx[rng.permutation(idx.size)]
        n_test = max(1, int(round(test_fraction * idx.size))) if idx.size > 1 else 0
        test_idx.extend(idx[:n_test])
        train_idx.extend(idx[n_test:])
    train_idx = np.asarray(train_idx)
    test_idx = np.asarray(test_idx)
    if test_idx.size == 0 or train_idx.size == 0:
        raise ValueError("not enough utterances per speaker to split the probe set")

    dim = data.shape[2]
    w1 = ag.param(rng.normal(scale=1.0 / np.sqrt(dim), size=(dim, hidden)))
    b1 = ag.param(np.zeros(hidden))
    w2 = ag.param(rng.normal(scale=1.0 / np.sqrt(hidden), size=(hidden, classes.size)))
    b2 = ag.param(np.zeros(classes.size))
    opt = ag.Adam([w1, b1, w2, b2], lr=lr)

    def logits_of(x):
        h = ag.relu(ag.linear(ag.constant(x), w1, b1))      # (N, T, H)
        pooled = ag.scale(ag.sum_axis(h, 1), 1.0 / crop)    # mean over time
        return ag.linear(pooled, w2, b2)

    for _ in range(steps):
        pick = rng.choice(train_idx.size, size=min(batch_size, train_idx.size),
                          replace=False)
        batch = train_idx[pick]
        loss = ag.softmax_cross_entropy(logits_of(data[batch]), labels[batch])
        opt.zero_grad()
        loss.backward()
        opt.step()

    preds = np.argmax(logits_of(data[test_idx]).data, axis=1)
    return float(100.0 * np.mean(preds == labels[test_idx]))


# ---------------------------------------------------------------------------
# Alignment export (Figure-3-style data)
# ---------------------------------------------------------------------------

ALIGNMENT_FIELDS = ("frame", "time_s", "phone", "code")


def alignment_table(utterance, codes: CodeSequence) -> list[tuple]:
    """One row per code frame: (frame, time_s, phone label, code index)."""
    n_codes = -(-utterance.features.n_frames // 2)
    if codes.n_frames != n_codes:
        raise ValueError(f"length mismatch: {codes.n_frames} codes for "
                         f"{utterance.features.n_frames} frames (expected {n_codes})")
    rows = []
    for t in range(codes.n_frames):
        feat_frame = min(2 * t, utterance.features.n_frames - 1)
        rows.append((t, t / codes.frame_rate_hz,
                     int(utterance.phone_labels[feat_frame]),
                     int(codes.indices[t])))
    return rows


def export_alignment(utterance, codes: CodeSequence, path, meta: dict | None = None
                     ) -> list[tuple]:
    """Write the alignment table as CSV (atomic); returns the rows."""
    rows = alignment_table(utterance, codes)
    buf = _stdio.StringIO()
    for key in sorted(meta or {}):
        buf.write(f"# {key}={meta[key]}\n")
    writer = csv.writer(buf)
    writer.writerow(ALIGNMENT_FIELDS)
    for row in rows:
        writer.writerow([row[0], f"{row[1]:.6f}", row[2], row[3]])
    atomic_write_text(os.fspath(path), buf.getvalue())
    return rows


def read_alignment(path) -> list[tuple]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    if tuple(header) != ALIGNMENT_FIELDS:
        raise ValueError(f"unexpected alignment header {header}")
    return [(int(f), float(t), int(p), int(c)) for f, t, p, c in reader]
