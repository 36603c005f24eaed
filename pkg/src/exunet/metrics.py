"""Trial lists, cosine scoring, and detection metrics (EER, minimum
normalized detection cost), plus the evaluation driver that corrupts the
test side of each trial with held-out noise at an exact SNR.

Convention: a trial is accepted when its score >= threshold. The candidate
thresholds are the distinct scores plus a reject-all sentinel; EER linearly
interpolates between adjacent operating points when no exact crossing
exists.
"""

from dataclasses import dataclass, field

import numpy as np

from .corpus import CorpusAudioSource, Waveform, mix_at_snr
from .frontend import DEFAULT_FRONTEND, FrontendConfig
from .netcore import extract_embeddings


@dataclass
class Trial:
    label: int  # 1 target, 0 nontarget
    enroll_id: str
    test_id: str


@dataclass
class TrialScoreSet:
    entries: list  # of (label, score)
    metadata: dict = field(default_factory=dict)

    def split(self):
        tar = np.array([s for l, s in self.entries if l == 1], dtype=np.float64)
        non = np.array([s for l, s in self.entries if l == 0], dtype=np.float64)
        if tar.size == 0 or non.size == 0:
            raise ValueError("need at least one target and one nontarget score")
        return tar, non


def parse_trials(path) -> list[Trial]:
    """Read '<0|1> <enroll_id> <test_id>' lines; reports malformed lines by
    number."""
    trials = []
    bad = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if (
                len(parts) != 3
                or parts[0] not in ("0", "1")
                or parts[1] == parts[2]
            ):
                bad.append(lineno)
                continue
            trials.append(Trial(int(parts[0]), parts[1], parts[2]))
    if bad:
        raise ValueError(f"{path}: malformed trial lines: {bad}")
    if not trials:
        raise ValueError(f"{path}: no trials found")
    return trials


def save_trials(path, trials):
    with open(path, "w", encoding="utf-8") as f:
        for t in trials:
            f.write(f"{t.label} {t.enroll_id} {t.test_id}\n")


def make_trials(
    utts,
    seed: int = 0,
    max_nontargets: int | None = None,
) -> list[Trial]:
    """All same-speaker pairs as targets plus (optionally subsampled)
    cross-speaker pairs; `utts` is a list of (utterance_key, speaker_id)."""
    targets, nontargets = [], []
    for i in range(len(utts)):
        for j in range(i + 1, len(utts)):
            (ka, sa), (kb, sb) = utts[i], utts[j]
            (targets if sa == sb else nontargets).append((ka, kb))
    if max_nontargets is not None and len(nontargets) > max_nontargets:
        rng = np.random.default_rng(seed)
        idx = sorted(rng.choice(len(nontargets), max_nontargets, replace=False))
        nontargets = [nontargets[i] for i in idx]
    return [Trial(1, a, b) for a, b in targets] + [
        Trial(0, a, b) for a, b in nontargets
    ]


def cosine_score(e1, e2) -> float:
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    n1, n2 = np.linalg.norm(e1), np.linalg.norm(e2)
    if n1 < 1e-12 or n2 < 1e-12:
        raise ValueError("cannot score a zero-norm embedding")
    return float(np.dot(e1, e2) / (n1 * n2))


# ---------------------------------------------------------------------------
# detection metrics


def _roc_points(tar: np.ndarray, non: np.ndarray):
    """False-acceptance and false-rejection rates at every candidate
    threshold (the distinct scores ascending, then reject-all)."""
    tar = np.sort(tar)
    non = np.sort(non)
    thr = np.unique(np.concatenate([tar, non]))
    far = 1.0 - np.searchsorted(non, thr, side="left") / non.size
    frr = np.searchsorted(tar, thr, side="left") / tar.size
    thr = np.append(thr, np.inf)
    far = np.append(far, 0.0)
    frr = np.append(frr, 1.0)
    return thr, far, frr


def compute_eer(scores: TrialScoreSet):
    """Equal error rate and its threshold, linearly interpolating between
    adjacent operating points when FAR never exactly meets FRR."""
    tar, non = scores.split()
    thr, far, frr = _roc_points(tar, non)
    d = far - frr  # non-increasing, ends at -1
    k = int(np.argmax(d <= 0.0))
    if d[k] == 0.0:
        return float(far[k]), float(thr[k])
    # crossing lies strictly between points k-1 and k
    t = d[k - 1] / (d[k - 1] - d[k])
    eer = far[k - 1] + t * (far[k] - far[k - 1])
    threshold = thr[k - 1] + t * (thr[k] - thr[k - 1]) if np.isfinite(thr[k]) else thr[k - 1]
    return float(eer), float(threshold)


def compute_min_dcf(
    scores: TrialScoreSet,
    p_target: float = 0.05,
    c_miss: float = 1.0,
    c_fa: float = 1.0,
) -> float:
    """Minimum over thresholds of the prior- and cost-weighted detection
    cost, normalized by the best trivial system."""
    tar, non = scores.split()
    _, far, frr = _roc_points(tar, non)
    cost = c_miss * frr * p_target + c_fa * far * (1.0 - p_target)
    norm = min(c_miss * p_target, c_fa * (1.0 - p_target))
    return float(np.min(cost) / norm)


def det_curve(scores: TrialScoreSet):
    """(threshold, p_miss, p_fa) triples for external plotting."""
    tar, non = scores.split()
    thr, far, frr = _roc_points(tar, non)
    return [(float(t), float(m), float(f)) for t, m, f in zip(thr, frr, far)]


# ---------------------------------------------------------------------------
# trial evaluation


@dataclass(frozen=True)
class Condition:
    noise_kind: str | None = None
    snr_db: float | None = None

    @property
    def is_original(self) -> bool:
        return self.noise_kind is None

    def __str__(self):
        if self.is_original:
            return "original"
        snr = self.snr_db
        snr_txt = f"{int(snr)}" if float(snr).is_integer() else f"{snr}"
        return f"{self.noise_kind}:{snr_txt}"

    @staticmethod
    def parse(text: str) -> "Condition":
        if text == "original":
            return Condition()
        kind, _, snr = text.partition(":")
        if not snr:
            raise ValueError(f"bad condition {text!r}, expected 'kind:snr'")
        return Condition(kind, float(snr))


def _corrupt(wave: Waveform, noises, cond: Condition, rng) -> Waveform:
    noise = noises[int(rng.integers(0, len(noises)))]
    offset = int(rng.integers(0, noise.samples.size))
    return mix_at_snr(wave, noise, cond.snr_db, noise_offset=offset)


def run_trials(
    model,
    trials: list[Trial],
    source: CorpusAudioSource,
    condition: Condition,
    seed: int = 0,
    corrupt_enroll: bool = False,
    frontend_cfg: FrontendConfig = DEFAULT_FRONTEND,
) -> TrialScoreSet:
    """Score a trial list under one condition.

    Test-side utterances are mixed with held-out test noise of the requested
    kind at the exact SNR; enrollment stays clean unless `corrupt_enroll`.
    """
    noises = None
    if not condition.is_original:
        noises = source.test_noises(condition.noise_kind)
        if not noises:
            raise ValueError(
                f"no test noise of kind {condition.noise_kind!r} in the manifest"
            )

    enroll_ids = sorted({t.enroll_id for t in trials})
    test_ids = sorted({t.test_id for t in trials})

    def embed_many(ids, corrupted, salt):
        waves = []
        for i, uid in enumerate(ids):
            wave = source.utterance(uid)
            if corrupted and noises is not None:
                rng = np.random.default_rng([seed, salt, i])
                wave = _corrupt(wave, noises, condition, rng)
            waves.append(wave)
        embs = extract_embeddings(model, waves, frontend_cfg)
        return dict(zip(ids, embs))

    enroll_embs = embed_many(enroll_ids, corrupt_enroll, salt=1)
    test_embs = embed_many(test_ids, True, salt=2)

    entries = [
        (t.label, cosine_score(enroll_embs[t.enroll_id], test_embs[t.test_id]))
        for t in trials
    ]
    return TrialScoreSet(
        entries=entries,
        metadata={
            "condition": str(condition),
            "n_target": sum(1 for t in trials if t.label == 1),
            "n_nontarget": sum(1 for t in trials if t.label == 0),
            "seed": seed,
        },
    )


def save_scores(path, trials, score_set: TrialScoreSet):
    with open(path, "w", encoding="utf-8") as f:
        for t, (label, score) in zip(trials, score_set.entries):
            f.write(f"{label} {t.enroll_id} {t.test_id} {score:.6f}\n")


def save_det_curve(path, scores: TrialScoreSet):
    with open(path, "w", encoding="utf-8") as f:
        f.write("threshold,p_miss,p_fa\n")
        for thr, p_miss, p_fa in det_curve(scores):
            f.write(f"{thr:.6g},{p_miss:.6f},{p_fa:.6f}\n")
