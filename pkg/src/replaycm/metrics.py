"""Detection metrics: EER, normalised minimum t-DCF, DET points, accuracy.

Threshold convention everywhere: a trial is accepted when ``score >= t``.
"""
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CM_KEYS = ("bonafide", "spoof")
ASV_KEYS = ("target", "nontarget", "spoof")


class MetricError(ValueError):
    pass


@dataclass
class ScoreSet:
    ids: list
    scores: np.ndarray
    keys: list

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not (len(self.ids) == len(self.scores) == len(self.keys)):
            raise MetricError("ids, scores and keys must have equal length")
        if not np.all(np.isfinite(self.scores)):
            raise MetricError("score set contains non-finite scores")

    def of(self, key) -> np.ndarray:
        mask = np.array([k == key for k in self.keys], dtype=bool)
        return self.scores[mask]

    def __len__(self):
        return len(self.ids)


def det_curve(pos, neg):
    """FRR/FAR at every distinct score plus a final reject-all point.

    Returns (thresholds, frr, far), thresholds increasing, last one ``+inf``.
    FRR(t) = frac(pos < t), FAR(t) = frac(neg >= t).
    """
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise MetricError("need at least one positive and one negative score")
    thr = np.unique(np.concatenate([pos, neg]))
    frr = np.searchsorted(np.sort(pos), thr, side="left") / pos.size
    far = (neg.size - np.searchsorted(np.sort(neg), thr, side="left")) / neg.size
    return np.append(thr, np.inf), np.append(frr, 1.0), np.append(far, 0.0)


def eer_from_curve(thr, frr, far):
    """Crossing of the FRR and FAR polylines, linearly interpolated."""
    d = far - frr  # starts >= 0 (frr=0 at lowest threshold), ends < 0 at +inf
    i = int(np.argmax(d <= 0))
    if d[i] == 0 or i == 0:
        return float(frr[i]), float(thr[i])
    a = d[i - 1] / (d[i - 1] - d[i])
    rate = frr[i - 1] + a * (frr[i] - frr[i - 1])
    t_hi = thr[i] if np.isfinite(thr[i]) else thr[i - 1]
    t = thr[i - 1] + a * (t_hi - thr[i - 1])
    return float(rate), float(t)


def compute_eer(pos, neg):
    """(eer, threshold) for positive (bona fide / target) vs negative scores."""
    return eer_from_curve(*det_curve(pos, neg))


def eer(scores: ScoreSet, positive="bonafide", negative="spoof"):
    pos, neg = scores.of(positive), scores.of(negative)
    if pos.size == 0 or neg.size == 0:
        raise MetricError(f"EER needs both {positive!r} and {negative!r} trials")
    return compute_eer(pos, neg)


@dataclass(frozen=True)
class TdcfParams:
    """Tandem cost model. Defaults follow the ASVspoof 2019 evaluation convention."""

    pi_tar: float = 0.9405
    pi_non: float = 0.0095
    pi_spoof: float = 0.05
    c_miss_asv: float = 1.0
    c_fa_asv: float = 10.0
    c_miss_cm: float = 1.0
    c_fa_cm: float = 10.0
    p_miss_asv: float = 0.0
    p_fa_asv: float = 0.0
    p_miss_spoof_asv: float = 0.0

    def __post_init__(self):
        pri = (self.pi_tar, self.pi_non, self.pi_spoof)
        if min(pri) <= 0 or abs(sum(pri) - 1.0) > 1e-9:
            raise MetricError("priors must be positive and sum to 1")
        if min(self.c_miss_asv, self.c_fa_asv, self.c_miss_cm, self.c_fa_cm) <= 0:
            raise MetricError("costs must be positive")
        for r in (self.p_miss_asv, self.p_fa_asv, self.p_miss_spoof_asv):
            if not 0.0 <= r <= 1.0:
                raise MetricError("ASV error rates must lie in [0, 1]")

    def with_asv(self, p_miss, p_fa, p_miss_spoof) -> "TdcfParams":
        d = dict(self.__dict__)
        d.update(p_miss_asv=p_miss, p_fa_asv=p_fa, p_miss_spoof_asv=p_miss_spoof)
        return TdcfParams(**d)

    def constants(self):
        c1 = (self.pi_tar * (self.c_miss_cm - self.c_miss_asv * self.p_miss_asv)
              - self.pi_non * self.c_fa_asv * self.p_fa_asv)
        c2 = self.c_fa_cm * self.pi_spoof * (1.0 - self.p_miss_spoof_asv)
        if c1 <= 0 or c2 <= 0:
            raise MetricError(f"degenerate tandem operating point (C1={c1:.4g}, C2={c2:.4g})")
        return c1, c2


def tdcf_curve(bona, spoof, p: TdcfParams):
    """Normalised t-DCF at every threshold of the DET sweep (plus accept-all).

    Returns (thresholds, normalised_tdcf) with thresholds from ``-inf``
    (accept everything) to ``+inf`` (reject everything).
    """
    c1, c2 = p.constants()
    thr, p_miss, p_fa = det_curve(bona, spoof)
    thr = np.concatenate([[-np.inf], thr])
    p_miss = np.concatenate([[0.0], p_miss])
    p_fa = np.concatenate([[1.0], p_fa])
    return thr, (c1 * p_miss + c2 * p_fa) / min(c1, c2)


def min_tdcf(cm_scores: ScoreSet, p: TdcfParams):
    """(min normalised t-DCF, threshold) over all CM thresholds."""
    bona, spoof = cm_scores.of("bonafide"), cm_scores.of("spoof")
    if bona.size == 0 or spoof.size == 0:
        raise MetricError("min-tDCF needs both bona fide and spoof CM trials")
    thr, curve = tdcf_curve(bona, spoof, p)
    i = int(np.argmin(curve))
    return float(curve[i]), float(thr[i])


def asv_operating_point(asv_scores: ScoreSet):
    """(P_miss, P_fa, P_miss_spoof) at the ASV's target/non-target EER threshold."""
    tar, non, spf = (asv_scores.of(k) for k in ASV_KEYS)
    for k, arr in zip(ASV_KEYS, (tar, non, spf)):
        if arr.size == 0:
            raise MetricError(f"ASV score set has no {k!r} trials")
    _, t = compute_eer(tar, non)
    return (float(np.mean(tar < t)), float(np.mean(non >= t)), float(np.mean(spf < t)))


def accuracy_and_confusion(predictions, labels, n_classes=None):
    """Accuracy and count matrix C[true, predicted] over integer class ids."""
    pred = np.asarray(predictions, dtype=np.int64)
    lab = np.asarray(labels, dtype=np.int64)
    if pred.shape != lab.shape:
        raise MetricError(f"length mismatch: {pred.size} predictions, {lab.size} labels")
    if pred.size == 0:
        raise MetricError("no predictions")
    if n_classes is None:
        n_classes = int(max(pred.max(), lab.max())) + 1
    C = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(C, (lab, pred), 1)
    return float(np.mean(pred == lab)), C


# ---------------------------------------------------------------------------
# files


def write_scores(path, ids, scores) -> None:
    lines = [f"{u} {float(s):.6f}\n" for u, s in zip(ids, scores)]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(lines))


def read_scores(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise MetricError(f"{path}:{n}: expected 'utterance_id score'")
        out[parts[0]] = float(parts[1])
    return out


def write_keys(path, ids, keys) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(f"{u} {k}\n" for u, k in zip(ids, keys)))


def read_keys(path) -> dict:
    out = {}
    allowed = set(CM_KEYS) | set(ASV_KEYS)
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in allowed:
            raise MetricError(f"{path}:{n}: expected 'utterance_id <key>' with key in {sorted(allowed)}")
        out[parts[0]] = parts[1]
    return out


def join_scores_keys(scores: dict, keys: dict) -> ScoreSet:
    missing = [u for u in scores if u not in keys]
    if missing:
        raise MetricError(f"{len(missing)} scored utterances have no key, e.g. {missing[0]}")
    ids = sorted(scores)
    return ScoreSet(ids, [scores[u] for u in ids], [keys[u] for u in ids])


def summary(cm: ScoreSet, params: TdcfParams | None = None) -> str:
    """Plain-text results block."""
    e, t = eer(cm)
    lines = [
        f"EER {100 * e:.2f}%",
        f"EER threshold {t:.6f}",
    ]
    if params is not None:
        m, mt = min_tdcf(cm, params)
        lines += [f"min-tDCF {m:.4f}", f"min-tDCF threshold {mt:.6f}",
                  f"ASV P_miss {params.p_miss_asv:.4f} P_fa {params.p_fa_asv:.4f} "
                  f"P_miss_spoof {params.p_miss_spoof_asv:.4f}"]
    lines.append(f"trials bonafide {cm.of('bonafide').size} spoof {cm.of('spoof').size}")
    return "\n".join(lines) + "\n"
