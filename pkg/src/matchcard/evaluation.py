"""ROC / EER / TPR@FAR over integer Hamming thresholds, and streamed replay.

Accept rule everywhere is ``distance <= tau``. Rates are kept as exact
counts so threshold selection never depends on float rounding.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
from scipy.stats import binom

from .apdu import BinaryTemplate, TemplatePayload, TraceLog, verify_command, enroll_command
from .card import Card, CardConfig
from .datasets import EmbeddingSet
from .pcaitq import PcaItqModel, majority_fuse

log = logging.getLogger(__name__)

ACCEPT_SW = 0x9000
REJECT_SW = 0x6985
DEFAULT_FAR_TARGETS = (1e-3, 1e-2)


@dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray
    length_bits: int

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.int64)
        self.impostor = np.asarray(self.impostor, dtype=np.int64)
        for name, arr in (("genuine", self.genuine), ("impostor", self.impostor)):
            if arr.size == 0:
                raise ValueError(f"{name} score list is empty")
            if arr.min() < 0 or arr.max() > self.length_bits:
                raise ValueError(f"{name} distances outside [0, {self.length_bits}]")


@dataclass(frozen=True)
class RocRow:
    tau: int
    tpr: float
    far: float
    frr: float


@dataclass
class RocCurve:
    """Cumulative accept counts for every integer tau in [0, L]."""

    genuine_accepts: np.ndarray
    impostor_accepts: np.ndarray
    n_genuine: int
    n_impostor: int

    @property
    def length_bits(self) -> int:
        return len(self.genuine_accepts) - 1

    @property
    def taus(self) -> np.ndarray:
        return np.arange(len(self.genuine_accepts))

    @property
    def tpr(self) -> np.ndarray:
        return self.genuine_accepts / self.n_genuine

    @property
    def far(self) -> np.ndarray:
        return self.impostor_accepts / self.n_impostor

    @property
    def frr(self) -> np.ndarray:
        return 1.0 - self.tpr

    @property
    def rows(self) -> list[RocRow]:
        return [
            RocRow(int(t), float(a), float(b), float(c))
            for t, a, b, c in zip(self.taus, self.tpr, self.far, self.frr)
        ]

    def to_csv(self) -> str:
        lines = ["tau,tpr,far,frr"]
        lines += [f"{r.tau},{r.tpr:.4f},{r.far:.4f},{r.frr:.4f}" for r in self.rows]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class OperatingPoint:
    tau: int
    tpr: float
    far: float
    target_far: Optional[float] = None

    @property
    def frr(self) -> float:
        return 1.0 - self.tpr


@dataclass
class ConfusionMatrix:
    tp: int = 0
    fn: int = 0
    fp: int = 0
    tn: int = 0

    def add(self, genuine: bool, accepted: bool) -> None:
        if genuine:
            if accepted:
                self.tp += 1
            else:
                self.fn += 1
        elif accepted:
            self.fp += 1
        else:
            self.tn += 1

    @property
    def tpr(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def far(self) -> float:
        return self.fp / (self.fp + self.tn) if self.fp + self.tn else 0.0


def compute_roc(scores: ScoreSet) -> RocCurve:
    L = scores.length_bits
    g = np.cumsum(np.bincount(scores.genuine, minlength=L + 1))
    i = np.cumsum(np.bincount(scores.impostor, minlength=L + 1))
    return RocCurve(g, i, len(scores.genuine), len(scores.impostor))


def find_eer(curve: RocCurve) -> OperatingPoint:
    """Integer tau minimizing |FAR - FRR| (smallest tau on ties).

    The reported error is the midpoint (FAR + FRR) / 2 at that tau.
    """
    ng, ni = curve.n_genuine, curve.n_impostor
    fa = curve.impostor_accepts
    fr = ng - curve.genuine_accepts
    # |fa/ni - fr/ng| scaled by ni*ng stays integral
    gap = np.abs(fa * ng - fr * ni)
    tau = int(np.argmin(gap))
    far = float(fa[tau] / ni)
    frr = float(fr[tau] / ng)
    return OperatingPoint(tau, 1.0 - frr, far, target_far=None)


def eer_value(point: OperatingPoint) -> float:
    return (point.far + point.frr) / 2.0


def tpr_at_far(curve: RocCurve, target: float) -> OperatingPoint:
    """Tau whose achieved FAR is closest to ``target``.

    Ties on distance go to the lower FAR; taus sharing the same FAR go to
    the largest one, which has the highest TPR.
    """
    if not 0.0 < target < 1.0:
        raise ValueError("target FAR must lie in (0, 1)")
    t = Fraction(target)
    ni = curve.n_impostor
    best = None
    for tau, fa in enumerate(curve.impostor_accepts.tolist()):
        far = Fraction(fa, ni)
        key = (abs(far - t), far, -tau)
        if best is None or key < best[0]:
            best = (key, tau)
    tau = best[1]
    return OperatingPoint(tau, float(curve.tpr[tau]), float(curve.far[tau]), target_far=target)


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise Hamming distances between rows of two 0/1 matrices."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    return a @ (1 - b).T + (1 - a) @ b.T


def pairwise_scores(bits: np.ndarray, labels: np.ndarray) -> ScoreSet:
    """All unordered image pairs: same label -> genuine, otherwise impostor."""
    D = hamming_matrix(bits, bits)
    iu, ju = np.triu_indices(len(labels), k=1)
    same = labels[iu] == labels[ju]
    return ScoreSet(D[iu, ju][same], D[iu, ju][~same], bits.shape[1])


@dataclass
class EnrollmentSplit:
    enroll: dict[int, list[int]]
    probes: dict[int, list[int]]

    @property
    def identities(self) -> list[int]:
        return sorted(self.enroll)


def enrollment_split(dataset: EmbeddingSet, seed: int, n_enroll: int = 2) -> EnrollmentSplit:
    """Seeded choice of enrollment images per identity; the rest are probes."""
    rng = np.random.default_rng(seed)
    enroll, probes = {}, {}
    for label in dataset.identities():
        idx = dataset.indices_of(label)
        if len(idx) < n_enroll + 1:
            log.warning("identity %d has %d images; skipped", label, len(idx))
            continue
        chosen = sorted(rng.choice(idx, size=n_enroll, replace=False).tolist())
        enroll[label] = chosen
        probes[label] = [int(i) for i in idx if i not in chosen]
    if not enroll:
        raise ValueError("no identity has enough images for enrollment plus a probe")
    return EnrollmentSplit(enroll, probes)


def fused_references(model: PcaItqModel, dataset: EmbeddingSet, split: EnrollmentSplit) -> dict[int, BinaryTemplate]:
    templates = model.encode_batch(dataset.embeddings)
    return {label: majority_fuse([templates[i] for i in split.enroll[label]]) for label in split.identities}


# ---------------------------------------------------------------------------
# Streamed enrol -> verify replay
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Transaction:
    enrolled_label: int
    probe_index: int
    probe_label: int
    genuine: bool
    sw: int


@dataclass
class ReplayResult:
    tau: int
    confusion: ConfusionMatrix
    transactions: list[Transaction]
    offline_distances: np.ndarray  # same order as transactions
    trace: Optional[TraceLog] = None

    @property
    def streamed_accepts(self) -> np.ndarray:
        return np.array([t.sw == ACCEPT_SW for t in self.transactions])

    @property
    def offline_accepts(self) -> np.ndarray:
        return self.offline_distances <= self.tau

    @property
    def genuine_mask(self) -> np.ndarray:
        return np.array([t.genuine for t in self.transactions])


def _replay_identity(args):
    label, reference, rotation_id, length_bits, tau, probes, with_trace = args
    card = Card(CardConfig({length_bits: tau}))
    trace = TraceLog() if with_trace else None
    enroll = enroll_command(TemplatePayload(rotation_id, reference)).to_bytes()
    resp = card.transmit(enroll)
    if trace is not None:
        trace.record(enroll, resp)
    if resp[-2:] != b"\x90\x00":
        raise RuntimeError(f"enrollment of identity {label} failed: {resp.hex()}")
    out = []
    for probe_index, probe_label, template in probes:
        raw = verify_command(TemplatePayload(rotation_id, template)).to_bytes()
        resp = card.transmit(raw)
        if trace is not None:
            trace.record(raw, resp)
        out.append(Transaction(label, probe_index, probe_label, probe_label == label, int.from_bytes(resp[-2:], "big")))
    return out, (trace.lines if trace is not None else [])


def streamed_replay(
    dataset: EmbeddingSet,
    model: PcaItqModel,
    tau: int,
    seed: int,
    jobs: int = 1,
    with_trace: bool = False,
) -> ReplayResult:
    """Enroll each identity on a fresh card, then stream every probe at it.

    Genuine trials are the identity's own probe images; impostor trials
    are all other identities' probe images.
    """
    if not 0 <= tau <= model.length_bits:
        raise ValueError(f"tau={tau} outside [0, {model.length_bits}]")
    split = enrollment_split(dataset, seed)
    refs = fused_references(model, dataset, split)
    templates = model.encode_batch(dataset.embeddings)
    probe_list = [
        (i, label, templates[i]) for label in split.identities for i in split.probes[label]
    ]
    work = [
        (label, refs[label], model.rotation_id, model.length_bits, tau, probe_list, with_trace)
        for label in split.identities
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_replay_identity, work))
    else:
        results = [_replay_identity(w) for w in work]

    confusion = ConfusionMatrix()
    transactions: list[Transaction] = []
    trace = TraceLog() if with_trace else None
    for txs, lines in results:
        transactions.extend(txs)
        if trace is not None:
            trace.lines.extend(lines)
    for tx in transactions:
        confusion.add(tx.genuine, tx.sw == ACCEPT_SW)

    ref_bits = np.array([refs[label].bits for label in split.identities])
    probe_bits = np.array([t.bits for _, _, t in probe_list])
    D = hamming_matrix(ref_bits, probe_bits)
    offline = D.reshape(-1)  # row-major matches (identity, probe) transaction order
    return ReplayResult(tau, confusion, transactions, offline, trace)


def binomial_interval(rate: float, n: int, confidence: float = 0.99) -> tuple[float, float]:
    """Central interval for the observed rate of n Bernoulli(rate) trials."""
    lo, hi = binom.interval(confidence, n, rate)
    return float(lo) / n, float(hi) / n


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class Evaluation:
    length_bits: int
    seed: int
    offline: RocCurve
    eer_point: OperatingPoint
    far_points: list[OperatingPoint]
    tau: int
    replay: ReplayResult
    extra: dict = field(default_factory=dict)

    def report(self) -> dict:
        c = self.replay.confusion
        r4 = lambda x: round(float(x), 4)  # noqa: E731
        return {
            "length_bits": self.length_bits,
            "tau": self.tau,
            "eer": r4(eer_value(self.eer_point)),
            "tau_eer": self.eer_point.tau,
            "tpr_at_far": [
                {"target": p.target_far, "tau": p.tau, "tpr": r4(p.tpr), "far": r4(p.far)}
                for p in self.far_points
            ],
            "offline": {
                "tpr": r4(self.offline.tpr[self.tau]),
                "far": r4(self.offline.far[self.tau]),
            },
            "streamed": {
                "tp": c.tp, "fn": c.fn, "fp": c.fp, "tn": c.tn,
                "tpr": r4(c.tpr), "far": r4(c.far),
            },
            "seed": self.seed,
        }


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def offline_roc(dataset: EmbeddingSet, model: PcaItqModel) -> RocCurve:
    bits = model.encode_bits(dataset.embeddings)
    return compute_roc(pairwise_scores(bits, dataset.labels))


def evaluate(
    dataset: EmbeddingSet,
    model: PcaItqModel,
    seed: int,
    tau: Optional[int] = None,
    far_target: float = 1e-2,
    far_targets: Sequence[float] = DEFAULT_FAR_TARGETS,
    jobs: int = 1,
    with_trace: bool = False,
) -> Evaluation:
    """Offline ROC on all image pairs, then replay at tau (or at the FAR target)."""
    curve = offline_roc(dataset, model)
    eer_point = find_eer(curve)
    points = [tpr_at_far(curve, t) for t in far_targets]
    if tau is None:
        tau = tpr_at_far(curve, far_target).tau
    replay = streamed_replay(dataset, model, tau, seed, jobs=jobs, with_trace=with_trace)
    return Evaluation(model.length_bits, seed, curve, eer_point, points, tau, replay)
