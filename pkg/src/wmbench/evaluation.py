"""Detection and identification scoring, curves, leaderboards and radar summaries."""

import logging
import math
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import stats

from ._errors import ContractViolation
from ._validators import require_finite, require_open_unit, require_positive_int
from .core import BitMessage, PathLike, Rng, random_words, stack_words

logger = logging.getLogger(__name__)

DEFAULT_FPR_TARGET = 0.001
DEFAULT_REPEATS = 10
DEFAULT_USERS = (100, 1_000_000)
DETECTION_THRESHOLDS = (0.95, 0.7)
IDENTIFICATION_THRESHOLDS = (0.7, 0.4)
RANK_BUFFER = 0.01
DEFAULT_QUALITY_CUTOFF = 0.8

# Users are drawn in fixed-size chunks so the stream is independent of batching
USER_CHUNK = 65536
_PAIR_BUDGET = 1 << 22


@dataclass(frozen=True)
class DetectionScoreSet:
    """Scores of watermarked and non-watermarked images; higher means more watermark-like."""

    watermarked: tuple[float, ...]
    non_watermarked: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "watermarked", tuple(float(s) for s in self.watermarked))
        object.__setattr__(self, "non_watermarked", tuple(float(s) for s in self.non_watermarked))


def _require_scores(scores: DetectionScoreSet) -> tuple[np.ndarray, np.ndarray]:
    if not scores.watermarked or not scores.non_watermarked:
        raise ContractViolation("Both watermarked and non-watermarked scores are required")
    return np.asarray(scores.watermarked), np.asarray(scores.non_watermarked)


def detection_threshold(scores: DetectionScoreSet, fpr_target: float = DEFAULT_FPR_TARGET) -> float:
    """
    The negative score that the decision threshold must exceed.

    With ``N`` negatives, ``floor(fpr_target * N)`` of them may score at or
    above the threshold; a score counts as detected when strictly above the
    returned value.
    """
    require_open_unit("fpr_target", fpr_target)
    _, negatives = _require_scores(scores)
    allowed = math.floor(fpr_target * negatives.size + 1e-9)
    if allowed >= negatives.size:
        return -math.inf
    ordered = np.sort(negatives)[::-1]
    return float(ordered[allowed])


def tpr_at_fpr(scores: DetectionScoreSet, fpr_target: float = DEFAULT_FPR_TARGET) -> float:
    """
    True-positive rate at the smallest threshold whose false-positive rate
    does not exceed ``fpr_target``.

    Raises:
        ContractViolation: If a score list is empty or the target is outside (0, 1).
    """
    positives, _ = _require_scores(scores)
    threshold = detection_threshold(scores, fpr_target)
    return float(np.mean(positives > threshold))


def auroc(scores: DetectionScoreSet) -> float:
    """Area under the ROC curve (Mann-Whitney estimate, ties count half)."""
    positives, negatives = _require_scores(scores)
    ranks = stats.rankdata(np.concatenate([positives, negatives]))
    n_pos, n_neg = positives.size, negatives.size
    return float((ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


UserBank = Union[Sequence[BitMessage], np.ndarray]


def identify(decoded: BitMessage, user_messages: UserBank) -> int:
    """
    Index of the user whose message is closest to ``decoded``; ties go to
    the lowest index.

    Args:
        decoded: Decoded message.
        user_messages: Messages, or their packed ``(K, words)`` array.

    Raises:
        ContractViolation: On an empty list or mismatched lengths.
    """
    if isinstance(user_messages, np.ndarray):
        words = user_messages
        if words.ndim != 2 or words.shape[0] == 0 or words.shape[1] != decoded.words.size:
            raise ContractViolation(f"User words of shape {words.shape} do not match the message")
    else:
        words = stack_words(list(user_messages))
        if user_messages[0].length != decoded.length:
            raise ContractViolation(
                f"Message length mismatch: {user_messages[0].length} vs {decoded.length}"
            )
    distances = np.bitwise_count(words ^ decoded.words).sum(axis=1)
    return int(np.argmin(distances))


def _batch_distances(queries: np.ndarray, users: np.ndarray) -> np.ndarray:
    return np.bitwise_count(queries[:, None, :] ^ users[None, :, :]).sum(axis=2, dtype=np.int64)


def identification_accuracy(
    decoded: Sequence[BitMessage],
    true_message: BitMessage,
    users: int,
    repeats: int = DEFAULT_REPEATS,
    rng: Optional[Rng] = None,
    true_user: int = 0,
) -> float:
    """
    Fraction of decoded messages attributed to the true user among ``users``
    users, averaged over ``repeats`` random draws of the other users.

    Other users' messages are streamed in fixed chunks from a per-repeat
    random stream, so memory stays bounded for a million users.

    Args:
        decoded: Decoded messages.
        true_message: Message embedded for the true user.
        users: Number of users ``K`` including the true user.
        repeats: Independent draws of the other users.
        rng: Random stream; repeat ``i`` uses ``rng.child("repeat", i)``.
        true_user: Index of the true user in the user list.

    Raises:
        ContractViolation: On ``K < 2``, ``repeats < 1`` or mismatched lengths.
    """
    require_positive_int("users", users, minimum=2)
    require_positive_int("repeats", repeats)
    if not 0 <= true_user < users:
        raise ContractViolation(f"True user {true_user} outside [0, {users})")
    if not decoded:
        raise ContractViolation("At least one decoded message is required")
    d = true_message.length
    # Stacked with the true message so every length is checked against it
    queries = stack_words([true_message, *decoded])[1:]
    unique, counts = np.unique(queries, axis=0, return_counts=True)
    true_dist = np.bitwise_count(unique ^ true_message.words).sum(axis=1, dtype=np.int64)
    rng = rng or Rng(0, "identification")

    batch = max(1, _PAIR_BUDGET // USER_CHUNK)
    accuracies = []
    for repeat in range(repeats):
        stream = rng.child("repeat", repeat)
        beaten = np.zeros(unique.shape[0], dtype=bool)
        drawn = 0
        while drawn < users - 1:
            n = min(USER_CHUNK, users - 1 - drawn)
            others = random_words(d, n, stream)
            # Other user i sits at index i below the true user and i + 1 above it,
            # so it wins a tie exactly when i < true_user
            tie_wins = np.arange(n) + drawn < true_user
            for start in range(0, unique.shape[0], batch):
                stop = start + batch
                dist = _batch_distances(unique[start:stop], others)
                t = true_dist[start:stop, None]
                lost = (dist < t).any(axis=1) | ((dist == t) & tie_wins[None, :]).any(axis=1)
                beaten[start:stop] |= lost
            drawn += n
        accuracies.append(float(counts[~beaten].sum() / counts.sum()))
    logger.debug("Identification accuracy over %d repeats (K=%d): %s", repeats, users, accuracies)
    return float(np.mean(accuracies))


@dataclass(frozen=True)
class EvalPoint:
    """One strength of an attack: performance ``p`` and quality degradation ``q``."""

    strength: float
    p: float
    q: float
    bit_accuracy: Optional[float] = None
    auroc: Optional[float] = None


@dataclass(frozen=True)
class EvalCurve:
    """Points of one attack ordered from mildest to strongest."""

    attack_id: str
    points: tuple[EvalPoint, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "points", tuple(self.points))
        for point in self.points:
            require_finite(f"{self.attack_id}: P", point.p)
            require_finite(f"{self.attack_id}: Q", point.q)
        steps = np.diff([point.strength for point in self.points])
        if steps.size and not (np.all(steps > 0) or np.all(steps < 0)):
            raise ContractViolation(f"{self.attack_id}: strengths must be strictly monotone")

    @classmethod
    def from_pq(
        cls, attack_id: str, p: Sequence[float], q: Sequence[float], strengths: Optional[Sequence[float]] = None
    ) -> "EvalCurve":
        strengths = strengths if strengths is not None else range(1, len(p) + 1)
        return cls(attack_id, tuple(EvalPoint(float(s), float(pp), float(qq)) for s, pp, qq in zip(strengths, p, q)))


def q_at_p(curve: EvalCurve, p_threshold: float) -> float:
    """
    Quality degradation where performance first crosses ``p_threshold``.

    Returns ``+inf`` when every point performs above the threshold and
    ``-inf`` when every point performs below it.

    Raises:
        ContractViolation: If the curve is empty.
    """
    points = curve.points
    if not points:
        raise ContractViolation(f"{curve.attack_id}: empty curve")
    if all(point.p > p_threshold for point in points):
        return math.inf
    if all(point.p < p_threshold for point in points):
        return -math.inf
    for current, following in zip(points, points[1:] + (None,)):
        if current.p == p_threshold:
            return current.q
        if following is not None and (current.p - p_threshold) * (following.p - p_threshold) < 0:
            fraction = (current.p - p_threshold) / (current.p - following.p)
            return current.q + fraction * (following.q - current.q)
    raise AssertionError("unreachable: a curve spanning the threshold must cross it")


def avg_pq(curve: EvalCurve) -> tuple[float, float]:
    """Unweighted mean performance and quality degradation over the curve."""
    if not curve.points:
        raise ContractViolation(f"{curve.attack_id}: empty curve")
    return (
        float(np.mean([point.p for point in curve.points])),
        float(np.mean([point.q for point in curve.points])),
    )


def average_curves(attack_id: str, curves: Sequence[EvalCurve]) -> EvalCurve:
    """Pointwise mean of P and Q over curves at the strengths they all share."""
    if not curves:
        raise ContractViolation(f"{attack_id}: no curves to average")
    shared = set.intersection(*({point.strength for point in c.points} for c in curves))
    points = []
    for point in curves[0].points:
        if point.strength not in shared:
            continue
        matching = [next(p for p in c.points if p.strength == point.strength) for c in curves]
        points.append(
            EvalPoint(
                point.strength,
                float(np.mean([p.p for p in matching])),
                float(np.mean([p.q for p in matching])),
                _mean_optional([p.bit_accuracy for p in matching]),
                _mean_optional([p.auroc for p in matching]),
            )
        )
    return EvalCurve(attack_id, tuple(points))


def _mean_optional(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


@dataclass(frozen=True)
class LeaderboardRow:
    """One ranked attack; lower rank means a more effective attack."""

    attack_id: str
    q_high: float
    q_low: float
    avg_p: float
    avg_q: float
    rank: int = 0

    @property
    def keys(self) -> tuple[float, float, float, float]:
        return (self.q_high, self.q_low, self.avg_p, self.avg_q)


def _within_buffer(a: float, b: float, buffer: float = RANK_BUFFER) -> bool:
    if a == b:
        return True
    if math.isinf(a) or math.isinf(b):
        return False
    # Rounded so that differences of exactly one buffer never tie
    return round(abs(a - b), 9) < buffer


def _assign_ranks(
    rows: list[LeaderboardRow], key: int, first_rank: int, out: list[LeaderboardRow]
) -> None:
    if key == 4 or len(rows) == 1:
        out.extend(replace(row, rank=first_rank) for row in rows)
        return
    ordered = sorted(rows, key=lambda row: row.keys[key])
    group = [ordered[0]]
    offset = 0
    for row in ordered[1:]:
        if _within_buffer(group[-1].keys[key], row.keys[key]):
            group.append(row)
            continue
        _assign_ranks(group, key + 1, first_rank + offset, out)
        offset += len(group)
        group = [row]
    _assign_ranks(group, key + 1, first_rank + offset, out)


def rank_attacks(
    rows: Sequence[Union[LeaderboardRow, tuple[str, float, float, float, float]]],
) -> list[LeaderboardRow]:
    """
    Rank attacks by ``Q@high``, ``Q@low``, ``Avg P`` and ``Avg Q`` ascending.

    Values within 0.01 of each other tie at a key. Rows are grouped by the
    first key into chains of consecutive tied values, each chain is split by
    the next key the same way, and rows still grouped after the last key
    share the rank of their group's first position.

    Returns:
        Rows ordered by rank.

    Raises:
        ContractViolation: If ``rows`` is empty.
    """
    if not rows:
        raise ContractViolation("Nothing to rank")
    normalized = [
        row if isinstance(row, LeaderboardRow) else LeaderboardRow(*(row[0], *map(float, row[1:5])))
        for row in rows
    ]
    out: list[LeaderboardRow] = []
    _assign_ranks(normalized, 0, 1, out)
    return out


def leaderboard_entry(curve: EvalCurve, thresholds: tuple[float, float] = DETECTION_THRESHOLDS) -> LeaderboardRow:
    """Unranked leaderboard row of one curve."""
    avg_p, avg_q = avg_pq(curve)
    return LeaderboardRow(
        curve.attack_id, q_at_p(curve, thresholds[0]), q_at_p(curve, thresholds[1]), avg_p, avg_q
    )


def build_leaderboard(
    curves: Sequence[EvalCurve], thresholds: tuple[float, float] = DETECTION_THRESHOLDS
) -> list[LeaderboardRow]:
    """Ranked leaderboard over curves; empty when no curves are given."""
    if not curves:
        return []
    return rank_attacks([leaderboard_entry(curve, thresholds) for curve in curves])


def radar_summary(
    curves: Mapping[str, EvalCurve],
    categories: Mapping[str, Sequence[str]],
    cutoff: float = DEFAULT_QUALITY_CUTOFF,
) -> dict[str, Optional[float]]:
    """
    Mean performance per attack category over points with ``Q < cutoff``.

    Categories without a qualifying point map to ``None``.
    """
    summary: dict[str, Optional[float]] = {}
    for category, attack_ids in categories.items():
        values = [
            point.p
            for attack_id in attack_ids
            if attack_id in curves
            for point in curves[attack_id].points
            if point.q < cutoff
        ]
        summary[category] = float(np.mean(values)) if values else None
    return summary


LEADERBOARD_GROUP_COLUMNS = ("dataset", "watermark")
CSV_FLOAT_FORMAT = "%.10g"
_Q_COLUMN = re.compile(r"Q@[0-9.]+P")


def q_column(threshold: float) -> str:
    """Leaderboard column name of a threshold, e.g. ``Q@0.95P``."""
    return f"Q@{threshold:g}P"


def leaderboard_frame(
    rows: Sequence[LeaderboardRow],
    thresholds: tuple[float, float] = DETECTION_THRESHOLDS,
    leading: Optional[Mapping[str, str]] = None,
) -> pd.DataFrame:
    """Leaderboard rows in the published column layout, optional grouping columns first."""
    leading = dict(leading or {})
    high, low = (q_column(t) for t in thresholds)
    columns = [*leading, "attack", "rank", high, low, "Avg P", "Avg Q"]
    return pd.DataFrame(
        [
            {
                **leading,
                "attack": row.attack_id,
                "rank": row.rank,
                high: row.q_high,
                low: row.q_low,
                "Avg P": row.avg_p,
                "Avg Q": row.avg_q,
            }
            for row in rows
        ],
        columns=columns,
    )


def rank_table(frame: pd.DataFrame) -> pd.DataFrame:
    """
    Rank a leaderboard table, separately per ``dataset``/``watermark`` group when present.

    The table needs an ``attack`` column, two ``Q@<t>P`` columns (higher
    threshold first) and ``Avg P``/``Avg Q``; an existing ``rank`` column is
    replaced.

    Raises:
        ContractViolation: On missing columns or an empty table.
    """
    q_columns = [c for c in frame.columns if _Q_COLUMN.fullmatch(str(c))]
    missing = sorted({"attack", "Avg P", "Avg Q"} - set(frame.columns))
    if len(q_columns) != 2 or missing:
        raise ContractViolation(
            f"Leaderboard needs attack, two Q@<t>P columns, Avg P and Avg Q (missing {missing}, "
            f"found Q columns {q_columns})"
        )
    if frame.empty:
        raise ContractViolation("Nothing to rank")
    thresholds = tuple(float(c[2:-1]) for c in q_columns)
    groups = [c for c in LEADERBOARD_GROUP_COLUMNS if c in frame.columns]
    parts = frame.groupby(groups, sort=False) if groups else [((), frame)]
    ranked = []
    for values, part in parts:
        values = values if isinstance(values, tuple) else (values,)
        keys = zip(
            part["attack"].astype(str),
            *(part[c].astype(float) for c in (*q_columns, "Avg P", "Avg Q")),
        )
        rows = rank_attacks(list(keys))
        ranked.append(leaderboard_frame(rows, thresholds, dict(zip(groups, values))))  # type: ignore[arg-type]
    return pd.concat(ranked, ignore_index=True)


def read_leaderboard(path: PathLike) -> pd.DataFrame:
    """Read a leaderboard CSV; ``inf``/``-inf`` cells parse as infinities."""
    try:
        return pd.read_csv(path, dtype={"attack": str, "watermark": str, "dataset": str})
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ContractViolation(f"Cannot read leaderboard {path}: {e}") from e


def write_frame(frame: pd.DataFrame, path: PathLike) -> Path:
    """Write a report table with the shared float format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    return path
