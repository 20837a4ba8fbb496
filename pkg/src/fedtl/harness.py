"""Multi-site protocol simulation: partitions, transcript, privacy audit.

The trust boundary is structural: site-local computations receive a
:class:`SiteRoundView` that exposes exactly one round's data block, and the
aggregator receives only :class:`TranscriptEntry` objects (the privatized
messages).  No aggregator code path can reach a raw payload.

Seeds are derived per (site, round, stage) from the master seed via the
documented hash chain in :mod:`fedtl.seeding`, so serial and parallel
executions of the same configuration produce bit-identical transcripts.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import seeding
from .errors import ParameterError, ProtocolError, TranscriptFormatError
from .mechanisms import (
    NoiseMode,
    PrivacyBudget,
    gaussian_noise_std,
    laplace_scale,
    peeling_noise_scale,
)

Block = tuple[int, int]

_PEELING_TAG = re.compile(r"^peeling\[s=(\d+)\]$")


# ---------------------------------------------------------------------------
# site data and partitions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Partition:
    """Disjoint index ranges of one site's data: optional detection segment
    plus consecutive round blocks over the remainder."""

    detection: Block | None
    blocks: tuple[Block, ...]

    def __post_init__(self) -> None:
        ranges = list(self.blocks) + ([self.detection] if self.detection else [])
        for start, stop in ranges:
            if not 0 <= start < stop:
                raise ParameterError(f"empty or negative range ({start}, {stop})")
        ordered = sorted(ranges)
        for (s1, e1), (s2, e2) in zip(ordered, ordered[1:]):
            if s2 < e1:
                raise ParameterError("partition ranges overlap")


def partition_site(n: int, T: int, detection_split: bool = False) -> Partition:
    """Partition n indices into T consecutive round blocks.

    With ``detection_split`` the first floor(n/2) - 1 indices are reserved
    for the detection stage and the remaining indices are divided into T
    blocks of floor(remaining/T); leftover tail indices stay unused.
    """
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if detection_split:
        det_len = n // 2 - 1
        if det_len < 1 or n - det_len < T:
            raise ParameterError(f"n={n} too small for a detection split with T={T}")
        detection = (0, det_len)
        base = det_len
    else:
        if n < T:
            raise ParameterError(f"n={n} smaller than round count T={T}")
        detection = None
        base = 0
    b = (n - base) // T
    blocks = tuple((base + t * b, base + (t + 1) * b) for t in range(T))
    return Partition(detection, blocks)


@dataclass(frozen=True)
class SiteDataset:
    """One site's raw observations: 1-d samples or a (covariates, responses) pair."""

    site_id: int
    payload: np.ndarray | tuple[np.ndarray, np.ndarray]
    partition: Partition | None = None

    @property
    def n(self) -> int:
        if isinstance(self.payload, tuple):
            return self.payload[0].shape[0]
        return self.payload.shape[0]

    def _slice(self, block: Block):
        start, stop = block
        if not 0 <= start < stop <= self.n:
            raise ProtocolError(f"block {block} outside site {self.site_id} range [0, {self.n})")
        if isinstance(self.payload, tuple):
            X, y = self.payload
            return X[start:stop], y[start:stop]
        return self.payload[start:stop]


# ---------------------------------------------------------------------------
# transcript
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StageRecord:
    """One mechanism invocation emitted by a site-local round function."""

    stage: str
    epsilon: float
    delta: float
    sensitivity: float
    noise_scale: float
    payload: np.ndarray | float


@dataclass(frozen=True)
class TranscriptEntry:
    """One privatized message: the (site, round, stage) cell of the transcript."""

    round_index: int
    site_id: int
    stage: str
    epsilon: float
    delta: float
    sensitivity: float
    noise_scale: float
    payload: np.ndarray | float | None
    stream_id: str
    block: Block | None

    def payload_hash(self) -> str:
        if self.payload is None:
            return ""
        arr = np.ascontiguousarray(np.atleast_1d(np.asarray(self.payload, dtype=np.float64)))
        return hashlib.sha256(arr.tobytes()).hexdigest()[:16]


@dataclass(frozen=True)
class Transcript:
    """The full privatized communication record of one protocol execution."""

    entries: tuple[TranscriptEntry, ...]
    round_count: int

    HEADER = "t,k,stage,epsilon,delta,sensitivity,noise_std,payload_hash,block_start,block_stop"

    def for_round(self, t: int) -> tuple[TranscriptEntry, ...]:
        return tuple(e for e in self.entries if e.round_index == t)

    def merged_with(self, other: "Transcript") -> "Transcript":
        return Transcript(self.entries + other.entries, max(self.round_count, other.round_count))

    def serialize(self) -> str:
        """Line-delimited records with a fixed, documented column order."""
        lines = [self.HEADER]
        for e in self.entries:
            bs, be = ("", "") if e.block is None else (str(e.block[0]), str(e.block[1]))
            lines.append(
                f"{e.round_index},{e.site_id},{e.stage},"
                f"{e.epsilon:.17g},{e.delta:.17g},{e.sensitivity:.17g},{e.noise_scale:.17g},"
                f"{e.payload_hash()},{bs},{be}"
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "Transcript":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != cls.HEADER:
            raise TranscriptFormatError("missing or unexpected transcript header")
        entries = []
        for ln in lines[1:]:
            parts = ln.split(",")
            if len(parts) != 10:
                raise TranscriptFormatError(f"malformed transcript line: {ln!r}")
            try:
                t, k = int(parts[0]), int(parts[1])
                stage = parts[2]
                eps, delta, sens, std = (float(x) for x in parts[3:7])
                block = None
                if parts[8] or parts[9]:
                    block = (int(parts[8]), int(parts[9]))
            except ValueError as exc:
                raise TranscriptFormatError(f"malformed transcript line: {ln!r}") from exc
            entries.append(
                TranscriptEntry(t, k, stage, eps, delta, sens, std, None, "", block)
            )
        rounds = 1 + max((e.round_index for e in entries), default=-1)
        return cls(tuple(entries), rounds)


# ---------------------------------------------------------------------------
# protocol execution
# ---------------------------------------------------------------------------

class SiteRoundView:
    """Read-only access to exactly one site's round-t data block.

    The view is invalidated when its round completes; any later access is a
    protocol violation.  Per-stage generators come from the documented
    (site, round, stage) hash chain.
    """

    def __init__(self, site: SiteDataset, round_index: int, block: Block,
                 master_seed: int, noise_mode: NoiseMode):
        self._site = site
        self.site_id = site.site_id
        self.round_index = round_index
        self.block = block
        self._master_seed = master_seed
        self.noise_mode = noise_mode
        self._open = True

    @property
    def data(self):
        if not self._open:
            raise ProtocolError(
                f"site {self.site_id} accessed round {self.round_index} data after the round closed"
            )
        return self._site._slice(self.block)

    def rng(self, stage: str) -> np.random.Generator:
        return seeding.spawn(
            self._master_seed,
            seeding.DOMAIN_PROTOCOL,
            self.site_id,
            self.round_index,
            seeding.stage_code(stage),
        )

    def stream_id(self, stage: str) -> str:
        return seeding.stream_id(
            seeding.DOMAIN_PROTOCOL,
            self.site_id,
            self.round_index,
            seeding.stage_code(stage),
        )

    def _close(self) -> None:
        self._open = False


RoundFn = Callable[[SiteRoundView, object], Sequence[StageRecord]]
AggFn = Callable[[tuple[TranscriptEntry, ...], object, int], object]


def run_protocol(
    sites: Sequence[SiteDataset],
    round_fn: RoundFn,
    agg_fn: AggFn,
    T: int,
    *,
    blocks: Mapping[int, Sequence[Block]],
    master_seed: int,
    noise_mode: NoiseMode = NoiseMode.CALIBRATED,
    initial_broadcast: object = None,
    round_offset: int = 0,
) -> tuple[object, list[TranscriptEntry]]:
    """Execute T communication rounds and record every privatized message.

    ``blocks`` maps a participating site id to its per-round data blocks
    (one block per round).  Each round, ``round_fn`` runs once per
    participating site with a view of that round's block plus the current
    broadcast state, and must return the stage records of the mechanisms it
    invoked.  ``agg_fn`` then folds the round's transcript entries (sorted
    by site and stage, the canonical order) into the next broadcast state.
    The aggregator never sees raw data: entries are its only input.
    """
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    by_id = {s.site_id: s for s in sites}
    for k, blist in blocks.items():
        if k not in by_id:
            raise ParameterError(f"blocks given for unknown site {k}")
        if len(blist) != T:
            raise ParameterError(f"site {k} must supply exactly T={T} blocks, got {len(blist)}")
    broadcast = initial_broadcast
    entries: list[TranscriptEntry] = []
    for t_local in range(T):
        t = round_offset + t_local
        round_entries: list[TranscriptEntry] = []
        for k in sorted(blocks):
            site = by_id[k]
            view = SiteRoundView(site, t, tuple(blocks[k][t_local]), master_seed, noise_mode)
            try:
                records = round_fn(view, broadcast)
            finally:
                view._close()
            for rec in records:
                round_entries.append(
                    TranscriptEntry(
                        round_index=t,
                        site_id=k,
                        stage=rec.stage,
                        epsilon=rec.epsilon,
                        delta=rec.delta,
                        sensitivity=rec.sensitivity,
                        noise_scale=rec.noise_scale,
                        payload=rec.payload,
                        stream_id=view.stream_id(rec.stage),
                        block=view.block,
                    )
                )
        round_entries.sort(key=lambda e: (e.site_id, e.stage))
        seen = set()
        for e in round_entries:
            key = (e.site_id, e.round_index, e.stage)
            if key in seen:
                raise ProtocolError(f"duplicate stage {e.stage!r} for site {e.site_id} round {e.round_index}")
            seen.add(key)
        entries.extend(round_entries)
        broadcast = agg_fn(tuple(round_entries), broadcast, t)
    return broadcast, entries


# ---------------------------------------------------------------------------
# ledger audit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LedgerViolation:
    site: int
    round: int
    rule: str
    detail: str


@dataclass(frozen=True)
class LedgerVerdict:
    ok: bool
    violations: tuple[LedgerViolation, ...]

    def __post_init__(self) -> None:
        if self.ok != (len(self.violations) == 0):
            raise ParameterError("ok flag inconsistent with violation list")


def _mandated_noise_scale(entry: TranscriptEntry) -> float | None:
    """Minimum noise scale implied by the entry's stage, sensitivity and budget."""
    stage = entry.stage
    if stage in ("laplace", "range", "private_variance"):
        return laplace_scale(entry.sensitivity, entry.epsilon)
    if stage == "gaussian":
        return gaussian_noise_std(entry.sensitivity, PrivacyBudget(entry.epsilon, entry.delta))
    m = _PEELING_TAG.match(stage)
    if m:
        return peeling_noise_scale(
            entry.sensitivity, int(m.group(1)), PrivacyBudget(entry.epsilon, entry.delta)
        )
    return None


def audit_ledger(
    transcript: Transcript,
    declared: PrivacyBudget,
    rel_tol: float = 1e-9,
) -> LedgerVerdict:
    """Structural audit of a transcript against the declared per-round budget.

    Checks, for every (site, round): the stage budgets compose to at most
    the declared (epsilon, delta); the data blocks of distinct rounds are
    disjoint; and every recorded noise scale is at least the value mandated
    by its stage, recorded sensitivity and stage budget.
    """
    violations: list[LedgerViolation] = []

    by_cell: dict[tuple[int, int], list[TranscriptEntry]] = {}
    for e in transcript.entries:
        by_cell.setdefault((e.site_id, e.round_index), []).append(e)

    for (k, t), cell in sorted(by_cell.items()):
        eps_sum = sum(e.epsilon for e in cell)
        delta_sum = sum(e.delta for e in cell)
        if eps_sum > declared.epsilon * (1 + rel_tol):
            violations.append(
                LedgerViolation(k, t, "budget", f"epsilon sum {eps_sum:.6g} exceeds declared {declared.epsilon:.6g}")
            )
        if delta_sum > declared.delta * (1 + rel_tol) + 1e-300:
            violations.append(
                LedgerViolation(k, t, "budget", f"delta sum {delta_sum:.6g} exceeds declared {declared.delta:.6g}")
            )

    by_site: dict[int, list[TranscriptEntry]] = {}
    for e in transcript.entries:
        if e.block is not None:
            by_site.setdefault(e.site_id, []).append(e)
    for k, site_entries in sorted(by_site.items()):
        spans: dict[Block, set[int]] = {}
        for e in site_entries:
            spans.setdefault(e.block, set()).add(e.round_index)
        for blk, rounds in sorted(spans.items()):
            if len(rounds) > 1:
                violations.append(
                    LedgerViolation(k, min(rounds), "partition", f"block [{blk[0]},{blk[1]}) reused in rounds {sorted(rounds)}")
                )
        flat = sorted(spans.items())
        for (b1, r1), (b2, r2) in zip(flat, flat[1:]):
            if b2[0] < b1[1]:
                violations.append(
                    LedgerViolation(
                        k, min(r1 | r2), "partition",
                        f"blocks [{b1[0]},{b1[1]}) and [{b2[0]},{b2[1]}) overlap (rounds {sorted(r1 | r2)})",
                    )
                )

    for e in transcript.entries:
        try:
            mandated = _mandated_noise_scale(e)
        except ParameterError as exc:
            violations.append(LedgerViolation(e.site_id, e.round_index, "noise", str(exc)))
            continue
        if mandated is None:
            violations.append(
                LedgerViolation(e.site_id, e.round_index, "noise", f"unknown mechanism stage {e.stage!r}")
            )
        elif e.noise_scale < mandated * (1 - rel_tol):
            violations.append(
                LedgerViolation(
                    e.site_id, e.round_index, "noise",
                    f"stage {e.stage!r} noise scale {e.noise_scale:.6g} below mandated {mandated:.6g}",
                )
            )

    violations.sort(key=lambda v: (v.site, v.round, v.rule))
    return LedgerVerdict(ok=not violations, violations=tuple(violations))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class EstimatorReport:
    """Final estimate plus everything needed to reproduce and audit it."""

    estimate: np.ndarray | float
    selected: frozenset[int]
    transcript: Transcript
    master_seed: int
    per_site: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)
    decision: object | None = None
